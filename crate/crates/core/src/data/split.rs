use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{export_canonical, stream_seed, IngestReport, InteractionLog, Vocabulary};
use crate::{Error, Result};

/// One next-item prediction case. `candidates[0]` is the target; the rest are negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: u32,
    /// Position of the target in the user's history.
    pub step: u32,
    pub input: Vec<u32>,
    pub target: u32,
    pub candidates: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub seq_len: usize,
    /// Item ids including padding.
    pub num_items: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Sorted distinct items of every user, indexed by user id.
    pub user_items: Vec<Vec<u32>>,
    pub dropped_users: usize,
    pub train_negatives: usize,
    pub test_negatives: usize,
    pub seed: u64,
}

/// The last `n` items, left-padded with the padding id 0.
pub fn pad_left(items: &[u32], n: usize) -> Vec<u32> {
    let tail = &items[items.len().saturating_sub(n)..];
    let mut out = vec![0; n - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Leave-last-out split with sliding training windows of `seq_len` items.
///
/// The final interaction is the test target. Every earlier position with a
/// full window is a training target; for users with at least two such
/// windows the last one is held out for validation. Users with fewer than
/// `seq_len + 2` interactions are dropped.
pub fn split_leave_last(sequences: &[Vec<u32>], num_items: usize, seq_len: usize) -> SplitDataset {
    let mut split = SplitDataset {
        seq_len,
        num_items,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        user_items: Vec::with_capacity(sequences.len()),
        dropped_users: 0,
        train_negatives: 0,
        test_negatives: 0,
        seed: 0,
    };
    for (u, seq) in sequences.iter().enumerate() {
        let mut distinct = seq.clone();
        distinct.sort_unstable();
        distinct.dedup();
        split.user_items.push(distinct);
        let l = seq.len();
        if l < seq_len + 2 {
            split.dropped_users += 1;
            continue;
        }
        let example = |j: usize| Example {
            user: u as u32,
            step: j as u32,
            input: seq[j - seq_len..j].to_vec(),
            target: seq[j],
            candidates: vec![seq[j]],
        };
        let windows: Vec<usize> = (seq_len..l - 1).collect();
        let (train, valid) = if windows.len() >= 2 {
            windows.split_at(windows.len() - 1)
        } else {
            (&windows[..], &[][..])
        };
        split.train.extend(train.iter().map(|&j| example(j)));
        split.valid.extend(valid.iter().map(|&j| example(j)));
        split.test.push(example(l - 1));
    }
    split
}

fn draw_negatives(pool_size: usize, observed: &[u32], count: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut chosen = Vec::with_capacity(count);
    if pool_size >= 4 * count {
        let mut taken: HashSet<u32> = HashSet::with_capacity(count);
        while chosen.len() < count {
            let c = rng.random_range(1..=(pool_size + observed.len()) as u32);
            if observed.binary_search(&c).is_err() && taken.insert(c) {
                chosen.push(c);
            }
        }
    } else {
        let mut pool: Vec<u32> = (1..=(pool_size + observed.len()) as u32)
            .filter(|c| observed.binary_search(c).is_err())
            .collect();
        pool.shuffle(rng);
        chosen.extend_from_slice(&pool[..count]);
    }
    chosen
}

/// Adds `train_ratio` negatives to every training example and `test_ratio`
/// to every validation and test example. Negatives are distinct and never
/// items the user interacted with; each set depends only on (seed, user, step).
pub fn sample_negatives(mut split: SplitDataset, train_ratio: usize, test_ratio: usize, seed: u64) -> Result<SplitDataset> {
    let real_items = split.num_items.saturating_sub(1);
    let user_items = std::mem::take(&mut split.user_items);
    for (examples, ratio) in [
        (&mut split.train, train_ratio),
        (&mut split.valid, test_ratio),
        (&mut split.test, test_ratio),
    ] {
        for ex in examples.iter_mut() {
            let observed = &user_items[ex.user as usize];
            let pool = real_items - observed.len();
            if pool < ratio {
                return Err(Error::data(format!(
                    "user {} has only {pool} unobserved items for {ratio} negatives",
                    ex.user
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ex.user as u64, ex.step as u64));
            ex.candidates.truncate(1);
            ex.candidates.extend(draw_negatives(pool, observed, ratio, &mut rng));
        }
    }
    split.user_items = user_items;
    split.train_negatives = train_ratio;
    split.test_negatives = test_ratio;
    split.seed = seed;
    Ok(split)
}

/// Provenance summary written next to a prepared split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_sequence_length: f64,
    pub min_count: usize,
    pub seq_len: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub test_examples: usize,
    pub dropped_users: usize,
    pub train_negatives: usize,
    pub test_negatives: usize,
    pub seed: u64,
    pub ingest: IngestReport,
}

impl SplitManifest {
    pub fn new(log: &InteractionLog, vocab: &Vocabulary, split: &SplitDataset, min_count: usize, ingest: IngestReport) -> Self {
        let users = vocab.num_users();
        Self {
            users,
            items: vocab.num_items().saturating_sub(1),
            interactions: log.len(),
            avg_sequence_length: if users == 0 { 0.0 } else { log.len() as f64 / users as f64 },
            min_count,
            seq_len: split.seq_len,
            train_examples: split.train.len(),
            valid_examples: split.valid.len(),
            test_examples: split.test.len(),
            dropped_users: split.dropped_users,
            train_negatives: split.train_negatives,
            test_negatives: split.test_negatives,
            seed: split.seed,
            ingest,
        }
    }
}

pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";

/// Writes the split, its manifest and the filtered log in canonical TSV into `dir`.
pub fn write_split_dir(dir: &Path, log: &InteractionLog, split: &SplitDataset, manifest: &SplitManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    serde_json::to_writer(BufWriter::new(File::create(dir.join(SPLIT_FILE))?), split)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(MANIFEST_FILE))?), manifest)?;
    let mut out = BufWriter::new(File::create(dir.join(INTERACTIONS_FILE))?);
    export_canonical(log, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_split_dir(dir: &Path) -> Result<(SplitDataset, SplitManifest)> {
    let split = serde_json::from_reader(BufReader::new(File::open(dir.join(SPLIT_FILE))?))?;
    let manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    Ok((split, manifest))
}
