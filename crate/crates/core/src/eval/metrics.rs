use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probabilities below this are clamped before taking the logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
pub const REPORT_CUTOFFS: [usize; 3] = [5, 10, 20];

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Number of probabilities clamped by [`cross_entropy_loss`] in this process.
pub fn clamped_probabilities() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// `-ln p[positive]` for a candidate probability vector.
pub fn cross_entropy_loss(probs: &[f32], positive: usize) -> Result<f64> {
    let p = *probs
        .get(positive)
        .ok_or_else(|| Error::contract(format!("positive index {positive} outside {} candidates", probs.len())))?;
    let mut p = p as f64;
    if !(p >= PROBABILITY_FLOOR) {
        if CLAMPED.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("clamping probability {p} to {PROBABILITY_FLOOR}");
        }
        p = PROBABILITY_FLOOR;
    }
    Ok(-p.ln())
}

/// Mean of [`cross_entropy_loss`] over a batch whose positives sit at index 0.
pub fn mean_cross_entropy<'a>(batch: impl IntoIterator<Item = &'a [f32]>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for probs in batch {
        sum += cross_entropy_loss(probs, 0)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    Ok(sum / n as f64)
}

/// 1-based rank of `candidates[0]` under `scores`; ties go to the smaller item id.
pub fn rank_of_positive(scores: &[f32], candidates: &[u32]) -> usize {
    let (s0, id0) = (scores[0], candidates[0]);
    1 + scores
        .iter()
        .zip(candidates)
        .skip(1)
        .filter(|&(&s, &id)| s > s0 || (s == s0 && id < id0))
        .count()
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hitrate_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Fraction of negatives scored strictly below the positive (`scores[0]`),
/// ties counting one half. `None` without negatives.
pub fn auc(scores: &[f32]) -> Option<f64> {
    let (&pos, negs) = scores.split_first()?;
    if negs.is_empty() {
        return None;
    }
    let credit: f64 = negs
        .iter()
        .map(|&s| match s.partial_cmp(&pos) {
            Some(std::cmp::Ordering::Less) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Some(credit / negs.len() as f64)
}

/// Mean per-user AUC and the number of users skipped for lacking negatives.
pub fn uauc<'a>(per_user: impl IntoIterator<Item = &'a [f32]>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0;
    for scores in per_user {
        match auc(scores) {
            Some(a) => {
                sum += a;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, skipped)
}

/// Ranking quality over one evaluation case per user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub uauc: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    #[serde(rename = "ndcg@20")]
    pub ndcg20: f64,
    #[serde(rename = "hitrate@5")]
    pub hitrate5: f64,
    #[serde(rename = "hitrate@10")]
    pub hitrate10: f64,
    #[serde(rename = "hitrate@20")]
    pub hitrate20: f64,
    pub users: usize,
    pub skipped_users: usize,
}

/// Streaming aggregation of per-user cases into a [`MetricReport`].
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    auc_sum: f64,
    auc_users: usize,
    skipped: usize,
    ndcg: [f64; 3],
    hits: [f64; 3],
    users: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one case; `candidates[0]` is the positive.
    pub fn push(&mut self, scores: &[f32], candidates: &[u32]) {
        debug_assert_eq!(scores.len(), candidates.len());
        self.users += 1;
        match auc(scores) {
            Some(a) => {
                self.auc_sum += a;
                self.auc_users += 1;
            }
            None => self.skipped += 1,
        }
        let rank = rank_of_positive(scores, candidates);
        for (i, &k) in REPORT_CUTOFFS.iter().enumerate() {
            self.ndcg[i] += ndcg_at_k(rank, k);
            self.hits[i] += hitrate_at_k(rank, k);
        }
    }

    pub fn report(&self) -> MetricReport {
        let mean = |s: f64| if self.users == 0 { 0.0 } else { s / self.users as f64 };
        MetricReport {
            uauc: if self.auc_users == 0 { 0.0 } else { self.auc_sum / self.auc_users as f64 },
            ndcg5: mean(self.ndcg[0]),
            ndcg10: mean(self.ndcg[1]),
            ndcg20: mean(self.ndcg[2]),
            hitrate5: mean(self.hits[0]),
            hitrate10: mean(self.hits[1]),
            hitrate20: mean(self.hits[2]),
            users: self.users,
            skipped_users: self.skipped,
        }
    }
}
