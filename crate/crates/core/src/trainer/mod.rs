//! Joint training of the device model and the correction network, evaluation,
//! the popularity baseline and the mini-batch size sweep.

mod evaluate;
mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{stream_seed, SplitDataset};
use crate::eval::MetricReport;
use crate::gcn::{GcnConfig, GcnModel, PARAM_PREFIX};
use crate::numerics::{AdamW, AdamWConfig, Graph, NumericsError};
use crate::scn::{checkpoint_bytes, ScnConfig, ScnModel, EMBEDDING};
use crate::{Error, Result};

pub use evaluate::{
    evaluate, evaluate_with, minibatch_sweep, popularity_baseline, popularity_counts, write_minibatch_csv, SweepRecord,
};
pub use loss::loss_graph;

/// Examples recorded on one tape.
const CHUNK: usize = 32;
const GCN_SEED_SALT: u64 = 0x6763_6e5f_7365_6564;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Each rate trains a fresh model; the best validation NDCG@10 wins.
    pub learning_rates: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub heads: usize,
    /// Tokens per fast-weight mini-batch; `None` uses the whole sequence.
    pub mini_batch: Option<usize>,
    pub use_gcn: bool,
    pub gcn_hidden: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Pins the fusion scalars (P, Q) to fixed values and excludes them from training.
    pub frozen_fusion: Option<(f32, f32)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1024,
            learning_rates: AdamWConfig::LEARNING_RATE_GRID.to_vec(),
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            model_dim: 64,
            heads: 4,
            mini_batch: None,
            use_gcn: true,
            gcn_hidden: 512,
            patience: 3,
            frozen_fusion: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::config("learning rates must be a non-empty list of positive values"));
        }
        if self.use_gcn && self.gcn_hidden == 0 {
            return Err(Error::config("correction network hidden width must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(json))
    }

    fn scn_config(&self, split: &SplitDataset) -> ScnConfig {
        ScnConfig {
            vocab_size: split.num_items,
            model_dim: self.model_dim,
            heads: self.heads,
            seq_len: split.seq_len,
            mini_batch: self.mini_batch.unwrap_or(split.seq_len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<MetricReport>,
    pub seconds: f64,
}

/// History and provenance of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub config_hash: String,
    pub learning_rate: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Best validation NDCG@10 per learning rate tried.
    pub learning_rate_scores: Vec<(f64, f64)>,
    pub checkpoint_hash: String,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub scn: ScnModel,
    pub gcn: Option<GcnModel>,
    pub record: RunRecord,
}

fn fusion_names() -> [String; 2] {
    [format!("{PARAM_PREFIX}p"), format!("{PARAM_PREFIX}q")]
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(NumericsError::NonFinite(what)) => {
            Error::Diverged(format!("epoch {epoch}, batch {batch}: non-finite value in {what}"))
        }
        other => other,
    }
}

/// One optimisation step over `batch` (indices into the training examples).
/// Returns the summed loss of the batch.
fn train_step(
    scn: &mut ScnModel,
    gcn: &mut Option<GcnModel>,
    opt: &mut (AdamW, AdamW),
    split: &SplitDataset,
    batch: &[usize],
    frozen_fusion: bool,
) -> Result<f64> {
    scn.params.zero_grad();
    if let Some(gcn) = gcn.as_mut() {
        gcn.params.zero_grad();
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for chunk in batch.chunks(CHUNK) {
        let examples: Vec<_> = chunk.iter().map(|&i| &split.train[i]).collect();
        let mut g = Graph::<f32>::new();
        let scn_bind = scn.params.bind(&mut g)?;
        let gcn_bind = gcn.as_ref().map(|m| m.params.bind(&mut g)).transpose()?;
        let gcn_ref = gcn.as_ref().zip(gcn_bind.as_ref());
        let loss = loss_graph(&mut g, scn, &scn_bind, gcn_ref, &examples)?;
        total += g.value(loss).data()[0] as f64;
        let scaled = g.scale(loss, scale)?;
        let grads = g.backward(scaled)?;
        scn.params.accumulate(&scn_bind, &grads)?;
        if let (Some(m), Some(b)) = (gcn.as_mut(), gcn_bind.as_ref()) {
            m.params.accumulate(b, &grads)?;
        }
    }
    opt.0.step(&mut scn.params, |_| false);
    let fusion = fusion_names();
    if let Some(m) = gcn.as_mut() {
        opt.1.step(&mut m.params, |name| frozen_fusion && fusion.iter().any(|f| f == name));
    }
    let e = scn.params.value_mut(EMBEDDING)?;
    let d = e.cols();
    e.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
    Ok(total)
}

struct LrRun {
    scn: ScnModel,
    gcn: Option<GcnModel>,
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    best_score: f64,
    stopped_early: bool,
}

fn train_with_rate(split: &SplitDataset, config: &TrainConfig, learning_rate: f64) -> Result<LrRun> {
    if split.train.is_empty() {
        return Err(Error::data("split has no training examples"));
    }
    let mut scn = ScnModel::new(config.scn_config(split), config.seed)?;
    let mut gcn = if config.use_gcn {
        let cfg = GcnConfig {
            seq_len: split.seq_len,
            model_dim: config.model_dim,
            heads: config.heads,
            hidden: config.gcn_hidden,
        };
        let mut m = GcnModel::new(cfg, config.seed ^ GCN_SEED_SALT)?;
        if let Some((p, q)) = config.frozen_fusion {
            m.set_fusion_scalars(p, q)?;
        }
        Some(m)
    } else {
        None
    };
    let adam = AdamWConfig {
        learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = (AdamW::new(adam.clone())?, AdamW::new(adam)?);

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ScnModel, Option<GcnModel>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, u64::MAX, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            loss_sum += train_step(&mut scn, &mut gcn, &mut opt, split, batch, config.frozen_fusion.is_some())
                .map_err(diverged(epoch, b))?;
        }
        let train_loss = loss_sum / split.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: training loss {train_loss}")));
        }
        let valid = if split.valid.is_empty() {
            None
        } else {
            Some(evaluate(&scn, gcn.as_ref(), &split.valid)?)
        };
        let score = valid.as_ref().map_or(-train_loss, |m| m.ndcg10);
        log::info!("lr {learning_rate} epoch {epoch}: loss {train_loss:.5}, validation score {score:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch, scn.clone(), gcn.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_score, best_epoch, scn, gcn) = best.ok_or_else(|| Error::config("no epochs were run"))?;
    Ok(LrRun {
        scn,
        gcn,
        epochs,
        best_epoch,
        best_score,
        stopped_early,
    })
}

/// Trains one model per learning rate and keeps the one with the best
/// validation NDCG@10 (training loss when there is no validation data).
pub fn train(split: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mut chosen: Option<(f64, LrRun)> = None;
    let mut scores = Vec::new();
    for &lr in &config.learning_rates {
        let run = train_with_rate(split, config, lr)?;
        scores.push((lr, run.best_score));
        if chosen.as_ref().is_none_or(|(_, best)| run.best_score > best.best_score) {
            chosen = Some((lr, run));
        }
    }
    let (learning_rate, run) = chosen.ok_or_else(|| Error::config("no learning rate to try"))?;
    let checkpoint = checkpoint_bytes(&run.scn, run.gcn.as_ref())?;
    let record = RunRecord {
        config: config.clone(),
        config_hash: config.hash(),
        learning_rate,
        epochs: run.epochs,
        best_epoch: run.best_epoch,
        stopped_early: run.stopped_early,
        learning_rate_scores: scores,
        checkpoint_hash: hex::encode(Sha256::digest(&checkpoint)),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        scn: run.scn,
        gcn: run.gcn,
        record,
    })
}

/// Training loss of every epoch, without model selection; used for
/// trajectory comparisons.
pub fn loss_trajectory(split: &SplitDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let lr = config.learning_rates[0];
    let mut cfg = config.clone();
    cfg.patience = usize::MAX;
    let run = train_with_rate(split, &cfg, lr)?;
    Ok(run.epochs.iter().map(|e| e.train_loss).collect())
}
