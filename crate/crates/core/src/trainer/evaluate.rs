use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Example, SplitDataset};
use crate::eval::{MetricAccumulator, MetricReport};
use crate::gcn::GcnModel;
use crate::scn::ScnModel;
use crate::{Error, Result};

/// Aggregates metrics over `examples` with an arbitrary scoring function.
pub fn evaluate_with(examples: &[Example], mut score: impl FnMut(&Example) -> Result<Vec<f32>>) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for ex in examples {
        let scores = score(ex)?;
        if scores.len() != ex.candidates.len() {
            return Err(Error::contract(format!(
                "{} scores for {} candidates",
                scores.len(),
                ex.candidates.len()
            )));
        }
        acc.push(&scores, &ex.candidates);
    }
    Ok(acc.report())
}

/// Ranks candidate logits of the device model, corrected by `gcn` when given.
/// Without corrections the tape-free kernel is used.
pub fn evaluate(scn: &ScnModel, gcn: Option<&GcnModel>, examples: &[Example]) -> Result<MetricReport> {
    match gcn {
        None => {
            let scorer = scn.scorer(scn.config.mini_batch)?;
            evaluate_with(examples, |ex| Ok(scorer.logits(&ex.input, &ex.candidates)?.into_data()))
        }
        Some(gcn) => evaluate_with(examples, |ex| {
            let h = scn.hidden_state(&ex.input)?;
            let bundle = gcn.bundle(&h)?;
            Ok(scn.logits_from_hidden(&h, &ex.candidates, Some(&bundle))?.into_data())
        }),
    }
}

/// How often each item id occurs as a training target.
pub fn popularity_counts(split: &SplitDataset) -> Vec<u64> {
    let mut counts = vec![0u64; split.num_items];
    for ex in &split.train {
        if let Some(c) = counts.get_mut(ex.target as usize) {
            *c += 1;
        }
    }
    counts
}

/// Test metrics of ranking candidates by training popularity, ties by ascending id.
pub fn popularity_baseline(split: &SplitDataset) -> Result<MetricReport> {
    let counts = popularity_counts(split);
    evaluate_with(&split.test, |ex| {
        Ok(ex
            .candidates
            .iter()
            .map(|&c| counts.get(c as usize).copied().unwrap_or(0) as f32)
            .collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub mini_batch: usize,
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// Fastest of the timed passes over all examples.
    pub seconds: f64,
}

/// Scores `examples` with each inference mini-batch size and times the pass.
pub fn minibatch_sweep(scn: &ScnModel, examples: &[Example], sizes: &[usize], repeats: usize) -> Result<Vec<SweepRecord>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &b in sizes {
        if b == 0 || b > scn.config.seq_len {
            return Err(Error::config(format!(
                "mini-batch size {b} outside 1..={}",
                scn.config.seq_len
            )));
        }
        let scorer = scn.scorer(b)?;
        let mut metrics = None;
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let report = evaluate_with(examples, |ex| Ok(scorer.logits(&ex.input, &ex.candidates)?.into_data()))?;
            best = best.min(start.elapsed().as_secs_f64());
            metrics.get_or_insert(report);
        }
        rows.push(SweepRecord {
            mini_batch: b,
            metrics: metrics.unwrap_or_default(),
            seconds: best,
        });
    }
    Ok(rows)
}

pub fn write_minibatch_csv<W: Write>(rows: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mini_batch", "uauc", "ndcg@10", "hitrate@10", "users", "seconds"])
        .map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record([
            r.mini_batch.to_string(),
            r.metrics.uauc.to_string(),
            r.metrics.ndcg10.to_string(),
            r.metrics.hitrate10.to_string(),
            r.metrics.users.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
