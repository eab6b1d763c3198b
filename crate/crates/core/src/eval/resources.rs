use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ttt::TttConfig;
use crate::Result;

const F32_BYTES: u64 = 4;

/// Self-attention layer cost terms for sequence length `n`, `h` heads of width `d`,
/// as multiply-add counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAttentionFlops {
    /// Q, K, V and output projections: 4·n·h²·d².
    pub projections: u64,
    /// Score and value mixing: 2·n²·h·d.
    pub quadratic: u64,
    /// Feed-forward with 4x expansion: 8·n·h²·d².
    pub ffn: u64,
}

impl SelfAttentionFlops {
    pub fn attention(&self) -> u64 {
        self.projections + self.quadratic
    }

    pub fn total(&self) -> u64 {
        self.attention() + self.ffn
    }
}

pub fn flops_self_attention(n: u64, h: u64, d: u64) -> SelfAttentionFlops {
    SelfAttentionFlops {
        projections: 4 * n * h * h * d * d,
        quadratic: 2 * n * n * h * d,
        ffn: 8 * n * h * h * d * d,
    }
}

fn ttt_block_macs(cfg: &TttConfig, n: usize, output_rows: usize) -> u64 {
    let (d, dh, b) = (cfg.model_dim as u64, cfg.head_dim() as u64, cfg.mini_batch.max(1));
    let inner: u64 = (0..n)
        .step_by(b)
        .map(|s| {
            let l = (b.min(n - s)) as u64;
            3 * dh * dh * l + 2 * dh * l * l
        })
        .sum();
    cfg.heads as u64 * (3 * dh * d * n as u64 + inner) + output_rows as u64 * d * d
}

/// Multiply-adds of one block pass over `n` tokens with every row projected
/// out; equals the runtime counter of the block kernel.
pub fn flops_ttt_block(cfg: &TttConfig, n: usize) -> u64 {
    ttt_block_macs(cfg, n, n)
}

/// How the fast-weight updates are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStrategy {
    /// One token at a time.
    Naive,
    /// The whole sequence as a single mini-batch.
    DualForm,
    /// Mini-batches of the configured size.
    MiniBatch,
}

/// High-water bytes of live tensors in the streaming kernel for `n` tokens.
pub fn peak_memory_estimate(cfg: &TttConfig, n: usize, strategy: MemoryStrategy) -> u64 {
    if n == 0 {
        return 0;
    }
    let b = match strategy {
        MemoryStrategy::Naive => 1,
        MemoryStrategy::DualForm => n,
        MemoryStrategy::MiniBatch => cfg.mini_batch.max(1),
    };
    let l = b.min(n) as u64;
    let (d, dh, h) = (cfg.model_dim as u64, cfg.head_dim() as u64, cfg.heads as u64);
    let state = h * (dh * dh + dh);
    let transient = 2 * l * d + 6 * dh * l + l * l + dh * dh;
    F32_BYTES * (state + transient)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub sequence_length: usize,
    pub mini_batch: usize,
    /// Floating point ops, two per multiply-add.
    pub flops_total: u64,
    /// Growth per token, averaged over the final mini-batch.
    pub flops_per_token_delta: u64,
    pub peak_memory_bytes: u64,
}

pub fn resource_profile(cfg: &TttConfig, n: usize) -> ResourceProfile {
    let l = cfg.mini_batch.max(1).min(n).max(1);
    let total = flops_ttt_block(cfg, n);
    let prev = flops_ttt_block(cfg, n.saturating_sub(l));
    ResourceProfile {
        sequence_length: n,
        mini_batch: cfg.mini_batch,
        flops_total: 2 * total,
        flops_per_token_delta: 2 * (total - prev) / l as u64,
        peak_memory_bytes: peak_memory_estimate(cfg, n, MemoryStrategy::MiniBatch),
    }
}

/// One line of a sequence-length sweep, all costs in multiply-adds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub ttt_macs: u64,
    pub ttt_macs_per_token: u64,
    pub attention_macs: u64,
    pub attention_macs_per_token: u64,
    pub ttt_peak_bytes: u64,
    pub dual_form_peak_bytes: u64,
}

/// TTT block against a self-attention layer of equal width over `lengths`.
/// Per-token growth is measured over the preceding mini-batch for both models.
pub fn resource_sweep(cfg: &TttConfig, lengths: &[usize]) -> Vec<SweepRow> {
    let (h, dh) = (cfg.heads as u64, cfg.head_dim() as u64);
    let sa = |n: usize| flops_self_attention(n as u64, h, dh).attention();
    lengths
        .iter()
        .map(|&n| {
            let l = cfg.mini_batch.max(1).min(n).max(1);
            let prev = n.saturating_sub(l);
            SweepRow {
                n,
                ttt_macs: flops_ttt_block(cfg, n),
                ttt_macs_per_token: (flops_ttt_block(cfg, n) - flops_ttt_block(cfg, prev)) / l as u64,
                attention_macs: sa(n),
                attention_macs_per_token: (sa(n) - sa(prev)) / l as u64,
                ttt_peak_bytes: peak_memory_estimate(cfg, n, MemoryStrategy::MiniBatch),
                dual_form_peak_bytes: peak_memory_estimate(cfg, n, MemoryStrategy::DualForm),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| crate::Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
