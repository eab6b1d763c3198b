//! Test-time-training linear layer.
//!
//! The fast weights `W` of every head are a small linear model fitted to the
//! sequence while it is being read. Three reference strategies for the plain
//! reconstruction loss live in [`simple`]; the production block with the
//! sigmoid-derivative update, rotary positions and correction hooks lives in
//! [`block`] (tape-based) and [`streaming`] (tape-free, memory tracked).

pub mod block;
pub mod oracle;
pub mod simple;
pub mod streaming;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

pub use block::{
    block_causal_keep, block_forward, block_graph, causal_keep, causal_mask, fuse_attention, fuse_bias, project, rope_apply,
    BlockNodes, BlockOutput, BlockTrace, CorrectionNodes, HeadInputs, OutputRows, RENORM_EPS,
};
pub use oracle::alg1_oracle;
pub use simple::{dual_form_simple, minibatch_scan, minibatch_update, naive_step};
pub use streaming::{LiveBytes, StreamingKernel};

pub const ROPE_BASE: f64 = 10_000.0;
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// Tokens whose inner gradients share the same block-entry weights.
    pub mini_batch: usize,
    /// Inner learning rate of the simple strategies; the production block fixes it at 1.
    pub eta: f64,
}

impl TttConfig {
    pub fn new(model_dim: usize, heads: usize, mini_batch: usize) -> Self {
        Self {
            model_dim,
            heads,
            mini_batch,
            eta: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if self.mini_batch == 0 || self.mini_batch > seq_len {
            return Err(Error::config(format!(
                "mini-batch size {} must lie in 1..={seq_len}",
                self.mini_batch
            )));
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("inner learning rate must be positive"));
        }
        Ok(())
    }

    /// Column ranges `[start, end)` of the mini-batches covering `n` tokens;
    /// the last one may be short.
    pub fn blocks(&self, n: usize) -> Vec<(usize, usize)> {
        let b = self.mini_batch.max(1);
        (0..n).step_by(b).map(|s| (s, (s + b).min(n))).collect()
    }
}

/// Per-head fast weights `W` (dh×dh) and bias (dh×1).
#[derive(Clone, Debug, PartialEq)]
pub struct TttState<T: Scalar = f32> {
    pub w: Vec<Tensor<T>>,
    pub bias: Vec<Tensor<T>>,
}

impl<T: Scalar> TttState<T> {
    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        Self {
            w: vec![Tensor::zeros(&[head_dim, head_dim]); heads],
            bias: vec![Tensor::zeros(&[head_dim, 1]); heads],
        }
    }
}

/// Per-head query/key/value projections (dh×D each) and the output projection (D×D).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T: Scalar = f32> {
    pub theta_q: Vec<Tensor<T>>,
    pub theta_k: Vec<Tensor<T>>,
    pub theta_v: Vec<Tensor<T>>,
    pub theta_o: Tensor<T>,
}

/// Everything the block needs besides its input: projections, initial state
/// and per-head layer-norm affine parameters (1×dh).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    pub proj: ProjectionSet<T>,
    pub state0: TttState<T>,
    pub ln_gain: Vec<Tensor<T>>,
    pub ln_bias: Vec<Tensor<T>>,
}

impl BlockParams<f32> {
    /// Projections ~ N(0, 1/D), fast weights uniform with standard deviation
    /// `0.02/sqrt(dh)`, zero bias, identity layer-norm affine.
    pub fn init(cfg: &TttConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, dh, heads) = (cfg.model_dim, cfg.head_dim(), cfg.heads);
        let proj_dist = Normal::new(0.0, 1.0 / (d as f32).sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let bound = 0.02 / (dh as f32).sqrt() * 3f32.sqrt();
        let mut normal = |r: usize, c: usize| Tensor::from_fn(r, c, |_, _| proj_dist.sample(rng));
        let theta_q = (0..heads).map(|_| normal(dh, d)).collect();
        let theta_k = (0..heads).map(|_| normal(dh, d)).collect();
        let theta_v = (0..heads).map(|_| normal(dh, d)).collect();
        let theta_o = normal(d, d);
        let w = (0..heads)
            .map(|_| Tensor::from_fn(dh, dh, |_, _| rng.random_range(-bound..bound)))
            .collect();
        Ok(Self {
            proj: ProjectionSet {
                theta_q,
                theta_k,
                theta_v,
                theta_o,
            },
            state0: TttState {
                w,
                bias: vec![Tensor::zeros(&[dh, 1]); heads],
            },
            ln_gain: vec![Tensor::full(&[1, dh], 1.0); heads],
            ln_bias: vec![Tensor::zeros(&[1, dh]); heads],
        })
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn heads(&self) -> usize {
        self.proj.theta_q.len()
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        let c = |v: &Vec<Tensor<T>>| v.iter().map(Tensor::cast).collect();
        BlockParams {
            proj: ProjectionSet {
                theta_q: c(&self.proj.theta_q),
                theta_k: c(&self.proj.theta_k),
                theta_v: c(&self.proj.theta_v),
                theta_o: self.proj.theta_o.cast(),
            },
            state0: TttState {
                w: c(&self.state0.w),
                bias: c(&self.state0.bias),
            },
            ln_gain: c(&self.ln_gain),
            ln_bias: c(&self.ln_bias),
        }
    }
}
