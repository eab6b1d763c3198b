//! Tape-free block evaluation that keeps only the fast-weight state between
//! mini-batches and tracks the bytes of every tensor it holds.
//!
//! It performs the same floating-point operations in the same order as
//! [`super::block::block_graph`] without corrections, so both paths agree bit for bit.

use crate::numerics::{layernorm, matmul, matmul_nt, rope_columns, sigmoid, Tensor};
use crate::{Error, Result};

use super::{BlockParams, LAYERNORM_EPS, ROPE_BASE};

const F32_BYTES: usize = std::mem::size_of::<f32>();

/// Current and high-water byte counts of live tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LiveBytes {
    current: usize,
    peak: usize,
}

impl LiveBytes {
    fn alloc(&mut self, t: &Tensor<f32>) {
        self.current += t.len() * F32_BYTES;
        self.peak = self.peak.max(self.current);
    }

    fn free(&mut self, t: &Tensor<f32>) {
        self.current -= t.len() * F32_BYTES;
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Evaluates the block over a sequence in mini-batches of `mini_batch` tokens.
/// A mini-batch size of one is the purely sequential strategy.
pub struct StreamingKernel<'a> {
    params: &'a BlockParams<f32>,
    mini_batch: usize,
    w: Vec<Tensor<f32>>,
    grad_sum: Vec<Tensor<f32>>,
    position: usize,
    memory: LiveBytes,
}

impl<'a> StreamingKernel<'a> {
    pub fn new(params: &'a BlockParams<f32>, mini_batch: usize) -> Result<Self> {
        if mini_batch == 0 {
            return Err(Error::config("mini-batch size must be positive"));
        }
        let mut kernel = Self {
            params,
            mini_batch,
            w: Vec::new(),
            grad_sum: Vec::new(),
            position: 0,
            memory: LiveBytes::default(),
        };
        kernel.reset();
        Ok(kernel)
    }

    /// Restores the initial fast weights and forgets all tokens.
    pub fn reset(&mut self) {
        for t in self.w.iter().chain(&self.grad_sum) {
            self.memory.free(t);
        }
        self.w = self.params.state0.w.clone();
        self.grad_sum = self
            .params
            .state0
            .bias
            .iter()
            .map(|b| Tensor::zeros(b.shape()))
            .collect();
        for t in self.w.iter().chain(&self.grad_sum) {
            self.memory.alloc(t);
        }
        self.position = 0;
    }

    pub fn memory(&self) -> LiveBytes {
        self.memory
    }

    pub fn mini_batch(&self) -> usize {
        self.mini_batch
    }

    /// Consumes one mini-batch of input rows (l×D, l ≤ mini-batch) and
    /// returns their pre-norm outputs (l×D).
    pub fn push_block(&mut self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (l, d) = h.dims2()?;
        if l == 0 || l > self.mini_batch {
            return Err(Error::contract(format!(
                "block of {l} tokens for mini-batch size {}",
                self.mini_batch
            )));
        }
        let positions: Vec<usize> = (self.position..self.position + l).collect();
        let keep: Vec<bool> = (0..l * l).map(|i| i / l <= i % l).collect();
        let proj = &self.params.proj;
        self.memory.alloc(h);
        let mut out = Tensor::zeros(&[l, d]);
        self.memory.alloc(&out);
        let mut col0 = 0;
        for hd in 0..self.params.heads() {
            let dh = self.w[hd].rows();
            let mut live = Vec::with_capacity(8);
            let q = rope_columns(&matmul_nt(&proj.theta_q[hd], h)?, &positions, ROPE_BASE, false)?;
            let k = rope_columns(&matmul_nt(&proj.theta_k[hd], h)?, &positions, ROPE_BASE, false)?;
            let v = matmul_nt(&proj.theta_v[hd], h)?;
            for t in [&q, &k, &v] {
                self.memory.alloc(t);
            }

            let mut grad = matmul(&self.w[hd], &k)?;
            self.memory.alloc(&grad);
            for (x, &y) in grad.data_mut().iter_mut().zip(v.data()) {
                let r = *x - y;
                let s = sigmoid(r);
                *x = s * (1.0 - s);
            }
            let mut gram = matmul(&k.transpose()?, &q)?;
            self.memory.alloc(&gram);
            for (x, &kp) in gram.data_mut().iter_mut().zip(&keep) {
                if !kp {
                    *x = 0.0;
                }
            }
            let mut z = matmul(&self.w[hd], &q)?;
            self.memory.alloc(&z);
            let step = matmul_nt(&grad, &k)?;
            self.memory.alloc(&step);
            self.w[hd] = self.w[hd].sub(&step)?;
            let mixed = matmul(&grad, &gram)?;
            self.memory.alloc(&mixed);
            for (x, &m) in z.data_mut().iter_mut().zip(mixed.data()) {
                *x -= m;
            }

            let b0 = self.params.state0.bias[hd].data();
            let acc = self.grad_sum[hd].data_mut();
            for t in 0..l {
                for i in 0..dh {
                    acc[i] += grad.at(i, t);
                    let bias = -acc[i] + b0[i];
                    out.set(t, col0 + i, z.at(i, t) + bias);
                }
            }
            live.extend([q, k, v, grad, gram, z, step, mixed]);
            for t in &live {
                self.memory.free(t);
            }
            col0 += dh;
        }
        self.memory.free(h);
        self.memory.free(&out);
        self.position += l;
        Ok(out)
    }

    /// Runs a whole sequence (n×D) from the initial state and returns the
    /// projected output of its final token (1×D).
    pub fn forward_last(&mut self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, d) = h.dims2()?;
        if n == 0 {
            return Err(Error::contract("sequence must contain at least one token"));
        }
        self.reset();
        let mut last = Tensor::zeros(&[1, d]);
        for s in (0..n).step_by(self.mini_batch) {
            let e = (s + self.mini_batch).min(n);
            let z = self.push_block(&h.slice2d(s, e, 0, d)?)?;
            if e == n {
                last = z.slice2d(e - s - 1, e - s, 0, d)?;
            }
        }
        let mut parts = Vec::with_capacity(self.params.heads());
        let mut col0 = 0;
        for hd in 0..self.params.heads() {
            let dh = self.w[hd].rows();
            let zh = last.slice2d(0, 1, col0, col0 + dh)?;
            parts.push(layernorm(
                &zh,
                &self.params.ln_gain[hd],
                &self.params.ln_bias[hd],
                LAYERNORM_EPS as f32,
            )?);
            col0 += dh;
        }
        let normed = if parts.len() == 1 {
            parts.pop().unwrap_or_else(|| Tensor::zeros(&[1, d]))
        } else {
            Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())?
        };
        Ok(matmul_nt(&normed, &self.params.proj.theta_o)?)
    }
}
