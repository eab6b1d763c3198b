//! Cloud-side correction network.
//!
//! Two three-layer ReLU MLPs read the flattened hidden state uploaded by the
//! device and predict raw corrections for the attention-like Gram matrices
//! and the accumulated bias of every head. The device rescales them to the
//! moments of its own quantities and mixes them in with the scalars `P`, `Q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{matmul, Bindings, Graph, NodeId, ParamStore, Tensor};
use crate::ttt::{causal_keep, BlockTrace, CorrectionNodes, RENORM_EPS};
use crate::{Error, Result};

pub const PARAM_PREFIX: &str = "gcn.";
pub const FUSION_INIT: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl GcnConfig {
    pub fn input_len(&self) -> usize {
        self.seq_len * self.model_dim
    }

    pub fn attn_len(&self) -> usize {
        self.heads * self.seq_len * self.seq_len
    }

    pub fn bias_len(&self) -> usize {
        self.seq_len * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Floats in one correction payload.
    pub fn payload_len(&self) -> usize {
        self.attn_len() + self.bias_len()
    }
}

/// Decoded corrections for one sequence plus the fusion scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionBundle {
    /// Per-head n×n.
    pub k_attn: Vec<Tensor<f32>>,
    /// Per-head dh×n.
    pub k_b: Vec<Tensor<f32>>,
    pub p: f32,
    pub q: f32,
}

impl CorrectionBundle {
    /// All-zero corrections with zero fusion weights.
    pub fn neutral(cfg: &GcnConfig) -> Self {
        let (n, dh) = (cfg.seq_len, cfg.head_dim());
        Self {
            k_attn: vec![Tensor::zeros(&[n, n]); cfg.heads],
            k_b: vec![Tensor::zeros(&[dh, n]); cfg.heads],
            p: 0.0,
            q: 0.0,
        }
    }

    /// Splits a flat payload (all `K_attn` heads, then all `K_b` heads, each row-major).
    pub fn from_flat(cfg: &GcnConfig, payload: &[f32], p: f32, q: f32) -> Result<Self> {
        if payload.len() != cfg.payload_len() {
            return Err(Error::protocol(format!(
                "correction payload has {} floats, expected {}",
                payload.len(),
                cfg.payload_len()
            )));
        }
        let (n, dh) = (cfg.seq_len, cfg.head_dim());
        let (attn, bias) = payload.split_at(cfg.attn_len());
        let k_attn = attn
            .chunks(n * n)
            .map(|c| Tensor::new(vec![n, n], c.to_vec()))
            .collect::<crate::numerics::Result<_>>()?;
        let k_b = bias
            .chunks(dh * n)
            .map(|c| Tensor::new(vec![dh, n], c.to_vec()))
            .collect::<crate::numerics::Result<_>>()?;
        let bundle = Self { k_attn, k_b, p, q };
        bundle.ensure_finite()?;
        Ok(bundle)
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.k_attn
            .iter()
            .chain(&self.k_b)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for t in self.k_attn.iter().chain(&self.k_b) {
            t.ensure_finite("correction")?;
        }
        if !self.p.is_finite() || !self.q.is_finite() {
            return Err(Error::protocol("non-finite fusion scalar"));
        }
        Ok(())
    }
}

/// The two correction MLPs and the fusion scalars, stored under the `gcn.` prefix.
#[derive(Clone, Debug)]
pub struct GcnModel {
    pub config: GcnConfig,
    pub params: ParamStore<f32>,
}

const BRANCHES: [&str; 2] = ["attn", "bias"];

fn layer_name(branch: &str, layer: usize, part: &str) -> String {
    format!("{PARAM_PREFIX}{branch}.l{layer}.{part}")
}

impl GcnModel {
    /// Hidden layers use uniform fan-in initialisation; the output layers start at zero.
    pub fn new(config: GcnConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || !config.model_dim.is_multiple_of(config.heads) || config.hidden == 0 || config.seq_len == 0 {
            return Err(Error::config(format!("invalid correction network shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (branch, out) in BRANCHES.iter().zip([config.attn_len(), config.bias_len()]) {
            let dims = [config.input_len(), config.hidden, config.hidden, out];
            for layer in 0..3 {
                let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
                let w = if layer == 2 {
                    Tensor::zeros(&[fan_in, fan_out])
                } else {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
                };
                params.insert(layer_name(branch, layer, "w"), w);
                params.insert(layer_name(branch, layer, "b"), Tensor::zeros(&[1, fan_out]));
            }
        }
        params.insert(format!("{PARAM_PREFIX}p"), Tensor::scalar(FUSION_INIT));
        params.insert(format!("{PARAM_PREFIX}q"), Tensor::scalar(FUSION_INIT));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, inferring the hidden width.
    pub fn from_params(seq_len: usize, model_dim: usize, heads: usize, params: ParamStore<f32>) -> Result<Self> {
        let hidden = params
            .value(&layer_name("attn", 0, "w"))
            .map_err(|_| Error::data("checkpoint lacks correction network weights"))?
            .cols();
        let config = GcnConfig {
            seq_len,
            model_dim,
            heads,
            hidden,
        };
        let reference = Self::new(config, 0)?;
        for p in reference.params.iter() {
            let got = params
                .value(&p.id)
                .map_err(|_| Error::data(format!("checkpoint lacks `{}`", p.id)))?;
            if got.shape() != p.value.shape() {
                return Err(Error::data(format!("`{}` has shape {:?}", p.id, got.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn fusion_scalars(&self) -> (f32, f32) {
        let get = |k: &str| {
            self.params
                .value(&format!("{PARAM_PREFIX}{k}"))
                .map(|t| t.data()[0])
                .unwrap_or(0.0)
        };
        (get("p"), get("q"))
    }

    pub fn set_fusion_scalars(&mut self, p: f32, q: f32) -> Result<()> {
        *self.params.value_mut(&format!("{PARAM_PREFIX}p"))? = Tensor::scalar(p);
        *self.params.value_mut(&format!("{PARAM_PREFIX}q"))? = Tensor::scalar(q);
        Ok(())
    }

    fn check_input(&self, h: &Tensor<f32>) -> Result<()> {
        if h.shape() != [self.config.seq_len, self.config.model_dim] {
            return Err(Error::protocol(format!(
                "hidden state shape {:?}, expected [{}, {}]",
                h.shape(),
                self.config.seq_len,
                self.config.model_dim
            )));
        }
        Ok(())
    }

    fn mlp(&self, branch: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut x = x.clone();
        for layer in 0..3 {
            let w = self.params.value(&layer_name(branch, layer, "w"))?;
            let b = self.params.value(&layer_name(branch, layer, "b"))?;
            x = matmul(&x, w)?;
            for (v, &bb) in x.data_mut().iter_mut().zip(b.data()) {
                *v += bb;
            }
            if layer < 2 {
                x = x.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        x.ensure_finite("correction network")?;
        Ok(x)
    }

    /// Raw flat corrections for one hidden state (n×D): `K_attn` heads then `K_b` heads.
    pub fn correct_flat(&self, h: &Tensor<f32>) -> Result<Vec<f32>> {
        self.check_input(h)?;
        let x = h.clone().reshape(&[1, self.config.input_len()])?;
        let mut out = self.mlp("attn", &x)?.into_data();
        out.extend(self.mlp("bias", &x)?.into_data());
        Ok(out)
    }

    /// Raw per-head corrections `(K_attn, K_b)` for one hidden state.
    pub fn correct(&self, h: &Tensor<f32>) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let flat = self.correct_flat(h)?;
        let b = CorrectionBundle::from_flat(&self.config, &flat, 0.0, 0.0)?;
        Ok((b.k_attn, b.k_b))
    }

    /// Corrections for one hidden state packaged with this model's fusion scalars.
    pub fn bundle(&self, h: &Tensor<f32>) -> Result<CorrectionBundle> {
        let (p, q) = self.fusion_scalars();
        CorrectionBundle::from_flat(&self.config, &self.correct_flat(h)?, p, q)
    }

    /// Records both MLPs on `g` for a batch of flattened hidden states
    /// (`rows`×nD) and returns per-row correction handles.
    pub fn graph<T: crate::numerics::Scalar>(
        &self,
        g: &mut Graph<T>,
        bindings: &Bindings,
        h_rows: NodeId,
    ) -> Result<Vec<CorrectionNodes>> {
        let (rows, width) = g.value(h_rows).dims2()?;
        if width != self.config.input_len() {
            return Err(Error::protocol(format!(
                "flattened hidden state has {width} values, expected {}",
                self.config.input_len()
            )));
        }
        let mut outs = Vec::with_capacity(2);
        for branch in BRANCHES {
            let mut x = h_rows;
            for layer in 0..3 {
                x = g.matmul(x, bindings.id(&layer_name(branch, layer, "w")))?;
                x = g.add_row(x, bindings.id(&layer_name(branch, layer, "b")))?;
                if layer < 2 {
                    x = g.relu(x)?;
                }
            }
            outs.push(x);
        }
        let (n, dh, heads) = (self.config.seq_len, self.config.head_dim(), self.config.heads);
        let p = bindings.id(&format!("{PARAM_PREFIX}p"));
        let q = bindings.id(&format!("{PARAM_PREFIX}q"));
        let mut result = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut k_attn = Vec::with_capacity(heads);
            let mut k_b = Vec::with_capacity(heads);
            for hd in 0..heads {
                let a = g.slice(outs[0], r, r + 1, hd * n * n, (hd + 1) * n * n)?;
                k_attn.push(g.reshape(a, &[n, n])?);
                let b = g.slice(outs[1], r, r + 1, hd * dh * n, (hd + 1) * dh * n)?;
                k_b.push(g.reshape(b, &[dh, n])?);
            }
            result.push(CorrectionNodes { k_attn, k_b, p, q });
        }
        Ok(result)
    }
}

/// Rescales `k` to the mean and population standard deviation of `target`.
pub fn renormalize(k: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let kn = g.constant(k.clone())?;
    let tn = g.constant(target.clone())?;
    let r = g.renormalize(kn, tn, RENORM_EPS)?;
    Ok(g.value(r).clone())
}

/// Applies a correction to a block trace: `attn ← mask(attn + P·K′_attn)`, `bias ← bias + Q·K′_b`.
pub fn fuse(trace: &BlockTrace<f32>, bundle: &CorrectionBundle) -> Result<BlockTrace<f32>> {
    let heads = trace.attn.len();
    if bundle.k_attn.len() != heads || bundle.k_b.len() != heads {
        return Err(Error::contract("correction and trace disagree on head count"));
    }
    let mut out = trace.clone();
    for hd in 0..heads {
        let attn = &trace.attn[hd];
        let bias = &trace.bias_path[hd];
        if bundle.k_attn[hd].shape() != attn.shape() || bundle.k_b[hd].shape() != bias.shape() {
            return Err(Error::contract("correction shapes do not match the trace"));
        }
        let mut g = Graph::new();
        let a = g.constant(attn.clone())?;
        let ka = g.constant(bundle.k_attn[hd].clone())?;
        let p = g.constant(Tensor::scalar(bundle.p))?;
        let b = g.constant(bias.clone())?;
        let kb = g.constant(bundle.k_b[hd].clone())?;
        let q = g.constant(Tensor::scalar(bundle.q))?;
        let fa = crate::ttt::fuse_attention(&mut g, a, ka, p, &causal_keep(attn.rows()))?;
        let fb = crate::ttt::fuse_bias(&mut g, b, kb, q)?;
        out.attn[hd] = g.value(fa).clone();
        out.bias_path[hd] = g.value(fb).clone();
    }
    Ok(out)
}
