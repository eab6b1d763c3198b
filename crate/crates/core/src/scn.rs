//! On-device model: embedding, RMS normalisation, one test-time-training
//! block and a tied-embedding prediction head.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gcn::{CorrectionBundle, GcnModel, PARAM_PREFIX};
use crate::numerics::{matmul_nt, rmsnorm, softmax, Bindings, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::ttt::{block_graph, BlockNodes, BlockParams, CorrectionNodes, OutputRows, ProjectionSet, StreamingKernel, TttConfig, TttState};
use crate::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;
pub const EMBEDDING: &str = "embedding";
const IN_GAIN: &str = "rms_in.gain";
const OUT_GAIN: &str = "rms_out.gain";
const THETA_O: &str = "ttt.theta_o";
const HEAD_PARTS: [&str; 7] = ["theta_q", "theta_k", "theta_v", "w0", "b0", "ln_gain", "ln_bias"];

fn head_param(head: usize, part: &str) -> String {
    format!("ttt.h{head}.{part}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScnConfig {
    /// Number of item ids including the padding id 0.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub mini_batch: usize,
}

impl ScnConfig {
    pub fn ttt(&self) -> TttConfig {
        TttConfig::new(self.model_dim, self.heads, self.mini_batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocabulary needs the padding id and at least one item"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        self.ttt().validate(self.seq_len)
    }
}

#[derive(Clone, Debug)]
pub struct ScnModel {
    pub config: ScnConfig,
    pub params: ParamStore<f32>,
}

/// Graph handles of the device model's parameters.
#[derive(Clone, Debug)]
pub struct ScnNodes {
    pub embedding: NodeId,
    pub in_gain: NodeId,
    pub out_gain: NodeId,
    pub block: BlockNodes,
}

impl ScnModel {
    /// Embeddings ~ N(0, 0.02²) with a zero padding row; block parameters per [`BlockParams::init`].
    pub fn new(config: ScnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, 0.02).map_err(|e| Error::config(e.to_string()))?;
        let d = config.model_dim;
        let mut e = Tensor::from_fn(config.vocab_size, d, |_, _| dist.sample(&mut rng));
        e.row_mut(0).fill(0.0);
        let block = BlockParams::init(&config.ttt(), &mut rng)?;
        let mut params = ParamStore::new();
        params.insert(EMBEDDING, e);
        params.insert(IN_GAIN, Tensor::full(&[1, d], 1.0));
        params.insert(OUT_GAIN, Tensor::full(&[1, d], 1.0));
        let mut model = Self { config, params };
        model.set_block_params(&block)?;
        Ok(model)
    }

    /// Rebuilds a model from stored parameters, checking every expected name and shape.
    pub fn from_params(config: ScnConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for p in reference.params.iter() {
            let got = params
                .value(&p.id)
                .map_err(|_| Error::data(format!("checkpoint lacks `{}`", p.id)))?;
            if got.shape() != p.value.shape() {
                return Err(Error::data(format!("`{}` has shape {:?}, expected {:?}", p.id, got.shape(), p.value.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn block_params(&self) -> Result<BlockParams<f32>> {
        let get = |name: &str| -> Result<Tensor<f32>> { Ok(self.params.value(name)?.clone()) };
        let per_head = |part: &str| -> Result<Vec<Tensor<f32>>> {
            (0..self.config.heads).map(|h| get(&head_param(h, part))).collect()
        };
        Ok(BlockParams {
            proj: ProjectionSet {
                theta_q: per_head("theta_q")?,
                theta_k: per_head("theta_k")?,
                theta_v: per_head("theta_v")?,
                theta_o: get(THETA_O)?,
            },
            state0: TttState {
                w: per_head("w0")?,
                bias: per_head("b0")?,
            },
            ln_gain: per_head("ln_gain")?,
            ln_bias: per_head("ln_bias")?,
        })
    }

    pub fn set_block_params(&mut self, block: &BlockParams<f32>) -> Result<()> {
        for h in 0..self.config.heads {
            let values = [
                &block.proj.theta_q[h],
                &block.proj.theta_k[h],
                &block.proj.theta_v[h],
                &block.state0.w[h],
                &block.state0.bias[h],
                &block.ln_gain[h],
                &block.ln_bias[h],
            ];
            for (part, v) in HEAD_PARTS.iter().zip(values) {
                self.params.insert(head_param(h, part), v.clone());
            }
        }
        self.params.insert(THETA_O, block.proj.theta_o.clone());
        Ok(())
    }

    /// Item embedding table (|V|×D); row 0 is the padding item.
    pub fn embedding(&self) -> &Tensor<f32> {
        self.params.value(EMBEDDING).expect("embedding is always registered")
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::data(format!("item id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_sequence(&self, ids: &[u32]) -> Result<()> {
        if ids.len() != self.config.seq_len {
            return Err(Error::data(format!("sequence of {} ids, expected {}", ids.len(), self.config.seq_len)));
        }
        self.check_ids(ids)
    }

    fn check_candidates(&self, candidates: &[u32]) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::contract("empty candidate set"));
        }
        self.check_ids(candidates)
    }

    fn gather(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        let e = self.embedding();
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(e.row(i as usize));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }

    /// Row-wise RMS-normalised embeddings of a sequence (n×D); this is what the device uploads.
    pub fn embed_normalize(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        self.check_sequence(ids)?;
        let x = self.gather(ids)?;
        Ok(rmsnorm(&x, self.params.value(IN_GAIN)?, RMS_EPS as f32)?)
    }

    pub fn hidden_state(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        self.embed_normalize(ids)
    }

    fn logits_from_output(&self, o_last: &Tensor<f32>, candidates: &[u32]) -> Result<Tensor<f32>> {
        let o = rmsnorm(o_last, self.params.value(OUT_GAIN)?, RMS_EPS as f32)?;
        Ok(matmul_nt(&o, &self.gather(candidates)?)?)
    }

    /// Candidate logits from a hidden state, optionally with a correction fused into the block.
    pub fn logits_from_hidden(
        &self,
        h: &Tensor<f32>,
        candidates: &[u32],
        correction: Option<&CorrectionBundle>,
    ) -> Result<Tensor<f32>> {
        self.check_candidates(candidates)?;
        let mut g = Graph::new();
        let block = BlockNodes::insert(&mut g, &self.block_params()?, false)?;
        let hid = g.constant(h.clone())?;
        let corr = correction.map(|c| CorrectionNodes::constants(&mut g, c)).transpose()?;
        let out = block_graph(&mut g, hid, &block, &self.config.ttt(), corr.as_ref(), OutputRows::Last)?;
        self.logits_from_output(g.value(out.output), candidates)
    }

    /// Softmax scores over `candidates` for the next item after `ids`.
    pub fn forward(&self, ids: &[u32], candidates: &[u32], correction: Option<&CorrectionBundle>) -> Result<Vec<f32>> {
        let h = self.embed_normalize(ids)?;
        let logits = self.logits_from_hidden(&h, candidates, correction)?;
        Ok(softmax(&logits)?.into_data())
    }

    /// Scores for many sequences with the tape-free kernel at mini-batch size `mini_batch`.
    pub fn scorer(&self, mini_batch: usize) -> Result<Scorer<'_>> {
        Ok(Scorer {
            model: self,
            block: self.block_params()?,
            mini_batch,
        })
    }

    /// Scores over every real item (ids `1..|V|`), for full-catalogue serving.
    pub fn score_all(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let all: Vec<u32> = (1..self.config.vocab_size as u32).collect();
        self.forward(ids, &all, None)
    }

    pub fn nodes(&self, bindings: &Bindings) -> ScnNodes {
        let per_head = |part: &str| (0..self.config.heads).map(|h| bindings.id(&head_param(h, part))).collect();
        ScnNodes {
            embedding: bindings.id(EMBEDDING),
            in_gain: bindings.id(IN_GAIN),
            out_gain: bindings.id(OUT_GAIN),
            block: BlockNodes {
                theta_q: per_head("theta_q"),
                theta_k: per_head("theta_k"),
                theta_v: per_head("theta_v"),
                theta_o: bindings.id(THETA_O),
                w0: per_head("w0"),
                b0: per_head("b0"),
                ln_gain: per_head("ln_gain"),
                ln_bias: per_head("ln_bias"),
            },
        }
    }

    /// Records `H = RMSNorm(E[ids])` (n×D).
    pub fn hidden_graph<T: Scalar>(&self, g: &mut Graph<T>, nodes: &ScnNodes, ids: &[u32]) -> Result<NodeId> {
        self.check_sequence(ids)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather(nodes.embedding, &idx)?;
        Ok(g.rmsnorm(x, nodes.in_gain, RMS_EPS)?)
    }

    /// Records candidate logits (1×C) from a hidden-state node.
    pub fn logits_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        nodes: &ScnNodes,
        h: NodeId,
        candidates: &[u32],
        correction: Option<&CorrectionNodes>,
    ) -> Result<NodeId> {
        self.check_candidates(candidates)?;
        let out = block_graph(g, h, &nodes.block, &self.config.ttt(), correction, OutputRows::Last)?;
        let o = g.rmsnorm(out.output, nodes.out_gain, RMS_EPS)?;
        let idx: Vec<usize> = candidates.iter().map(|&i| i as usize).collect();
        let cand = g.gather(nodes.embedding, &idx)?;
        Ok(g.matmul_nt(o, cand)?)
    }
}

/// Batch scorer around the tape-free kernel; reuses one copy of the block parameters.
pub struct Scorer<'a> {
    model: &'a ScnModel,
    block: BlockParams<f32>,
    mini_batch: usize,
}

impl Scorer<'_> {
    pub fn logits(&self, ids: &[u32], candidates: &[u32]) -> Result<Tensor<f32>> {
        self.model.check_candidates(candidates)?;
        let h = self.model.embed_normalize(ids)?;
        let mut kernel = StreamingKernel::new(&self.block, self.mini_batch)?;
        let o = kernel.forward_last(&h)?;
        self.model.logits_from_output(&o, candidates)
    }

    pub fn scores(&self, ids: &[u32], candidates: &[u32]) -> Result<Vec<f32>> {
        Ok(softmax(&self.logits(ids, candidates)?)?.into_data())
    }
}

/// Candidate ids ordered by descending score, ties by ascending id, truncated to `k`.
pub fn predict_topk(scores: &[f32], candidates: &[u32], k: usize) -> Result<Vec<u32>> {
    if scores.len() != candidates.len() {
        return Err(Error::contract("one score per candidate required"));
    }
    if k > candidates.len() {
        return Err(Error::contract(format!("top-{k} of {} candidates", candidates.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    Ok(order.into_iter().take(k).map(|i| candidates[i]).collect())
}

const MAGIC: &[u8; 4] = b"CCRC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::data(format!("{v} does not fit the checkpoint header")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises the device model and, optionally, the correction network into one container.
pub fn checkpoint_bytes(scn: &ScnModel, gcn: Option<&GcnModel>) -> Result<Vec<u8>> {
    let c = &scn.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [CHECKPOINT_VERSION as usize, c.model_dim, c.heads, c.vocab_size, c.seq_len, c.mini_batch] {
        put_u32(&mut out, v)?;
    }
    let mut all = scn.params.clone();
    if let Some(g) = gcn {
        all.extend(g.params.clone())?;
    }
    put_u32(&mut out, all.len())?;
    for p in all.iter() {
        put_u32(&mut out, p.id.len())?;
        out.extend_from_slice(p.id.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a container written by [`checkpoint_bytes`].
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(ScnModel, Option<GcnModel>)> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let config = ScnConfig {
        model_dim: cur.u32()?,
        heads: cur.u32()?,
        vocab_size: cur.u32()?,
        seq_len: cur.u32()?,
        mini_batch: cur.u32()?,
    };
    let count = cur.u32()?;
    let mut scn = ParamStore::new();
    let mut gcn = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?
            .to_owned();
        let ndim = cur.u32()?;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel.checked_mul(4).ok_or_else(|| Error::data("oversized blob"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)?;
        if name.starts_with(PARAM_PREFIX) {
            gcn.insert(name, t);
        } else {
            scn.insert(name, t);
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    let scn = ScnModel::from_params(config, scn)?;
    let gcn = if gcn.is_empty() {
        None
    } else {
        Some(GcnModel::from_params(config.seq_len, config.model_dim, config.heads, gcn)?)
    };
    Ok((scn, gcn))
}

pub fn save_checkpoint(path: &Path, scn: &ScnModel, gcn: Option<&GcnModel>) -> Result<()> {
    let bytes = checkpoint_bytes(scn, gcn)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ScnModel, Option<GcnModel>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
