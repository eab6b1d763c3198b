//! The production block: sigmoid-derivative inner update with rotary
//! positions, causal masking, per-head layer norm and optional corrections.

use crate::gcn::CorrectionBundle;
use crate::numerics::{matmul_nt, rope_columns, Graph, NodeId, NumericsError, Scalar, Tensor};
use crate::{Error, Result};

use super::{BlockParams, TttConfig, TttState, LAYERNORM_EPS, ROPE_BASE};

/// Stabiliser of the moment-matching renormalisation.
pub const RENORM_EPS: f64 = 1e-6;

/// Query, key and value projections of one head, tokens as columns (dh×n).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs<T: Scalar = f32> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// `X_i = θ_i Hᵀ` for every head and i ∈ {q, k, v}.
pub fn project<T: Scalar>(h: &Tensor<T>, params: &BlockParams<T>) -> Result<Vec<HeadInputs<T>>> {
    let p = &params.proj;
    (0..params.heads())
        .map(|i| {
            Ok(HeadInputs {
                q: matmul_nt(&p.theta_q[i], h)?,
                k: matmul_nt(&p.theta_k[i], h)?,
                v: matmul_nt(&p.theta_v[i], h)?,
            })
        })
        .collect()
}

/// Rotary encoding of a dh×n block at positions `0..n`.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, n) = x.dims2()?;
    if d % 2 != 0 {
        return Err(Error::config(format!("rotary encoding needs an even head dim, got {d}")));
    }
    let positions: Vec<usize> = (0..n).collect();
    Ok(rope_columns(x, &positions, ROPE_BASE, false)?)
}

/// Keep-pattern of an n×n causal mask (row = source s, column = target t, kept iff s ≤ t).
pub fn causal_keep(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i / n <= i % n).collect()
}

/// Keep-pattern that is causal inside each `[start, end)` block and zero across blocks.
pub fn block_causal_keep(n: usize, spans: &[(usize, usize)]) -> Vec<bool> {
    let mut block_of = vec![0; n];
    for (j, &(s, e)) in spans.iter().enumerate() {
        block_of[s..e].iter_mut().for_each(|b| *b = j);
    }
    (0..n * n)
        .map(|i| {
            let (s, t) = (i / n, i % n);
            s <= t && block_of[s] == block_of[t]
        })
        .collect()
}

/// Zeroes entries with source index above target index.
pub fn causal_mask<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(NumericsError::Shape(format!("causal mask of a non-square {r}x{c} matrix")).into());
    }
    let mut out = a.clone();
    for (x, keep) in out.data_mut().iter_mut().zip(causal_keep(r)) {
        if !keep {
            *x = T::zero();
        }
    }
    Ok(out)
}

/// Graph handles of the block parameters.
#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub theta_q: Vec<NodeId>,
    pub theta_k: Vec<NodeId>,
    pub theta_v: Vec<NodeId>,
    pub theta_o: NodeId,
    pub w0: Vec<NodeId>,
    pub b0: Vec<NodeId>,
    pub ln_gain: Vec<NodeId>,
    pub ln_bias: Vec<NodeId>,
}

impl BlockNodes {
    /// Inserts the parameters as leaves; `trainable` selects param or constant leaves.
    pub fn insert<T: Scalar>(g: &mut Graph<T>, params: &BlockParams<T>, trainable: bool) -> Result<Self> {
        fn leaf<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> crate::numerics::Result<NodeId> {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        }
        let many = |g: &mut Graph<T>, v: &[Tensor<T>]| -> Result<Vec<NodeId>> {
            v.iter().map(|t| Ok(leaf(g, t, trainable)?)).collect()
        };
        Ok(Self {
            theta_q: many(g, &params.proj.theta_q)?,
            theta_k: many(g, &params.proj.theta_k)?,
            theta_v: many(g, &params.proj.theta_v)?,
            w0: many(g, &params.state0.w)?,
            b0: many(g, &params.state0.bias)?,
            ln_gain: many(g, &params.ln_gain)?,
            ln_bias: many(g, &params.ln_bias)?,
            theta_o: leaf(g, &params.proj.theta_o, trainable)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.theta_q.len()
    }
}

/// Graph handles of one correction: per-head raw `K_attn` (n×n) and `K_b` (dh×n), plus the 1×1 fusion scalars.
#[derive(Clone, Debug)]
pub struct CorrectionNodes {
    pub k_attn: Vec<NodeId>,
    pub k_b: Vec<NodeId>,
    pub p: NodeId,
    pub q: NodeId,
}

impl CorrectionNodes {
    pub fn constants<T: Scalar>(g: &mut Graph<T>, bundle: &CorrectionBundle) -> Result<Self> {
        let mut consts = |v: &[Tensor<f32>]| -> Result<Vec<NodeId>> {
            v.iter().map(|t| Ok(g.constant(t.cast())?)).collect()
        };
        let k_attn = consts(&bundle.k_attn)?;
        let k_b = consts(&bundle.k_b)?;
        Ok(Self {
            k_attn,
            k_b,
            p: g.constant(Tensor::scalar(T::lit(bundle.p as f64)))?,
            q: g.constant(Tensor::scalar(T::lit(bundle.q as f64)))?,
        })
    }
}

/// `mask(attn + P · renormalize(K, attn))`.
pub fn fuse_attention<T: Scalar>(g: &mut Graph<T>, attn: NodeId, k: NodeId, p: NodeId, keep: &[bool]) -> Result<NodeId> {
    let r = g.renormalize(k, attn, RENORM_EPS)?;
    let scaled = g.scale_by(r, p)?;
    let sum = g.add(attn, scaled)?;
    Ok(g.mask(sum, keep)?)
}

/// `bias + Q · renormalize(K, bias)`.
pub fn fuse_bias<T: Scalar>(g: &mut Graph<T>, bias: NodeId, k: NodeId, q: NodeId) -> Result<NodeId> {
    let r = g.renormalize(k, bias, RENORM_EPS)?;
    let scaled = g.scale_by(r, q)?;
    Ok(g.add(bias, scaled)?)
}

/// Which token rows the output projection is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputRows {
    All,
    Last,
}

/// Graph handles produced by [`block_graph`].
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Projected output, n×D or 1×D for [`OutputRows::Last`].
    pub output: NodeId,
    /// Pre-norm outputs per head (dh×n).
    pub z: Vec<NodeId>,
    /// Masked (and fused) key-query Gram matrices per head (n×n).
    pub attn: Vec<NodeId>,
    /// Causally accumulated (and fused) bias per head (dh×n).
    pub bias: Vec<NodeId>,
    /// Fast weights after the last mini-batch per head.
    pub w_out: Vec<NodeId>,
}

/// Records the block on `g` for input `h` (n×D).
pub fn block_graph<T: Scalar>(
    g: &mut Graph<T>,
    h: NodeId,
    nodes: &BlockNodes,
    cfg: &TttConfig,
    correction: Option<&CorrectionNodes>,
    rows: OutputRows,
) -> Result<BlockOutput> {
    let (n, _) = g.value(h).dims2()?;
    let heads = nodes.heads();
    if let Some(c) = correction {
        if c.k_attn.len() != heads || c.k_b.len() != heads {
            return Err(Error::contract(format!(
                "correction carries {} / {} heads, block has {heads}",
                c.k_attn.len(),
                c.k_b.len()
            )));
        }
        for i in 0..heads {
            let dh = g.value(nodes.w0[i]).rows();
            if g.value(c.k_attn[i]).shape() != [n, n] || g.value(c.k_b[i]).shape() != [dh, n] {
                return Err(Error::contract(format!("correction shapes do not match n={n}, dh={dh}")));
            }
        }
    }
    let positions: Vec<usize> = (0..n).collect();
    let spans = cfg.blocks(n);
    let single = spans.len() == 1;
    let keep_full = if single { causal_keep(n) } else { block_causal_keep(n, &spans) };
    let mut out = BlockOutput {
        output: h,
        z: Vec::with_capacity(heads),
        attn: Vec::with_capacity(heads),
        bias: Vec::with_capacity(heads),
        w_out: Vec::with_capacity(heads),
    };
    let mut normed = Vec::with_capacity(heads);
    for hd in 0..heads {
        let dh = g.value(nodes.w0[hd]).rows();
        let xq = g.matmul_nt(nodes.theta_q[hd], h)?;
        let xk = g.matmul_nt(nodes.theta_k[hd], h)?;
        let xv = g.matmul_nt(nodes.theta_v[hd], h)?;
        let xq = g.rope(xq, &positions, ROPE_BASE)?;
        let xk = g.rope(xk, &positions, ROPE_BASE)?;

        let mut w = nodes.w0[hd];
        let mut grads = Vec::with_capacity(spans.len());
        let mut reads = Vec::with_capacity(spans.len());
        let mut attns = Vec::with_capacity(spans.len());
        for &(s, e) in &spans {
            let (q, k, v) = if single {
                (xq, xk, xv)
            } else {
                (g.slice(xq, 0, dh, s, e)?, g.slice(xk, 0, dh, s, e)?, g.slice(xv, 0, dh, s, e)?)
            };
            let pred = g.matmul(w, k)?;
            let resid = g.sub(pred, v)?;
            let grad = g.sigmoid_deriv(resid)?;
            let kt = g.transpose(k)?;
            let gram = g.matmul(kt, q)?;
            let attn = g.mask(gram, &causal_keep(e - s))?;
            reads.push(g.matmul(w, q)?);
            let step = g.matmul_nt(grad, k)?;
            w = g.sub(w, step)?;
            grads.push(grad);
            attns.push(attn);
        }
        out.w_out.push(w);

        let grad_all = if single { grads[0] } else { g.concat_cols(&grads)? };
        let cum = g.cumsum_cols(grad_all)?;
        let neg = g.scale(cum, -1.0)?;
        let mut bias = g.add_col(neg, nodes.b0[hd])?;
        let mut attn_full = if single { attns[0] } else { g.block_diag(&attns)? };
        if let Some(c) = correction {
            bias = fuse_bias(g, bias, c.k_b[hd], c.q)?;
            attn_full = fuse_attention(g, attn_full, c.k_attn[hd], c.p, &keep_full)?;
            attns = if single {
                vec![attn_full]
            } else {
                spans
                    .iter()
                    .map(|&(s, e)| g.slice(attn_full, s, e, s, e))
                    .collect::<crate::numerics::Result<_>>()?
            };
        }

        let mut parts = Vec::with_capacity(spans.len());
        for ((&grad, &read), &attn) in grads.iter().zip(&reads).zip(&attns) {
            let mixed = g.matmul(grad, attn)?;
            parts.push(g.sub(read, mixed)?);
        }
        let zcat = if single { parts[0] } else { g.concat_cols(&parts)? };
        let z = g.add(zcat, bias)?;
        out.z.push(z);
        out.attn.push(attn_full);
        out.bias.push(bias);

        let mut zt = g.transpose(z)?;
        if rows == OutputRows::Last {
            zt = g.slice(zt, n - 1, n, 0, dh)?;
        }
        normed.push(g.layernorm(zt, nodes.ln_gain[hd], nodes.ln_bias[hd], LAYERNORM_EPS)?);
    }
    let normed = if heads == 1 { normed[0] } else { g.concat_cols(&normed)? };
    out.output = g.matmul_nt(normed, nodes.theta_o)?;
    Ok(out)
}

/// Per-head quantities of one block evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace<T: Scalar = f32> {
    pub attn: Vec<Tensor<T>>,
    pub bias_path: Vec<Tensor<T>>,
    /// Pre-norm outputs with heads concatenated (n×D).
    pub z: Tensor<T>,
    pub w_out: TttState<T>,
}

/// Evaluates the block on a plain input `h` (n×D), returning the projected output (n×D) and its trace.
pub fn block_forward<T: Scalar>(
    h: &Tensor<T>,
    params: &BlockParams<T>,
    cfg: &TttConfig,
    correction: Option<&CorrectionBundle>,
) -> Result<(Tensor<T>, BlockTrace<T>)> {
    if h.rows() == 0 {
        return Err(Error::contract("block input must contain at least one token"));
    }
    let mut g = Graph::new();
    let nodes = BlockNodes::insert(&mut g, params, false)?;
    let hid = g.constant(h.clone())?;
    let corr = correction.map(|c| CorrectionNodes::constants(&mut g, c)).transpose()?;
    let out = block_graph(&mut g, hid, &nodes, cfg, corr.as_ref(), OutputRows::All)?;
    let zt: Vec<Tensor<T>> = out
        .z
        .iter()
        .map(|&z| g.value(z).transpose())
        .collect::<crate::numerics::Result<_>>()?;
    let trace = BlockTrace {
        attn: out.attn.iter().map(|&a| g.value(a).clone()).collect(),
        bias_path: out.bias.iter().map(|&b| g.value(b).clone()).collect(),
        z: Tensor::concat_cols(&zt.iter().collect::<Vec<_>>())?,
        w_out: TttState {
            w: out.w_out.iter().map(|&w| g.value(w).clone()).collect(),
            bias: (0..params.heads())
                .map(|i| {
                    let b = g.value(out.bias[i]);
                    b.slice2d(0, b.rows(), b.cols() - 1, b.cols())
                })
                .collect::<crate::numerics::Result<_>>()?,
        },
    };
    Ok((g.value(out.output).clone(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_convention() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(causal_mask(&a).unwrap(), Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 4.0]]));
        let eye = Tensor::<f64>::eye(4);
        assert_eq!(causal_mask(&eye).unwrap(), eye);
        let ones = causal_mask(&Tensor::<f64>::full(&[3, 3], 1.0)).unwrap();
        let col_sums: Vec<f64> = (0..3).map(|t| ones.column(t).iter().sum()).collect();
        assert_eq!(col_sums, vec![1.0, 2.0, 3.0]);
        assert!(causal_mask(&Tensor::<f64>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn rope_fixtures() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let r = rope_apply(&x).unwrap();
        assert_eq!(r.column(0), vec![1.0, 0.0]);
        assert!((r.at(0, 1) - 1f64.cos()).abs() < 1e-15);
        assert!((r.at(1, 1) - 1f64.sin()).abs() < 1e-15);
        assert!(matches!(rope_apply(&Tensor::<f64>::zeros(&[3, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn block_causal_keep_is_block_diagonal() {
        let keep = block_causal_keep(4, &[(0, 2), (2, 4)]);
        let expect = [
            true, true, false, false, //
            false, true, false, false, //
            false, false, true, true, //
            false, false, false, true,
        ];
        assert_eq!(keep, expect);
    }
}
