//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks them once in
//! reverse. Each forward kernel checks its output for NaN/Inf and fails the
//! op instead of propagating it.

use super::tensor::{self, Scalar, Tensor};
use super::{NumericsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    Relu(NodeId),
    SigmoidDeriv(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        target: usize,
        probs: Vec<T>,
    },
    Gather {
        src: NodeId,
        ids: Vec<usize>,
    },
    Mask {
        a: NodeId,
        keep: Vec<bool>,
    },
    CumsumCols(NodeId),
    Rope {
        a: NodeId,
        positions: Vec<usize>,
        base: f64,
    },
    Slice {
        a: NodeId,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    BlockDiag(Vec<NodeId>),
    Reshape(NodeId),
    Renormalize {
        k: NodeId,
        target: NodeId,
        stats: RenormStats<T>,
    },
    Sum(NodeId),
}

struct RenormStats<T> {
    normalized: Vec<T>,
    k_std: T,
    denom: T,
    t_mean: T,
    t_std: T,
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// A single-context recording of tensor operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(existing) => existing
            .add_assign(&contrib)
            .expect("gradient shape matches its node"),
        None => *slot = Some(contrib),
    }
}

fn slot_or_zeros<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, shape: &[usize]) -> &'a mut Tensor<T> {
    slot.get_or_insert_with(|| Tensor::zeros(shape))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId], name: &str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_finite("param")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_finite("constant")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v, &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        self.push(Op::MatMulNt(a, b), v, &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        self.push(Op::Transpose(a), v, &[a], "transpose")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let s = T::lit(s);
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v, &[a], "scale")
    }

    /// Multiplies `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::Shape("scale_by expects a 1x1 scalar".into()));
        }
        let k = self.value(s).data()[0];
        let v = self.value(a).scale(k);
        self.push(Op::ScaleBy(a, s), v, &[a, s], "scale_by")
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(row).len() != c {
            return Err(NumericsError::Shape(format!(
                "add_row: {} entries for {c} columns",
                self.value(row).len()
            )));
        }
        let mut v = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&rv) {
                *x = *x + b;
            }
        }
        self.push(Op::AddRow(a, row), v, &[a, row], "add_row")
    }

    /// Adds the vector `col` to every column of `a`.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, _) = self.value(a).dims2()?;
        if self.value(col).len() != r {
            return Err(NumericsError::Shape(format!(
                "add_col: {} entries for {r} rows",
                self.value(col).len()
            )));
        }
        let mut v = self.value(a).clone();
        let cv = self.value(col).data().to_vec();
        for (i, &b) in cv.iter().enumerate() {
            for x in v.row_mut(i) {
                *x = *x + b;
            }
        }
        self.push(Op::AddCol(a, col), v, &[a, col], "add_col")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v, &[a], "relu")
    }

    pub fn sigmoid_deriv(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::sigmoid_deriv(self.value(a));
        self.push(Op::SigmoidDeriv(a), v, &[a], "sigmoid_deriv")
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let eps = T::lit(eps);
        let xv = self.value(x);
        let v = tensor::rmsnorm(xv, self.value(gain), eps)?;
        let d = xv.cols();
        let inv = (0..xv.rows())
            .map(|r| {
                let ms = xv.row(r).iter().fold(T::zero(), |acc, &u| acc + u * u)
                    * T::lit(1.0 / d as f64);
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        self.push(Op::RmsNorm { x, gain, inv }, v, &[x, gain], "rmsnorm")
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let eps = T::lit(eps);
        let xv = self.value(x);
        let v = tensor::layernorm(xv, self.value(gain), self.value(bias), eps)?;
        let d = xv.cols();
        let inv_d = T::lit(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mu = row.iter().fold(T::zero(), |acc, &u| acc + u) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &u| acc + (u - mu) * (u - mu))
                * inv_d;
            let s = T::one() / (var + eps).sqrt();
            inv.push(s);
            xhat.extend(row.iter().map(|&u| (u - mu) * s));
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            v,
            &[x, gain, bias],
            "layernorm",
        )
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax(self.value(a))?;
        self.push(Op::Softmax(a), v, &[a], "softmax")
    }

    /// `−log softmax(logits)[target]` for a single row of logits, as a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.cols() {
            return Err(NumericsError::Contract(format!(
                "cross entropy expects one row of logits and a target below {}",
                lv.cols()
            )));
        }
        let probs = tensor::softmax(lv)?.into_data();
        let max = lv.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = lv
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln()
            + max;
        let loss = lse - lv.data()[target];
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Selects rows of `src` by index.
    pub fn gather(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        let sv = self.value(src);
        let (r, c) = sv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(NumericsError::Shape(format!("gather row {i} of {r}")));
            }
            data.extend_from_slice(sv.row(i));
        }
        let v = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
            v,
            &[src],
            "gather",
        )
    }

    /// Writes `+0.0` wherever `keep` is false.
    pub fn mask(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let av = self.value(a);
        if keep.len() != av.len() {
            return Err(NumericsError::Shape("mask size mismatch".into()));
        }
        let mut v = av.clone();
        for (x, &k) in v.data_mut().iter_mut().zip(keep) {
            if !k {
                *x = T::zero();
            }
        }
        self.push(
            Op::Mask {
                a,
                keep: keep.to_vec(),
            },
            v,
            &[a],
            "mask",
        )
    }

    /// Inclusive running sum along each row: `out[:, t] = Σ_{s ≤ t} a[:, s]`.
    pub fn cumsum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let (r, c) = v.dims2()?;
        for i in 0..r {
            let row = v.row_mut(i);
            let mut acc = T::zero();
            for x in row.iter_mut().take(c) {
                acc = acc + *x;
                *x = acc;
            }
        }
        self.push(Op::CumsumCols(a), v, &[a], "cumsum_cols")
    }

    /// Rotary position encoding over feature pairs; columns are tokens.
    pub fn rope(&mut self, a: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        let v = tensor::rope_columns(self.value(a), positions, base, false)?;
        self.push(
            Op::Rope {
                a,
                positions: positions.to_vec(),
                base,
            },
            v,
            &[a],
            "rope",
        )
    }

    pub fn slice(&mut self, a: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<NodeId> {
        let v = self.value(a).slice2d(r0, r1, c0, c1)?;
        self.push(Op::Slice { a, r0, c0 }, v, &[a], "slice")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        self.push(Op::ConcatCols(parts.to_vec()), v, parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        self.push(Op::ConcatRows(parts.to_vec()), v, parts, "concat_rows")
    }

    /// Places square blocks along the diagonal of a zero matrix.
    pub fn block_diag(&mut self, blocks: &[NodeId]) -> Result<NodeId> {
        let mut n = 0;
        for &b in blocks {
            let (r, c) = self.value(b).dims2()?;
            if r != c {
                return Err(NumericsError::Shape("block_diag needs square blocks".into()));
            }
            n += r;
        }
        let mut v = Tensor::zeros(&[n, n]);
        let mut off = 0;
        for &b in blocks {
            let bv = &self.nodes[b.0].value;
            let l = bv.rows();
            for i in 0..l {
                v.row_mut(off + i)[off..off + l].copy_from_slice(bv.row(i));
            }
            off += l;
        }
        self.push(Op::BlockDiag(blocks.to_vec()), v, blocks, "block_diag")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), v, &[a], "reshape")
    }

    /// Moment matching: rescales `k` to the mean and standard deviation of
    /// `target` (population statistics over all elements).
    pub fn renormalize(&mut self, k: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        let kv = self.value(k);
        let tv = self.value(target);
        let eps = T::lit(eps);
        let k_mean = kv.mean();
        let k_std = kv.std();
        let t_mean = tv.mean();
        let t_std = tv.std();
        let denom = k_std + eps;
        let normalized: Vec<T> = kv.data().iter().map(|&x| (x - k_mean) / denom).collect();
        let out = Tensor::new(
            kv.shape().to_vec(),
            normalized.iter().map(|&u| u * t_std + t_mean).collect(),
        )?;
        self.push(
            Op::Renormalize {
                k,
                target,
                stats: RenormStats {
                    normalized,
                    k_std,
                    denom,
                    t_mean,
                    t_std,
                },
            },
            out,
            &[k, target],
            "renormalize",
        )
    }

    /// Sum of all elements as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, &[a], "sum")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(idx);
            let Some(g) = hi[0].as_ref() else { continue };
            g.ensure_finite("backward")?;
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, lo)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, lo: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], tensor::matmul_nt(g, val(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut lo[b.0], tensor::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a · bᵀ: da = g · b, db = gᵀ · a
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], tensor::matmul(g, val(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut lo[b.0], tensor::matmul_tn(g, val(*a))?);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.transpose()?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut lo[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut lo[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.zip_map(val(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    accumulate(&mut lo[b.0], g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.scale(*s));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).data()[0];
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.scale(k));
                }
                if self.needs(*s) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    accumulate(&mut lo[s.0], Tensor::new(val(*s).shape().to_vec(), vec![d])?);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.clone());
                }
                if self.needs(*row) {
                    let slot = slot_or_zeros(&mut lo[row.0], val(*row).shape());
                    for i in 0..g.rows() {
                        for (acc, &x) in slot.data_mut().iter_mut().zip(g.row(i)) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::AddCol(a, col) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.clone());
                }
                if self.needs(*col) {
                    let slot = slot_or_zeros(&mut lo[col.0], val(*col).shape());
                    for i in 0..g.rows() {
                        let s = g.row(i).iter().fold(T::zero(), |acc, &x| acc + x);
                        slot.data_mut()[i] = slot.data()[i] + s;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let d = g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { T::zero() })?;
                    accumulate(&mut lo[a.0], d);
                }
            }
            Op::SigmoidDeriv(a) => {
                if self.needs(*a) {
                    // d/dx σ'(x) = σ'(x)(1 − 2σ(x))
                    let d = g.zip_map(val(*a), |x, y| {
                        let s = tensor::sigmoid(y);
                        x * s * (T::one() - s) * (T::one() - s - s)
                    })?;
                    accumulate(&mut lo[a.0], d);
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = xv.cols();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let s = inv[r];
                        let dot = xr
                            .iter()
                            .zip(gr)
                            .zip(gv)
                            .fold(T::zero(), |acc, ((&xi, &gi), &wi)| acc + gi * wi * xi);
                        let coef = dot * s * s * s / T::lit(d as f64);
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = gr[j] * gv[j] * s - xr[j] * coef;
                        }
                    }
                    accumulate(&mut lo[x.0], dx);
                }
                if self.needs(*gain) {
                    let slot = slot_or_zeros(&mut lo[gain.0], val(*gain).shape());
                    for r in 0..xv.rows() {
                        let s = inv[r];
                        for ((acc, &xi), &gi) in slot.data_mut().iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *acc = *acc + gi * xi * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = xv.cols();
                let inv_d = T::lit(1.0 / d as f64);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(&mut lo[x.0], dx);
                }
                if self.needs(*gain) {
                    let slot = slot_or_zeros(&mut lo[gain.0], val(*gain).shape());
                    for r in 0..xv.rows() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for ((acc, &h), &gi) in slot.data_mut().iter_mut().zip(xh).zip(g.row(r)) {
                            *acc = *acc + gi * h;
                        }
                    }
                }
                if self.needs(*bias) {
                    let slot = slot_or_zeros(&mut lo[bias.0], val(*bias).shape());
                    for r in 0..xv.rows() {
                        for (acc, &gi) in slot.data_mut().iter_mut().zip(g.row(r)) {
                            *acc = *acc + gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut lo[a.0], dx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.needs(*logits) {
                    let up = g.data()[0];
                    let mut d: Vec<T> = probs.iter().map(|&p| p * up).collect();
                    d[*target] = d[*target] - up;
                    accumulate(&mut lo[logits.0], Tensor::new(val(*logits).shape().to_vec(), d)?);
                }
            }
            Op::Gather { src, ids } => {
                if self.needs(*src) {
                    let slot = slot_or_zeros(&mut lo[src.0], val(*src).shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, &x) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::Mask { a, keep } => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for (x, &k) in d.data_mut().iter_mut().zip(keep) {
                        if !k {
                            *x = T::zero();
                        }
                    }
                    accumulate(&mut lo[a.0], d);
                }
            }
            Op::CumsumCols(a) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let row = d.row_mut(i);
                        let mut acc = T::zero();
                        for x in row.iter_mut().rev() {
                            acc = acc + *x;
                            *x = acc;
                        }
                    }
                    accumulate(&mut lo[a.0], d);
                }
            }
            Op::Rope { a, positions, base } => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], tensor::rope_columns(g, positions, *base, true)?);
                }
            }
            Op::Slice { a, r0, c0 } => {
                if self.needs(*a) {
                    let slot = slot_or_zeros(&mut lo[a.0], val(*a).shape());
                    let c = slot.cols();
                    let w = g.cols();
                    for i in 0..g.rows() {
                        let start = (r0 + i) * c + c0;
                        for (acc, &x) in slot.data_mut()[start..start + w].iter_mut().zip(g.row(i)) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2()?;
                    if self.needs(p) {
                        accumulate(&mut lo[p.0], g.slice2d(0, r, off, off + c)?);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let cols = g.cols();
                for &p in parts {
                    let r = val(p).rows();
                    if self.needs(p) {
                        accumulate(&mut lo[p.0], g.slice2d(off, off + r, 0, cols)?);
                    }
                    off += r;
                }
            }
            Op::BlockDiag(blocks) => {
                let mut off = 0;
                for &b in blocks {
                    let l = val(b).rows();
                    if self.needs(b) {
                        accumulate(&mut lo[b.0], g.slice2d(off, off + l, off, off + l)?);
                    }
                    off += l;
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], g.clone().reshape(val(*a).shape())?);
                }
            }
            Op::Renormalize { k, target, stats } => {
                let n = T::lit(g.len() as f64);
                let gd = g.data();
                if self.needs(*target) {
                    let tv = val(*target);
                    let g_mean = g.sum();
                    let g_std = gd
                        .iter()
                        .zip(&stats.normalized)
                        .fold(T::zero(), |acc, (&x, &u)| acc + x * u);
                    let d = tv.map(|t| {
                        let from_std = if stats.t_std > T::zero() {
                            g_std * (t - stats.t_mean) / (n * stats.t_std)
                        } else {
                            T::zero()
                        };
                        g_mean / n + from_std
                    });
                    accumulate(&mut lo[target.0], d);
                }
                if self.needs(*k) {
                    let gu: Vec<T> = gd.iter().map(|&x| x * stats.t_std).collect();
                    let gu_mean = gu.iter().fold(T::zero(), |acc, &x| acc + x) / n;
                    // centred k equals normalized · denom
                    let dot = gu
                        .iter()
                        .zip(&stats.normalized)
                        .fold(T::zero(), |acc, (&x, &u)| acc + x * u * stats.denom);
                    let coef = if stats.k_std > T::zero() {
                        dot / (n * stats.k_std * stats.denom * stats.denom)
                    } else {
                        T::zero()
                    };
                    let d: Vec<T> = gu
                        .iter()
                        .zip(&stats.normalized)
                        .map(|(&x, &u)| (x - gu_mean) / stats.denom - u * stats.denom * coef)
                        .collect();
                    accumulate(&mut lo[k.0], Tensor::new(val(*k).shape().to_vec(), d)?);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    accumulate(&mut lo[a.0], Tensor::full(val(*a).shape(), g.data()[0]));
                }
            }
        }
        Ok(())
    }
}
