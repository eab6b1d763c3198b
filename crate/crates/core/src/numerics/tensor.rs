//! Dense row-major tensors and the primitive kernels the model is built from.
//!
//! Tensors are at most rank 2 in practice (vectors for gains and biases,
//! matrices for everything else). Every kernel is generic over [`Scalar`] so
//! the same code runs in 32-bit for the model and in 64-bit for gradient
//! checking.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::{flops, NumericsError, Result};

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Lossy conversion from `f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from `f64` rows. Panics on ragged input; meant for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| T::lit(x)));
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension (1 for scalars stored as rank 0).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    /// Population standard deviation over all elements.
    pub fn std(&self) -> T {
        let mu = self.mean();
        let var = self
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + (x - mu) * (x - mu))
            / T::lit(self.data.len() as f64);
        var.sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(what.to_string()))
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).expect("cast"))
                .collect(),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::Shape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Sub-matrix `[r0, r1) x [c0, c1)`.
    pub fn slice2d(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r0 > r1 || r1 > r || c0 > c1 || c1 > c {
            return Err(NumericsError::Shape(format!(
                "slice [{r0},{r1})x[{c0},{c1}) out of bounds for {r}x{c}"
            )));
        }
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            data.extend_from_slice(&self.data[i * c + c0..i * c + c1]);
        }
        Ok(Self {
            shape: vec![r1 - r0, c1 - c0],
            data,
        })
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let r = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(NumericsError::Shape(format!(
                    "concat_cols row mismatch {pr} vs {r}"
                )));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let c = first.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(NumericsError::Shape(format!(
                    "concat_rows column mismatch {pc} vs {c}"
                )));
            }
            rows += pr;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }
}

/// Matrix product `a · b`. Counts `m·k·n` multiply-adds on the FLOP counter.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul inner dims {m}x{k} · {k2}x{n}"
        )));
    }
    flops::record_macs((m * k * n) as u64);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul_nt inner dims {m}x{k} · ({n}x{k2})ᵀ"
        )));
    }
    flops::record_macs((m * k * n) as u64);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul_tn inner dims ({k}x{m})ᵀ · {k2}x{n}"
        )));
    }
    flops::record_macs((m * k * n) as u64);
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_pi * b_pj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise RMS normalisation: `gain ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d {
        return Err(NumericsError::Shape(format!(
            "rmsnorm gain has {} entries for last dim {d}",
            gain.len()
        )));
    }
    let mut out = x.clone();
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) * inv_d;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(&gain.data) {
            *v = g * (*v * inv);
        }
    }
    Ok(out)
}

/// Row-wise layer normalisation followed by the affine `gain`, `bias`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(NumericsError::Shape(format!(
            "layernorm affine params must have {d} entries"
        )));
    }
    let mut out = x.clone();
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mu = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
        let var = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu))
            * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = g * ((*v - mu) * inv) + b;
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(NumericsError::Shape("softmax of an empty tensor".into()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise `σ(x)·(1 − σ(x))`.
pub fn sigmoid_deriv<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let s = sigmoid(v);
        s * (T::one() - s)
    })
}

/// Rotates consecutive feature pairs `(2i, 2i+1)` of every column by
/// `position · base^(−2i/d)`, where `d` is the row count. `inverse` applies
/// the transposed rotation.
pub fn rope_columns<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Result<Tensor<T>> {
    let (d, n) = x.dims2()?;
    if d % 2 != 0 {
        return Err(NumericsError::Shape(format!(
            "rotary encoding needs an even feature dimension, got {d}"
        )));
    }
    if positions.len() != n {
        return Err(NumericsError::Shape(format!(
            "{} positions for {n} tokens",
            positions.len()
        )));
    }
    let mut out = x.clone();
    for i in 0..d / 2 {
        let freq = base.powf(-2.0 * i as f64 / d as f64);
        for (t, &pos) in positions.iter().enumerate() {
            let angle = pos as f64 * freq;
            let (sin, cos) = (T::lit(angle.sin()), T::lit(angle.cos()));
            let sin = if inverse { -sin } else { sin };
            let a = x.at(2 * i, t);
            let b = x.at(2 * i + 1, t);
            out.set(2 * i, t, a * cos - b * sin);
            out.set(2 * i + 1, t, a * sin + b * cos);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let a: Tensor<f64> = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let z = matmul(
            &Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
            &Tensor::from_rows(&[&[0.0], &[5.0]]),
        )
        .unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-6);
            }
        }
        let nt = matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        let tn = matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        for ((x, y), z) in c.data().iter().zip(nt.data()).zip(tn.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_dims() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 1)).unwrap_err();
        assert!(matches!(err, NumericsError::Shape(_)));
    }

    #[test]
    fn rmsnorm_fixtures() {
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let x = Tensor::<f64>::from_rows(&[&[3.0, 3.0, 3.0, 3.0]]);
        assert_eq!(rmsnorm(&x, &ones, 0.0).unwrap().data(), &[1.0; 4]);
        let z = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]);
        let y = rmsnorm(&z, &Tensor::full(&[2], 1.0), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_scale_invariant() {
        let x = random(5, 8, 3);
        let g = Tensor::full(&[8], 1.0);
        let a = rmsnorm(&x, &g, 0.0).unwrap();
        let b = rmsnorm(&x.scale(7.3), &g, 0.0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_fixtures_and_moments() {
        let g = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        let flat = layernorm(&Tensor::from_rows(&[&[1.0, 1.0]]), &g, &b, 1e-5).unwrap();
        assert_eq!(flat.data(), &[0.0, 0.0]);
        let std = layernorm(&Tensor::from_rows(&[&[-1.0, 1.0]]), &g, &b, 0.0).unwrap();
        assert_eq!(std.data(), &[-1.0, 1.0]);

        let x = random(1, 64, 9);
        let gain = Tensor::full(&[64], 2.5);
        let bias = Tensor::full(&[64], -0.75);
        let y = layernorm(&x, &gain, &bias, 0.0).unwrap();
        assert!((y.mean() + 0.75).abs() < 1e-4);
        assert!((y.std() - 2.5).abs() < 1e-4);
    }

    #[test]
    fn softmax_fixtures() {
        let s = softmax(&Tensor::<f64>::from_rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::from_rows(&[&[1000.0, 0.0]])).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-30);
        let r = softmax(&random(1, 50, 4).scale(1e4)).unwrap();
        assert!((r.sum() - 1.0).abs() < 1e-6 && r.is_finite());
    }

    #[test]
    fn sigmoid_deriv_fixtures() {
        let t = Tensor::<f64>::vector(vec![0.0, 20.0, -20.0]);
        let d = sigmoid_deriv(&t);
        assert_eq!(d.data()[0], 0.25);
        assert!(d.data()[1] < 1e-8 && d.data()[2] < 1e-8);
        let h = 1e-5;
        let fd = (sigmoid(1.3 + h) - sigmoid(1.3 - h)) / (2.0 * h);
        let an = sigmoid_deriv(&Tensor::<f64>::vector(vec![1.3])).data()[0];
        assert!((fd - an).abs() < 1e-6);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = random(3, 5, 11);
        let left = a.slice2d(0, 3, 0, 2).unwrap();
        let right = a.slice2d(0, 3, 2, 5).unwrap();
        assert_eq!(Tensor::concat_cols(&[&left, &right]).unwrap(), a);
        let top = a.slice2d(0, 1, 0, 5).unwrap();
        let bottom = a.slice2d(1, 3, 0, 5).unwrap();
        assert_eq!(Tensor::concat_rows(&[&top, &bottom]).unwrap(), a);
    }
}
