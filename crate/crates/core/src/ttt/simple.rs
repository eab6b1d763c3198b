//! Strategies for the plain reconstruction loss `‖W k − v‖²`.
//!
//! Tokens are columns. All three strategies compute the same outputs; they
//! differ only in how much of the work is batched into matrix products.

use crate::numerics::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};
use crate::Result;

use super::block::causal_mask;

/// `2 (W k − v) kᵀ` for every column of `k`, `v` summed.
fn reconstruction_grad<T: Scalar>(w: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let resid = matmul(w, k)?.sub(v)?;
    Ok(matmul_nt(&resid, k)?.scale(T::lit(2.0)))
}

/// One online step: update on token `(q, k, v)` (dh×1 each), then read out with the updated weights.
pub fn naive_step<T: Scalar>(
    w: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    eta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let grad = reconstruction_grad(w, k, v)?;
    let w_next = w.sub(&grad.scale(T::lit(eta)))?;
    let z = matmul(&w_next, q)?;
    Ok((w_next, z))
}

/// One mini-batch: every gradient is taken at the entry weights `w0`; the
/// output of token `t` uses the weights after the inclusive prefix `..=t`.
pub fn minibatch_update<T: Scalar>(
    w0: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    eta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dh, b) = q.dims2()?;
    let mut w = w0.clone();
    let mut z = Tensor::zeros(&[dh, b]);
    for t in 0..b {
        let kt = k.slice2d(0, dh, t, t + 1)?;
        let vt = v.slice2d(0, dh, t, t + 1)?;
        let qt = q.slice2d(0, dh, t, t + 1)?;
        let grad = reconstruction_grad(w0, &kt, &vt)?;
        w = w.sub(&grad.scale(T::lit(eta)))?;
        let zt = matmul(&w, &qt)?;
        for i in 0..dh {
            z.set(i, t, zt.at(i, 0));
        }
    }
    Ok((w, z))
}

/// Runs [`minibatch_update`] over consecutive blocks of `b` columns, chaining the weights.
pub fn minibatch_scan<T: Scalar>(
    w0: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    b: usize,
    eta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dh, n) = q.dims2()?;
    let mut w = w0.clone();
    let mut parts = Vec::new();
    for s in (0..n).step_by(b.max(1)) {
        let e = (s + b).min(n);
        let (w_next, z) = minibatch_update(
            &w,
            &q.slice2d(0, dh, s, e)?,
            &k.slice2d(0, dh, s, e)?,
            &v.slice2d(0, dh, s, e)?,
            eta,
        )?;
        w = w_next;
        parts.push(z);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let z = if refs.is_empty() {
        Tensor::zeros(&[dh, 0])
    } else {
        Tensor::concat_cols(&refs)?
    };
    Ok((w, z))
}

/// Matrix form of one mini-batch with identity projections (`q = k = v = x`):
/// `W_b = W0 − 2η R Xᵀ` and `Z = W0 X − 2η R · mask(XᵀX)` with `R = W0 X − X`.
pub fn dual_form_simple<T: Scalar>(w0: &Tensor<T>, x: &Tensor<T>, eta: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let two_eta = T::lit(2.0 * eta);
    let w0x = matmul(w0, x)?;
    let resid = w0x.sub(x)?;
    let w_b = w0.sub(&matmul_nt(&resid, x)?.scale(two_eta))?;
    let gram = causal_mask(&matmul_tn(x, x)?)?;
    let z = w0x.sub(&matmul(&resid, &gram)?.scale(two_eta))?;
    Ok((w_b, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn frozen_inner_loop() {
        let w = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let q = col(&[1.0, 2.0]);
        let (w1, z) = naive_step(&w, &q, &col(&[3.0, -1.0]), &col(&[0.0, 1.0]), 0.0).unwrap();
        assert_eq!(w1, w);
        assert_eq!(z, matmul(&w, &q).unwrap());
    }

    #[test]
    fn scalar_hand_step() {
        let one = col(&[1.0]);
        let (w1, z) = naive_step(&Tensor::zeros(&[1, 1]), &one, &one, &one, 0.5).unwrap();
        assert_eq!(w1.data(), &[1.0]);
        assert_eq!(z.data(), &[1.0]);
    }

    #[test]
    fn zero_residual_fixed_point() {
        let w = Tensor::<f64>::eye(3);
        let k = col(&[0.3, -0.2, 0.9]);
        let (w1, _) = naive_step(&w, &k, &k, &k, 0.7).unwrap();
        assert_eq!(w1, w);
    }

    #[test]
    fn minibatch_without_learning_reads_entry_weights() {
        let w = Tensor::<f64>::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
        let q = Tensor::from_rows(&[&[1.0, 0.0, 2.0], &[0.5, -1.0, 1.0]]);
        let (_, z) = minibatch_update(&w, &q, &q, &q, 0.0).unwrap();
        assert_eq!(z, matmul(&w, &q).unwrap());
    }

    #[test]
    fn empty_input_leaves_weights() {
        let w = Tensor::<f64>::eye(2);
        let x = Tensor::zeros(&[2, 3]);
        let (wb, z) = dual_form_simple(&w, &x, 0.1).unwrap();
        assert_eq!(wb, w);
        assert_eq!(z, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn single_token_dual_equals_naive() {
        let w = Tensor::from_rows(&[&[0.1, 0.2], &[-0.3, 0.4]]);
        let x = col(&[0.7, -0.5]);
        let (wb, z) = dual_form_simple(&w, &x, 0.05).unwrap();
        let (w1, z1) = naive_step(&w, &x, &x, &x, 0.05).unwrap();
        for (a, b) in wb.data().iter().zip(w1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in z.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
