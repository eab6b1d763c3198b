//! Token-by-token reference for the production block, written with scalar
//! loops only so that it shares no batching code with [`super::block`].

use crate::numerics::{Scalar, Tensor};
use crate::Result;

use super::{BlockParams, TttConfig, ROPE_BASE};

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn rotate<T: Scalar>(x: &mut [T], pos: usize) {
    let d = x.len();
    for i in 0..d / 2 {
        let angle = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (T::lit(angle.sin()), T::lit(angle.cos()));
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

fn sigma_prime<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() - s)
}

/// Pre-norm block outputs (n×D, heads concatenated) computed one token at a time:
/// `z_t = W x_q,t − Σ g_s (x_k,sᵀ x_q,t) + b0 − Σ_{s≤t} g_s`, where the first sum runs over
/// earlier tokens of the current mini-batch and `W` is the mini-batch entry state.
pub fn alg1_oracle<T: Scalar>(h: &Tensor<T>, params: &BlockParams<T>, cfg: &TttConfig) -> Result<Tensor<T>> {
    let (n, d) = h.dims2()?;
    let heads = params.heads();
    let mut out = Tensor::zeros(&[n, d]);
    let mut col0 = 0;
    for hd in 0..heads {
        let dh = params.state0.w[hd].rows();
        let row_of = |m: &Tensor<T>, i: usize| m.row(i).to_vec();
        let proj = |theta: &Tensor<T>, t: usize| -> Vec<T> {
            (0..dh).map(|i| dot(&row_of(theta, i), h.row(t))).collect()
        };
        let mut w: Vec<Vec<T>> = (0..dh).map(|i| params.state0.w[hd].row(i).to_vec()).collect();
        let b0 = params.state0.bias[hd].data().to_vec();
        let mut bias_sum = vec![T::zero(); dh];
        let mut block_start = 0;
        let mut block: Vec<(Vec<T>, Vec<T>)> = Vec::new();
        let mut pending = vec![vec![T::zero(); dh]; dh];
        for t in 0..n {
            if t - block_start == cfg.mini_batch.max(1) {
                for (wi, pi) in w.iter_mut().zip(&pending) {
                    for (x, &p) in wi.iter_mut().zip(pi) {
                        *x = *x - p;
                    }
                }
                pending = vec![vec![T::zero(); dh]; dh];
                block.clear();
                block_start = t;
            }
            let mut q = proj(&params.proj.theta_q[hd], t);
            let mut k = proj(&params.proj.theta_k[hd], t);
            let v = proj(&params.proj.theta_v[hd], t);
            rotate(&mut q, t);
            rotate(&mut k, t);
            let g: Vec<T> = (0..dh).map(|i| sigma_prime(dot(&w[i], &k) - v[i])).collect();
            for i in 0..dh {
                bias_sum[i] = bias_sum[i] + g[i];
                for j in 0..dh {
                    pending[i][j] = pending[i][j] + g[i] * k[j];
                }
            }
            block.push((g, k));
            for i in 0..dh {
                let mut z = dot(&w[i], &q);
                for (gs, ks) in &block {
                    z = z - gs[i] * dot(ks, &q);
                }
                out.set(t, col0 + i, z + b0[i] - bias_sum[i]);
            }
        }
        col0 += dh;
    }
    Ok(out)
}
