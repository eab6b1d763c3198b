#![allow(dead_code)]

use cocorrec::data::Example;
use cocorrec::gcn::{GcnConfig, GcnModel};
use cocorrec::numerics::{grad_check, GradCheckReport, NumericsError, ParamStore, Scalar, Tensor};
use cocorrec::scn::{ScnConfig, ScnModel};
use cocorrec::trainer::loss_graph;
use cocorrec::ttt::{BlockParams, ProjectionSet, TttConfig, TttState};
use cocorrec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-scale..scale)))
}

/// Block parameters with every entry random, including fast weights, bias and norm affine.
pub fn random_block<T: Scalar>(cfg: &TttConfig, seed: u64) -> BlockParams<T> {
    let mut r = rng(seed);
    let (d, dh, h) = (cfg.model_dim, cfg.head_dim(), cfg.heads);
    let proj_scale = 1.5 / (d as f64).sqrt();
    let mut many = |rows, cols, scale| -> Vec<Tensor<T>> { (0..h).map(|_| uniform(&mut r, rows, cols, scale)).collect() };
    let theta_q = many(dh, d, proj_scale);
    let theta_k = many(dh, d, proj_scale);
    let theta_v = many(dh, d, proj_scale);
    let w = many(dh, dh, 0.3);
    let bias = many(dh, 1, 0.3);
    let ln_bias = many(1, dh, 0.2);
    let ln_gain = (0..h)
        .map(|_| uniform::<T>(&mut r, 1, dh, 0.5).map(|x| x + T::one()))
        .collect();
    BlockParams {
        proj: ProjectionSet {
            theta_q,
            theta_k,
            theta_v,
            theta_o: uniform(&mut r, d, d, proj_scale),
        },
        state0: TttState { w, bias },
        ln_gain,
        ln_bias,
    }
}

/// `max|a − b| / max|b|`.
pub fn norm_rel_err<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff = diff.max((x.as_f64() - y.as_f64()).abs());
        scale = scale.max(y.as_f64().abs());
    }
    diff / scale.max(1e-30)
}

/// Explicit prefix-sum loop for one mini-batch of the reconstruction loss, in f64.
pub fn explicit_minibatch(w0: &Tensor<f64>, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, eta: f64) -> (Tensor<f64>, Tensor<f64>) {
    let (dh, b) = (q.rows(), q.cols());
    let mut acc = vec![vec![0.0; dh]; dh];
    let mut z = Tensor::zeros(&[dh, b]);
    for t in 0..b {
        for i in 0..dh {
            let mut pred = 0.0;
            for j in 0..dh {
                pred += w0.at(i, j) * k.at(j, t);
            }
            let r = pred - v.at(i, t);
            for j in 0..dh {
                acc[i][j] += 2.0 * r * k.at(j, t);
            }
        }
        for i in 0..dh {
            let mut s = 0.0;
            for j in 0..dh {
                s += (w0.at(i, j) - eta * acc[i][j]) * q.at(j, t);
            }
            z.set(i, t, s);
        }
    }
    let w = Tensor::from_fn(dh, dh, |i, j| w0.at(i, j) - eta * acc[i][j]);
    (w, z)
}


/// Random block instance with n <= 32 and head width <= 16.
pub fn random_instance(seed: u64) -> (TttConfig, BlockParams<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let heads = r.random_range(1..=3);
    let dh = 2 * r.random_range(1..=8);
    let n = r.random_range(1..=32);
    let b = r.random_range(1..=n);
    let cfg = TttConfig::new(heads * dh, heads, b);
    let params = random_block::<f64>(&cfg, seed + 10_000);
    let h = uniform(&mut r, n, heads * dh, 1.0);
    (cfg, params, h)
}


fn randomise(store: &mut ParamStore<f32>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        let (rows, cols) = (p.value.rows(), p.value.cols());
        p.value = uniform(&mut r, rows, cols, scale);
    }
}

fn tiny_models(mini_batch: usize) -> (ScnModel, GcnModel) {
    let mut scn = ScnModel::new(
        ScnConfig {
            vocab_size: 20,
            model_dim: 8,
            heads: 2,
            seq_len: 4,
            mini_batch,
        },
        1,
    )
    .unwrap();
    randomise(&mut scn.params, 2, 0.6);
    let mut gcn = GcnModel::new(
        GcnConfig {
            seq_len: 4,
            model_dim: 8,
            heads: 2,
            hidden: 6,
        },
        3,
    )
    .unwrap();
    randomise(&mut gcn.params, 4, 0.4);
    gcn.set_fusion_scalars(0.7, -0.5).unwrap();
    (scn, gcn)
}

fn examples() -> Vec<Example> {
    vec![
        Example {
            user: 0,
            step: 4,
            input: vec![3, 7, 1, 12],
            target: 5,
            candidates: vec![5, 9, 2, 17, 11],
        },
        Example {
            user: 1,
            step: 4,
            input: vec![19, 4, 4, 8],
            target: 6,
            candidates: vec![6, 1, 13, 3, 10],
        },
    ]
}

fn to_numerics(e: Error) -> NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => NumericsError::Contract(other.to_string()),
    }
}

/// Finite-difference check of the summed loss of a tiny random model, optionally with the correction network.
pub fn model_gradient_report(with_gcn: bool, mini_batch: usize) -> (GradCheckReport, usize) {
    let (scn, gcn) = tiny_models(mini_batch);
    let mut store = scn.params.cast::<f64>();
    if with_gcn {
        store.extend(gcn.params.cast::<f64>()).unwrap();
    }
    let exs = examples();
    let refs: Vec<&Example> = exs.iter().collect();
    let report = grad_check(&store, 1e-3, |g, b| {
        let corr = with_gcn.then_some((&gcn, b));
        loss_graph(g, &scn, b, corr, &refs).map_err(to_numerics)
    })
    .unwrap();
    (report, store.num_elements())
}
