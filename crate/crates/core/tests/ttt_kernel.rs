mod common;

use cocorrec::gcn::{CorrectionBundle, GcnConfig};
use cocorrec::numerics::{sigmoid, Tensor};
use cocorrec::ttt::{
    alg1_oracle, block_forward, dual_form_simple, minibatch_scan, minibatch_update, naive_step, project, rope_apply,
    BlockParams, StreamingKernel, TttConfig, TttState,
};
use common::{explicit_minibatch, random_instance, norm_rel_err, random_block, rng, uniform};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn dual_form_matches_explicit_minibatch_over_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(1..=32);
        let dh = r.random_range(1..=16);
        let eta = 0.02;
        let w0: Tensor<f64> = uniform(&mut r, dh, dh, 0.5);
        let x: Tensor<f64> = uniform(&mut r, dh, n, 1.0);
        let (w_oracle, z_oracle) = explicit_minibatch(&w0, &x, &x, &x, eta);
        let (wb, z) = dual_form_simple(&w0.cast::<f32>(), &x.cast::<f32>(), eta).unwrap();
        worst = worst.max(norm_rel_err(&wb, &w_oracle)).max(norm_rel_err(&z, &z_oracle));
    }
    assert!(worst <= 1e-5, "max relative error {worst:e}");
}

#[test]
fn minibatch_update_matches_explicit_loop() {
    let mut r = rng(7);
    let (dh, n) = (6, 8);
    let w0: Tensor<f64> = uniform(&mut r, dh, dh, 0.5);
    let q: Tensor<f64> = uniform(&mut r, dh, n, 1.0);
    let k: Tensor<f64> = uniform(&mut r, dh, n, 1.0);
    let v: Tensor<f64> = uniform(&mut r, dh, n, 1.0);
    let (w_end, z) = minibatch_scan(&w0, &q, &k, &v, 4, 0.05).unwrap();
    let first = |t: &Tensor<f64>| t.slice2d(0, dh, 0, 4).unwrap();
    let second = |t: &Tensor<f64>| t.slice2d(0, dh, 4, 8).unwrap();
    let (w_mid, z1) = explicit_minibatch(&w0, &first(&q), &first(&k), &first(&v), 0.05);
    let (w_oracle, z2) = explicit_minibatch(&w_mid, &second(&q), &second(&k), &second(&v), 0.05);
    let z_oracle = Tensor::concat_cols(&[&z1, &z2]).unwrap();
    assert!(norm_rel_err(&z, &z_oracle) <= 1e-12);
    assert!(norm_rel_err(&w_end, &w_oracle) <= 1e-12);
    let (_, z_frozen) = minibatch_update(&w0, &q, &k, &v, 0.0).unwrap();
    assert_eq!(z_frozen, cocorrec::numerics::matmul(&w0, &q).unwrap());
}

#[test]
fn unit_minibatch_equals_naive_loop() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (dh, n) = (r.random_range(1..=16), r.random_range(1..=32));
        let w0: Tensor<f32> = uniform(&mut r, dh, dh, 0.5);
        let q: Tensor<f32> = uniform(&mut r, dh, n, 1.0);
        let k: Tensor<f32> = uniform(&mut r, dh, n, 1.0);
        let v: Tensor<f32> = uniform(&mut r, dh, n, 1.0);
        let (w_scan, z_scan) = minibatch_scan(&w0, &q, &k, &v, 1, 0.03).unwrap();
        let mut w = w0.clone();
        let mut cols = Vec::new();
        for t in 0..n {
            let c = |m: &Tensor<f32>| m.slice2d(0, dh, t, t + 1).unwrap();
            let (w_next, z) = naive_step(&w, &c(&q), &c(&k), &c(&v), 0.03).unwrap();
            w = w_next;
            cols.push(z);
        }
        let z_naive = Tensor::concat_cols(&cols.iter().collect::<Vec<_>>()).unwrap();
        assert!(norm_rel_err(&z_scan, &z_naive) <= 1e-6);
        assert!(norm_rel_err(&w_scan, &w) <= 1e-6);
    }
}

#[test]
fn block_matches_token_loop_oracle() {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (cfg, params, h) = random_instance(seed);
        let oracle = alg1_oracle(&h, &params, &cfg).unwrap();
        let (_, trace) = block_forward(&h.cast::<f32>(), &params.cast::<f32>(), &cfg, None).unwrap();
        worst = worst.max(norm_rel_err(&trace.z, &oracle));
    }
    assert!(worst <= 1e-5, "max relative error {worst:e}");
}

fn zero_params(cfg: &TttConfig) -> BlockParams<f32> {
    let (d, dh, h) = (cfg.model_dim, cfg.head_dim(), cfg.heads);
    let mut p = random_block::<f32>(cfg, 1);
    p.state0 = TttState::zeros(h, dh);
    p.proj.theta_o = Tensor::zeros(&[d, d]);
    p
}

#[test]
fn zero_input_fixture() {
    let cfg = TttConfig::new(8, 2, 6);
    let params = zero_params(&cfg);
    let h = Tensor::zeros(&[6, 8]);
    let (_, trace) = block_forward(&h, &params, &cfg, None).unwrap();
    for t in 0..6 {
        for c in 0..8 {
            assert_eq!(trace.z.at(t, c), -0.25 * (t as f32 + 1.0));
        }
    }
    let oracle = alg1_oracle(&h.cast::<f64>(), &params.cast::<f64>(), &cfg).unwrap();
    assert_eq!(oracle.at(5, 3), -1.5);
}

#[test]
fn single_token_hand_computation() {
    let cfg = TttConfig::new(4, 1, 1);
    let params = random_block::<f64>(&cfg, 42);
    let h: Tensor<f64> = uniform(&mut rng(3), 1, 4, 1.0);
    let x = &project(&h, &params).unwrap()[0];
    let w = &params.state0.w[0];
    let b0 = params.state0.bias[0].data();
    let (q, k, v) = (x.q.column(0), x.k.column(0), x.v.column(0));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let kq = dot(&k, &q);
    let (_, trace) = block_forward(&h, &params, &cfg, None).unwrap();
    for i in 0..4 {
        let g = {
            let s = sigmoid(dot(w.row(i), &k) - v[i]);
            s * (1.0 - s)
        };
        let z = dot(w.row(i), &q) - g * kq + (b0[i] - g);
        assert!((trace.z.at(0, i) - z).abs() < 1e-6);
    }
}

#[test]
fn neutral_correction_is_bit_identical() {
    for (b, seed) in [(10, 1u64), (3, 2), (1, 3)] {
        let cfg = TttConfig::new(16, 2, b);
        let params = random_block::<f32>(&cfg, seed);
        let h: Tensor<f32> = uniform(&mut rng(seed), 10, 16, 1.0);
        let gcfg = GcnConfig {
            seq_len: 10,
            model_dim: 16,
            heads: 2,
            hidden: 4,
        };
        let mut r = rng(seed + 1);
        let payload: Vec<f32> = (0..gcfg.payload_len()).map(|_| r.random_range(-2.0..2.0)).collect();
        let bundle = CorrectionBundle::from_flat(&gcfg, &payload, 0.0, 0.0).unwrap();
        let (plain, trace_plain) = block_forward(&h, &params, &cfg, None).unwrap();
        let (fused, trace_fused) = block_forward(&h, &params, &cfg, Some(&bundle)).unwrap();
        assert_eq!(plain.data(), fused.data());
        assert_eq!(trace_plain.z.data(), trace_fused.z.data());

        let active = CorrectionBundle { p: 0.5, q: 0.5, ..bundle };
        let (_, trace) = block_forward(&h, &params, &cfg, Some(&active)).unwrap();
        assert_ne!(trace.z.data(), trace_plain.z.data());
        for attn in &trace.attn {
            for s in 0..10 {
                for t in 0..s {
                    assert_eq!(attn.at(s, t), 0.0);
                }
            }
        }
    }
}

#[test]
fn mismatched_correction_is_rejected() {
    let cfg = TttConfig::new(16, 2, 10);
    let params = random_block::<f32>(&cfg, 5);
    let h = Tensor::zeros(&[10, 16]);
    let gcfg = GcnConfig {
        seq_len: 8,
        model_dim: 16,
        heads: 2,
        hidden: 4,
    };
    let bundle = CorrectionBundle::neutral(&gcfg);
    assert!(block_forward(&h, &params, &cfg, Some(&bundle)).is_err());
}

#[test]
fn streaming_kernel_is_bit_identical_to_graph() {
    for b in [1, 2, 4, 10] {
        let cfg = TttConfig::new(16, 2, b);
        let params = random_block::<f32>(&cfg, 9);
        let h: Tensor<f32> = uniform(&mut rng(11), 10, 16, 1.0);
        let (out, _) = block_forward(&h, &params, &cfg, None).unwrap();
        let mut kernel = StreamingKernel::new(&params, b).unwrap();
        let last = kernel.forward_last(&h).unwrap();
        assert_eq!(last.data(), out.row(9), "b = {b}");
        assert_eq!(kernel.forward_last(&h).unwrap(), last);
    }
}

#[test]
fn sequential_memory_does_not_grow_with_length() {
    let cfg = TttConfig::new(16, 2, 1);
    let params = random_block::<f32>(&cfg, 9);
    let peak = |n: usize, b: usize| {
        let h: Tensor<f32> = uniform(&mut rng(1), n, 16, 1.0);
        let mut k = StreamingKernel::new(&params, b).unwrap();
        k.forward_last(&h).unwrap();
        k.memory().peak()
    };
    assert_eq!(peak(5, 1), peak(40, 1));
    assert!(peak(40, 40) > peak(20, 20));
}

fn column_prefix_equal(a: &Tensor<f32>, b: &Tensor<f32>, upto: usize) -> bool {
    (0..upto).all(|t| a.row(t) == b.row(t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_are_causal(seed in 0u64..10_000, t in 0usize..12, b in 1usize..=12) {
        let cfg = TttConfig::new(8, 2, b);
        let params = random_block::<f32>(&cfg, seed);
        let h: Tensor<f32> = uniform(&mut rng(seed), 12, 8, 1.0);
        let mut h2 = h.clone();
        for c in 0..8 {
            h2.set(t, c, h.at(t, c) + 0.5);
        }
        let (_, a) = block_forward(&h, &params, &cfg, None).unwrap();
        let (_, b2) = block_forward(&h2, &params, &cfg, None).unwrap();
        prop_assert!(column_prefix_equal(&a.z, &b2.z, t));
        prop_assert!(a.z.row(t) != b2.z.row(t));
    }

    #[test]
    fn heads_are_independent(seed in 0u64..10_000) {
        let cfg = TttConfig::new(12, 3, 4);
        let params = random_block::<f32>(&cfg, seed);
        let mut shuffled = params.clone();
        shuffled.proj.theta_q.swap(1, 2);
        shuffled.state0.w.swap(1, 2);
        shuffled.proj.theta_v[2] = shuffled.proj.theta_v[2].scale(-1.0);
        let h: Tensor<f32> = uniform(&mut rng(seed), 8, 12, 1.0);
        let (_, a) = block_forward(&h, &params, &cfg, None).unwrap();
        let (_, b) = block_forward(&h, &shuffled, &cfg, None).unwrap();
        for t in 0..8 {
            prop_assert_eq!(&a.z.row(t)[..4], &b.z.row(t)[..4]);
        }
    }

    #[test]
    fn rope_preserves_token_norms(seed in 0u64..10_000, half in 1usize..9, n in 1usize..40) {
        let x: Tensor<f64> = uniform(&mut rng(seed), 2 * half, n, 3.0);
        let r = rope_apply(&x).unwrap();
        for t in 0..n {
            let norm = |m: &Tensor<f64>| m.column(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm(&x) - norm(&r)).abs() <= 1e-6);
        }
        prop_assert_eq!(r.column(0), x.column(0));
    }

    #[test]
    fn attention_is_zero_below_diagonal(seed in 0u64..10_000, b in 1usize..=9) {
        let cfg = TttConfig::new(8, 2, b);
        let params = random_block::<f32>(&cfg, seed);
        let h: Tensor<f32> = uniform(&mut rng(seed), 9, 8, 1.0);
        let (_, trace) = block_forward(&h, &params, &cfg, None).unwrap();
        for attn in &trace.attn {
            for s in 0..9 {
                for t in 0..s {
                    prop_assert_eq!(attn.at(s, t).to_bits(), 0);
                }
            }
        }
    }
}
