mod common;

use cocorrec::data::{sample_negatives, sequences, preprocess, split_leave_last, synth_generate};
use cocorrec::eval::{
    auc, flops_self_attention, flops_ttt_block, hitrate_at_k, ndcg_at_k, peak_memory_estimate, rank_of_positive,
    resource_sweep, uauc, write_sweep_csv, MemoryStrategy, MetricAccumulator, MetricReport,
};
use cocorrec::numerics::flops;
use cocorrec::ttt::{block_forward, project, StreamingKernel, TttConfig};
use proptest::prelude::*;
use rand::Rng;

use common::{random_block, rng, uniform};

/// Mann-Whitney statistic by explicit pair enumeration.
fn pairwise_auc(pos: f32, negs: &[f32]) -> f64 {
    let mut wins = 0.0;
    for &n in negs {
        if pos > n {
            wins += 1.0;
        } else if pos == n {
            wins += 0.5;
        }
    }
    wins / negs.len() as f64
}

proptest! {
    #[test]
    fn uauc_matches_pairwise_enumeration(
        users in prop::collection::vec((0u8..6, prop::collection::vec(0u8..6, 1..40)), 1..25)
    ) {
        // Small integer scores force frequent ties.
        let cases: Vec<Vec<f32>> = users
            .iter()
            .map(|(p, negs)| std::iter::once(*p as f32).chain(negs.iter().map(|&n| n as f32)).collect())
            .collect();
        let expected: f64 = cases.iter().map(|c| pairwise_auc(c[0], &c[1..])).sum::<f64>() / cases.len() as f64;
        let (got, skipped) = uauc(cases.iter().map(|c| c.as_slice()));
        prop_assert_eq!(skipped, 0);
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn metrics_are_monotone_in_cutoff(rank in 1usize..200) {
        for k in 1..150 {
            prop_assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
            prop_assert!(hitrate_at_k(rank, k) <= hitrate_at_k(rank, k + 1));
        }
    }

    #[test]
    fn report_is_bounded_and_monotone(seed in any::<u64>(), users in 1usize..40) {
        let mut r = rng(seed);
        let mut acc = MetricAccumulator::new();
        for _ in 0..users {
            let scores: Vec<f32> = (0..30).map(|_| r.random_range(0..5) as f32).collect();
            let cands: Vec<u32> = (0..30).map(|i| (i * 7 % 31) as u32 + 1).collect();
            acc.push(&scores, &cands);
        }
        let m = acc.report();
        for v in [m.uauc, m.ndcg5, m.ndcg10, m.ndcg20, m.hitrate5, m.hitrate10, m.hitrate20] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.ndcg5 <= m.ndcg10 && m.ndcg10 <= m.ndcg20);
        prop_assert!(m.hitrate5 <= m.hitrate10 && m.hitrate10 <= m.hitrate20);
    }
}

#[test]
fn two_of_four_negatives_above_gives_half() {
    let scores = [0.5, 0.9, 0.1, 0.7, 0.3];
    assert_eq!(auc(&scores), Some(0.5));
    assert_eq!(pairwise_auc(0.5, &scores[1..]), 0.5);
    assert_eq!(rank_of_positive(&scores, &[1, 2, 3, 4, 5]), 3);
}

#[test]
fn uniform_random_scores_hit_ten_of_101() {
    let raw = synth_generate(20_000, 300, 1, 17).unwrap();
    let (log, vocab) = preprocess(&raw, 0).unwrap();
    let seqs = sequences(&log, &vocab).unwrap();
    let split = sample_negatives(split_leave_last(&seqs, vocab.num_items(), 10), 4, 100, 17).unwrap();
    assert!(split.test.len() >= 2000);
    let mut r = rng(99);
    let mut acc = MetricAccumulator::new();
    for ex in &split.test {
        let scores: Vec<f32> = ex.candidates.iter().map(|_| r.random::<f32>()).collect();
        acc.push(&scores, &ex.candidates);
    }
    let m = acc.report();
    assert!((m.hitrate10 - 10.0 / 101.0).abs() <= 0.01, "hitrate@10 = {}", m.hitrate10);
    assert!((m.uauc - 0.5).abs() <= 0.01);
}

#[test]
fn report_serialises_with_cutoff_names() {
    let json = serde_json::to_value(MetricReport::default()).unwrap();
    for key in ["uauc", "ndcg@5", "ndcg@10", "ndcg@20", "hitrate@5", "hitrate@10", "hitrate@20", "users"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn block_cost_matches_instrumented_counter() {
    for (d, h) in [(8, 2), (16, 4), (12, 1)] {
        for n in 1..=32 {
            let cfg = TttConfig::new(d, h, 4.min(n));
            let params = random_block::<f32>(&cfg, n as u64);
            let x = uniform::<f32>(&mut rng(n as u64 + 100), n, d, 1.0);
            let (out, macs) = flops::measure(|| block_forward(&x, &params, &cfg, None));
            out.unwrap();
            assert_eq!(macs, flops_ttt_block(&cfg, n), "D={d} h={h} n={n}");
        }
    }
}

#[test]
fn projection_cost_quadruples_with_width() {
    let cost = |d: usize| {
        let cfg = TttConfig::new(d, 2, 5);
        let params = random_block::<f32>(&cfg, 3);
        let x = uniform::<f32>(&mut rng(4), 10, d, 1.0);
        flops::measure(|| project(&x, &params).unwrap()).1
    };
    assert_eq!(cost(32), 4 * cost(16));
}

#[test]
fn ttt_growth_is_flat_and_attention_growth_is_linear() {
    let cfg = TttConfig::new(64, 4, 5);
    let lengths = [10, 15, 20, 25];
    let mut measured = Vec::new();
    for &n in &lengths {
        let params = random_block::<f32>(&cfg, 1);
        let x = uniform::<f32>(&mut rng(2), n, 64, 1.0);
        measured.push(flops::measure(|| block_forward(&x, &params, &cfg, None).unwrap()).1);
    }
    let ttt_deltas: Vec<u64> = measured.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(ttt_deltas.windows(2).all(|w| w[0] == w[1]), "{ttt_deltas:?}");

    let sa: Vec<u64> = lengths.iter().map(|&n| flops_self_attention(n as u64, 4, 16).attention()).collect();
    let sa_deltas: Vec<u64> = sa.windows(2).map(|w| w[1] - w[0]).collect();
    let second: Vec<u64> = sa_deltas.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(second.iter().all(|&s| s > 0 && s == second[0]), "{sa_deltas:?}");

    let rows = resource_sweep(&cfg, &lengths);
    assert!(rows.windows(2).all(|w| w[0].ttt_macs_per_token == w[1].ttt_macs_per_token));
    assert!(rows.windows(2).all(|w| w[0].attention_macs_per_token < w[1].attention_macs_per_token));
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("n,ttt_macs,"));
}

#[test]
fn memory_estimate_matches_kernel_high_water_mark() {
    for (d, h) in [(16, 2), (64, 4)] {
        for n in [1, 3, 8, 20, 33] {
            for b in [1, 2, 5, n] {
                let cfg = TttConfig::new(d, h, b);
                let params = random_block::<f32>(&cfg, 7);
                let x = uniform::<f32>(&mut rng(8), n, d, 1.0);
                let mut kernel = StreamingKernel::new(&params, b).unwrap();
                kernel.forward_last(&x).unwrap();
                let strategy = if b == 1 { MemoryStrategy::Naive } else { MemoryStrategy::MiniBatch };
                assert_eq!(kernel.memory().peak() as u64, peak_memory_estimate(&cfg, n, strategy), "D={d} n={n} b={b}");
            }
        }
    }
}

#[test]
fn dual_form_memory_grows_quadratically() {
    let cfg = TttConfig::new(16, 2, 1);
    let m: Vec<u64> = (1..30).map(|n| peak_memory_estimate(&cfg, n, MemoryStrategy::DualForm)).collect();
    let first: Vec<i64> = m.windows(2).map(|w| w[1] as i64 - w[0] as i64).collect();
    assert!(first.windows(2).all(|w| w[1] - w[0] == 8));
    let naive = peak_memory_estimate(&cfg, 29, MemoryStrategy::Naive);
    assert_eq!(peak_memory_estimate(&cfg, 1, MemoryStrategy::DualForm), naive);
}
