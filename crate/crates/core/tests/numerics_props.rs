use cocorrec::numerics::{rmsnorm, softmax, Graph, Tensor};
use proptest::prelude::*;

fn row(len: std::ops::Range<usize>, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-mag..mag, len)
}

proptest! {
    #[test]
    fn softmax_normalises_large_inputs(x in row(1..40, 1e4)) {
        let t = Tensor::<f64>::new(vec![1, x.len()], x).unwrap();
        let s = softmax(&t).unwrap();
        prop_assert!(s.is_finite());
        prop_assert!((s.sum() - 1.0).abs() <= 1e-6);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn rmsnorm_positive_scale_invariance(x in row(2..16, 10.0), alpha in 1e-2f64..1e2) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let d = x.len();
        let t = Tensor::<f64>::new(vec![1, d], x).unwrap();
        let gain = Tensor::full(&[1, d], 1.0);
        let a = rmsnorm(&t, &gain, 0.0).unwrap();
        let b = rmsnorm(&t.scale(alpha), &gain, 0.0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(x in row(6..7, 3.0), w in row(6..7, 3.0)) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let ws: Vec<f32> = w.iter().map(|&v| v as f32).collect();
            let a = g.param(Tensor::new(vec![2, 3], xs).unwrap()).unwrap();
            let b = g.param(Tensor::new(vec![3, 2], ws).unwrap()).unwrap();
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m).unwrap();
            let l = g.sum(s).unwrap();
            let l = g.scale(l, 0.5).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(m).clone(), grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (m1, ga1, gb1) = run();
        let (m2, ga2, gb2) = run();
        prop_assert_eq!(m1.data(), m2.data());
        prop_assert_eq!(ga1.data(), ga2.data());
        prop_assert_eq!(gb1.data(), gb2.data());
    }
}
