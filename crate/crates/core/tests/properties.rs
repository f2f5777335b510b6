//! Property tests for invariants the certificate relies on.

use kkl_core::certificate::{
    ez_transient, ez_ultimate, x_ultimate, x_ultimate_noisy, CertifiedQuantities,
};
use kkl_core::certify::relax_tanh;
use kkl_core::dynamics::LinearSystem;
use kkl_core::interval::{AxisBox, Interval};
use kkl_core::kkl::{pde_residual, sample_noise, LearnedObserver};
use kkl_core::linalg::{DenseMatrix, GammaChoice, ObserverDesign};
use kkl_core::net::Mlp;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn interval() -> impl Strategy<Value = (Interval, f64)> {
    (-5.0..5.0f64, 0.0..3.0f64, 0.0..=1.0f64)
        .prop_map(|(lo, w, t)| (Interval::new(lo, lo + w), lo + t * w))
}

fn rates() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2..12.0f64, 1..6)
}

fn design(r: &[f64]) -> ObserverDesign {
    ObserverDesign::diagonal(r, DenseMatrix::column(&vec![1.0; r.len()])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn interval_ops_contain_point_results((a, x) in interval(), (b, y) in interval()) {
        prop_assert!((a + b).contains(x + y));
        prop_assert!((a - b).contains(x - y));
        prop_assert!((a * b).contains(x * y));
        prop_assert!(a.square().contains(x * x));
        prop_assert!(a.cube().contains(x * x * x));
        prop_assert!(a.tanh().contains(x.tanh()));
        let t = x.tanh();
        prop_assert!(a.tanh_derivative().contains(1.0 - t * t));
    }

    #[test]
    fn tanh_relaxation_sandwiches(l in -6.0..6.0f64, w in 1e-6..6.0f64, t in 0.0..=1.0f64) {
        let u = l + w;
        let x = l + t * w;
        let r = relax_tanh(l, u);
        let slack = 1e-12;
        prop_assert!(r.lower_slope * x + r.lower_offset <= x.tanh() + slack);
        prop_assert!(r.upper_slope * x + r.upper_offset >= x.tanh() - slack);
    }

    #[test]
    fn bisection_covers_the_box(c in prop::collection::vec(-3.0..3.0f64, 1..4), w in 0.01..2.0f64, seed in any::<u64>()) {
        let b = AxisBox::symmetric(c.len(), w);
        let b = AxisBox::new(
            b.lower.iter().zip(&c).map(|(l, c)| l + c).collect(),
            b.upper.iter().zip(&c).map(|(u, c)| u + c).collect(),
        ).unwrap();
        let (l, r) = b.bisect();
        prop_assert!((l.volume() + r.volume() - b.volume()).abs() <= 1e-12 * b.volume());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = b.sample_with(&mut rng);
            prop_assert!(b.contains(&p));
            prop_assert!(l.contains(&p) || r.contains(&p));
        }
    }

    #[test]
    fn ultimate_bound_is_monotone(r in rates(), res in 0.0..1.0f64, lip in 0.1..300.0f64, rec in 0.0..0.5f64, k in 1.0..3.0f64) {
        let d = design(&r);
        let base = x_ultimate(&d, &CertifiedQuantities::new(res, lip, rec)).unwrap();
        for q in [
            CertifiedQuantities::new(res * k, lip, rec),
            CertifiedQuantities::new(res, lip * k, rec),
            CertifiedQuantities::new(res, lip, rec * k),
        ] {
            prop_assert!(x_ultimate(&d, &q).unwrap() >= base);
        }
        prop_assert!(x_ultimate(&d, &CertifiedQuantities::new(0.0, lip, rec)).unwrap() == rec);
    }

    #[test]
    fn ez_bound_is_linear_in_the_residual(r in rates(), res in 0.0..1.0f64, k in 0.0..10.0f64) {
        let d = design(&r);
        let a = ez_ultimate(&d, GammaChoice::Optimized, res).unwrap();
        let b = ez_ultimate(&d, GammaChoice::Optimized, k * res).unwrap();
        prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn transient_bound_decreases_to_the_ultimate_bound(r in rates(), res in 0.0..1.0f64, v0 in 0.0..10.0f64) {
        let d = design(&r);
        let ult = ez_ultimate(&d, GammaChoice::Optimized, res).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let v = ez_transient(&d, GammaChoice::Optimized, res, v0, i as f64 * 0.25).unwrap();
            prop_assert!(v <= prev);
            prop_assert!(v >= ult * (1.0 - 1e-12));
            prev = v;
        }
    }

    #[test]
    fn noise_only_loosens_the_bound(r in rates(), res in 1e-6..1.0f64, lip in 0.1..300.0f64, rec in 0.0..0.5f64, v in 0.0..0.5f64) {
        let d = design(&r);
        let q = CertifiedQuantities::new(res, lip, rec);
        let clean = x_ultimate(&d, &q).unwrap();
        let noisy = x_ultimate_noisy(&d, GammaChoice::Optimized, &q.clone().with_noise(v)).unwrap();
        prop_assert!(noisy.bound >= clean * (1.0 - 1e-12));
        prop_assert!(noisy.eps_r > 0.0 && noisy.eps_v >= 0.0 && noisy.eps_r + noisy.eps_v < 1.0);
    }

    #[test]
    fn noise_samples_respect_the_bound(seed in any::<u64>(), dim in 1usize..5, bound in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let v = sample_noise(&mut rng, dim, bound);
            prop_assert!(v.iter().map(|a| a * a).sum::<f64>().sqrt() <= bound);
        }
    }

    #[test]
    fn composed_network_matches_sequential_evaluation(seed in any::<u64>(), x in prop::collection::vec(-2.0..2.0f64, 2)) {
        let f = Mlp::xavier(&[2, 7, 3], seed);
        let g = Mlp::xavier(&[3, 5, 2], seed.wrapping_add(1));
        let h = f.then(&g).unwrap();
        let a = h.forward(&x).unwrap();
        let b = g.forward(&f.forward(&x).unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_linear_map_solves_the_pde(w in 0.3..3.0f64, damping in 0.0..0.5f64, x in prop::collection::vec(-4.0..4.0f64, 2)) {
        let f = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-w * w, -damping]]).unwrap();
        let h = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let d = design(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let obs = LearnedObserver::exact_linear(d, &f, &h).unwrap();
        let r = pde_residual(&obs, &LinearSystem { f, h }, &x).unwrap();
        prop_assert!(r.iter().all(|v| v.abs() <= 1e-9), "{:?}", r);
    }
}
