use nalgebra::{DMatrix, DVector};
use ntklab::loss::{center_project, softmax, softmax_ref};
use ntklab::net::{flatten, unflatten};
use ntklab::{linalg, ArchSpec, NetSnapshot, TargetSet};
use proptest::prelude::*;

proptest! {
    #[test]
    fn parameter_layout_round_trips(depth in 1usize..4, width in 1usize..9, d in 1usize..5, k in 1usize..4, seed in 0u64..1000) {
        let arch = ArchSpec::uniform(depth, width, d, k, 1.5, 0.1);
        let net = NetSnapshot::init(&arch, seed).unwrap();
        prop_assert_eq!(flatten(&unflatten(&arch, &net.theta)), net.theta.clone());
        prop_assert_eq!(net.theta.len(), net.param_count());
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..6)) {
        let s = softmax(&z);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let (r, p0) = softmax_ref(&z);
        prop_assert!((r.iter().sum::<f64>() + p0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_targets_are_distributions(labels in prop::collection::vec(0usize..4, 1..8), eps in 0.0f64..0.99) {
        let t = TargetSet::smoothed(&labels, 4, eps).unwrap();
        for (i, row) in t.probs.row_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row[labels[i]] >= row.max() - 1e-15);
        }
    }

    #[test]
    fn kron_apply_matches_expansion(n in 1usize..5, k in 1usize..4, seed in 0u64..1000) {
        let m = DMatrix::from_fn(n, n, |i, j| ((seed as usize + 3 * i + 7 * j) % 11) as f64 - 5.0);
        let v = DVector::from_fn(n * k, |i, _| (i as f64 + seed as f64).sin());
        let dense = linalg::kron_expand(&m, k) * &v;
        prop_assert!((linalg::kron_apply(&m, &v, k) - dense).amax() < 1e-12);
    }

    #[test]
    fn centering_is_a_projection(z in prop::collection::vec(-10.0f64..10.0, 6)) {
        let z = DVector::from_vec(z);
        let p = center_project(&z, 3).unwrap();
        prop_assert!((center_project(&p, 3).unwrap() - &p).amax() < 1e-12);
        for c in p.as_slice().chunks(3) {
            prop_assert!(c.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
