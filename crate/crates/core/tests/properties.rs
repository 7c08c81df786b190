//! Property tests for the spec-level invariants that hold over arbitrary
//! inputs: softmax normalization, exact shape round-trips, metric axioms,
//! and ensemble convexity.

use proptest::prelude::*;
use spectraformer::ensemble::{topk_ensemble, EnsembleWeights};
use spectraformer::metrics;
use spectraformer::synth::SpectralCube;
use spectraformer::tensor::{Graph, Tensor};

fn finite_values(n: usize, magnitude: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-magnitude..magnitude, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // slices along the softmax axis sum to one, even at magnitude 1e3
    #[test]
    fn softmax_slices_sum_to_one(
        values in finite_values(24, 1e3),
        axis in 0usize..3,
    ) {
        let x = Tensor::new(vec![2, 3, 4], values).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let y = g.softmax(&xv, axis).unwrap();
        let t = y.tensor();
        let shape = [2usize, 3, 4];
        let d = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..d).map(|k| t.data()[o * d * inner + k * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "slice sum {s}");
                for k in 0..d {
                    let v = t.data()[o * d * inner + k * inner + i];
                    // exp underflows to exact zero at extreme spreads
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    // reshape and permute round-trips are bitwise in both value and gradient
    #[test]
    fn reshape_permute_round_trips_bitwise(
        values in finite_values(30, 10.0),
        weights in finite_values(30, 2.0),
    ) {
        let x = Tensor::new(vec![2, 3, 5], values).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let r = g.reshape(&xv, &[5, 6]).unwrap();
        let p = g.permute(&r, &[1, 0]).unwrap();
        let back = g.permute(&p, &[1, 0]).unwrap();
        let restored = g.reshape(&back, &[2, 3, 5]).unwrap();
        prop_assert_eq!(restored.tensor(), &x);

        let w = Tensor::new(vec![2, 3, 5], weights).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(&restored, &wv).unwrap();
        let loss = g.sum_all(&prod).unwrap();
        g.backward(&loss).unwrap();
        // gradient of sum(w * identity(x)) is exactly w
        prop_assert_eq!(g.grad(&xv).unwrap(), &w);
    }

    // rmse: symmetric, zero iff equal, bounded by the max absolute difference
    #[test]
    fn rmse_axioms(
        a in prop::collection::vec(0.0f32..1.0, 24),
        b in prop::collection::vec(0.0f32..1.0, 24),
    ) {
        let ca = SpectralCube::from_values(2, 4, 3, a.clone()).unwrap();
        let cb = SpectralCube::from_values(2, 4, 3, b.clone()).unwrap();
        let fwd = metrics::rmse(&ca, &cb).unwrap();
        let rev = metrics::rmse(&cb, &ca).unwrap();
        prop_assert_eq!(fwd, rev);
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        prop_assert!(fwd >= 0.0 && fwd <= max_diff + 1e-12);
        if a == b {
            prop_assert_eq!(fwd, 0.0);
        } else {
            prop_assert!(fwd > 0.0);
        }
    }

    // mrae is zero iff cubes are equal (with the eps clamp on zero truth)
    #[test]
    fn mrae_identity_of_indiscernibles(
        a in prop::collection::vec(0.0f32..1.0, 12),
        flip in 0usize..12,
        bump in 0.01f32..0.5,
    ) {
        let ca = SpectralCube::from_values(2, 2, 3, a.clone()).unwrap();
        prop_assert_eq!(metrics::mrae(&ca, &ca).unwrap(), 0.0);
        let mut b = a.clone();
        b[flip] = (b[flip] + bump).min(1.0);
        if b != a {
            let cb = SpectralCube::from_values(2, 2, 3, b).unwrap();
            prop_assert!(metrics::mrae(&ca, &cb).unwrap() > 0.0);
        }
    }

    // weighted fusion stays inside the elementwise envelope of its inputs
    #[test]
    fn topk_fusion_is_convex(
        a in prop::collection::vec(0.0f32..1.0, 18),
        b in prop::collection::vec(0.0f32..1.0, 18),
        c in prop::collection::vec(0.0f32..1.0, 18),
        w1 in 0.01f64..1.0,
        w2 in 0.01f64..1.0,
        w3 in 0.01f64..1.0,
    ) {
        let total = w1 + w2 + w3;
        let weights = EnsembleWeights::new(vec![w1 / total, w2 / total, w3 / total]).unwrap();
        let cubes = [
            SpectralCube::from_values(3, 2, 3, a).unwrap(),
            SpectralCube::from_values(3, 2, 3, b).unwrap(),
            SpectralCube::from_values(3, 2, 3, c).unwrap(),
        ];
        let fused = topk_ensemble(&cubes, &weights).unwrap();
        for i in 0..fused.values().len() {
            let lo = cubes.iter().map(|q| q.values()[i]).fold(f32::INFINITY, f32::min);
            let hi = cubes.iter().map(|q| q.values()[i]).fold(f32::NEG_INFINITY, f32::max);
            let v = fused.values()[i];
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    // the cube container is lossless for arbitrary finite payloads
    #[test]
    fn hsi1_round_trip_arbitrary(values in prop::collection::vec(-1e6f32..1e6, 24)) {
        let cube = SpectralCube::from_values(2, 3, 4, values).unwrap();
        let back = spectraformer::synth::cube_from_bytes(
            &spectraformer::synth::cube_to_bytes(&cube),
            "prop",
        ).unwrap();
        prop_assert_eq!(back, cube);
    }
}
