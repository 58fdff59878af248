//! Property-based invariants: model persistence round-trips bit-exactly and
//! M_g is invariant under class permutations and prototype rescaling.

use proptest::prelude::*;
use protoprobe_core::io::{model_from_bytes, model_to_bytes};
use protoprobe_core::metrics::{cosine_similarity, metric_g, GramMatrix};
use protoprobe_core::network::{LayerSpec, ModelState, NetworkSpec};

fn random_dense_model(input: usize, hidden: usize, classes: usize, seed: u64) -> ModelState {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { input, output: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { input: hidden, output: classes },
        ],
        input_shape: [input, 1, 1],
        class_count: classes,
        feature_index: 3,
    };
    ModelState::random_init(spec, seed).unwrap()
}

fn gram_from_features(rows: &[Vec<f32>]) -> GramMatrix {
    let k = rows.len();
    let d = rows[0].len();
    let mut g = Vec::with_capacity(k * d);
    for row in rows {
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        g.extend(row.iter().map(|&v| v as f64 / norm));
    }
    let mut ggt = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            ggt[a * k + b] = (0..d).map(|i| g[a * d + i] * g[b * d + i]).sum();
        }
    }
    GramMatrix { g, class_count: k, feature_dim: d, ggt }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_round_trip_is_bit_exact(
        input in 1usize..6,
        hidden in 1usize..8,
        classes in 2usize..5,
        seed in 0u64..1000,
    ) {
        let model = random_dense_model(input, hidden, classes, seed);
        let bytes = model_to_bytes(&model).unwrap();
        let restored = model_from_bytes(&bytes).unwrap();
        prop_assert_eq!(bytes, model_to_bytes(&restored).unwrap());
    }

    #[test]
    fn metric_g_is_permutation_invariant(
        rows in prop::collection::vec(
            prop::collection::vec(0.01f32..1.0, 6),
            2..6,
        ),
        swap_a in 0usize..6,
        swap_b in 0usize..6,
    ) {
        let k = rows.len();
        let base = metric_g(&gram_from_features(&rows));
        let mut permuted = rows.clone();
        permuted.swap(swap_a % k, swap_b % k);
        let after = metric_g(&gram_from_features(&permuted));
        prop_assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn cosine_is_scale_free(
        v in prop::collection::vec(0.01f32..1.0, 4),
        w in prop::collection::vec(0.01f32..1.0, 4),
        scale in 0.5f32..20.0,
    ) {
        let base = cosine_similarity(&v, &w).unwrap();
        let scaled: Vec<f32> = v.iter().map(|&x| x * scale).collect();
        let after = cosine_similarity(&scaled, &w).unwrap();
        prop_assert!((base - after).abs() < 1e-5);
    }
}
