//! Shared fixtures for the criterion benchmarks.

use protoprobe_core::network::{LayerSpec, ModelState, NetworkSpec};
use protoprobe_core::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub use rand;
pub use rand_chacha;

/// A small conv net in the shape of the reference desk model.
pub fn bench_model() -> ModelState {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 8, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { input: 16, output: 4 },
        ],
        input_shape: [1, 16, 16],
        class_count: 4,
        feature_index: 5,
    };
    ModelState::random_init(spec, 7).unwrap()
}

pub fn bench_input() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, 16, 16], data).unwrap()
}
