//! Class prototype synthesis by normalized-gradient descent on a randomly
//! initialized input, driven only by the model parameters.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::network::{forward_full, input_gradient, log_softmax_f64, ModelState};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub confidence_target: f64,
    pub seed: u64,
    pub clip_to_unit_box: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iterations: 1000,
            confidence_target: 0.999,
            seed: 0,
            clip_to_unit_box: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(0.0 < self.confidence_target && self.confidence_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence target must lie in (0,1), got {}",
                self.confidence_target
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthStatus {
    Converged,
    IterationCap,
    VanishedGradient,
}

impl SynthStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthStatus::Converged => "converged",
            SynthStatus::IterationCap => "iteration_cap",
            SynthStatus::VanishedGradient => "vanished_gradient",
        }
    }
}

/// One synthesized class prototype with its convergence trace.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub class_index: usize,
    pub input: Tensor,
    pub target: Tensor,
    pub trace: Vec<f64>,
    pub final_confidence: f64,
    pub seed: u64,
    pub status: SynthStatus,
    pub iterations: usize,
}

/// K x S grid of prototypes (class-major), tied to a model fingerprint.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub prototypes: Vec<Prototype>,
    pub class_count: usize,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
}

impl PrototypeSet {
    pub fn get(&self, class: usize, seed_idx: usize) -> &Prototype {
        &self.prototypes[class * self.seeds.len() + seed_idx]
    }

    /// All prototypes for one seed, ordered by class.
    pub fn seed_slice(&self, seed_idx: usize) -> Vec<&Prototype> {
        (0..self.class_count).map(|k| self.get(k, seed_idx)).collect()
    }
}

/// One-hot probability vector for class `k` out of `class_count`.
pub fn one_hot(k: usize, class_count: usize) -> Result<Tensor> {
    if k >= class_count {
        return Err(Error::InvalidArgument(format!("class {k} out of range 0..{class_count}")));
    }
    let mut v = vec![0.0f32; class_count];
    v[k] = 1.0;
    Ok(Tensor::from_vec(v))
}

/// One normalized-gradient step: `p - alpha * grad / ||grad||`, optionally
/// clamped to the unit box.
pub fn synth_step(p: &Tensor, gradient: &Tensor, alpha: f64, clip: bool) -> Result<Tensor> {
    if p.shape() != gradient.shape() {
        return Err(Error::ShapeMismatch {
            context: "synth_step".into(),
            detail: format!("prototype {:?} vs gradient {:?}", p.shape(), gradient.shape()),
        });
    }
    let norm = gradient.l2_norm();
    if norm < 1e-12 {
        return Err(Error::VanishedGradient);
    }
    let scale = alpha / norm;
    let data: Vec<f32> = p
        .data()
        .iter()
        .zip(gradient.data())
        .map(|(&pv, &gv)| {
            let v = (pv as f64 - scale * gv as f64) as f32;
            if clip {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(p.shape().to_vec(), data)
}

/// Iterate the update rule against the one-hot target for class `k` until the
/// target-class confidence is reached or the iteration budget runs out.
/// Deterministic given (model, k, seed).
pub fn synthesize_prototype(model: &ModelState, k: usize, config: &SynthConfig) -> Result<Prototype> {
    config.validate()?;
    let class_count = model.class_count();
    let target = one_hot(k, class_count)?;
    let spec = model.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<f32> = (0..spec.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut p = Tensor::new(spec.input_shape.to_vec(), init)?;

    let mut trace = Vec::new();
    let mut status = SynthStatus::IterationCap;
    let mut final_confidence = 0.0f64;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        let pass = forward_full(model, &p)?;
        let loss = -log_softmax_f64(pass.logits().data())[k];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss for class {k}, seed {}", config.seed)));
        }
        iterations += 1;
        trace.push(loss);
        final_confidence = (-loss).exp();
        if final_confidence >= config.confidence_target {
            status = SynthStatus::Converged;
            break;
        }
        let grad = input_gradient(model, &p, &target)?;
        match synth_step(&p, &grad, config.learning_rate, config.clip_to_unit_box) {
            Ok(next) => p = next,
            Err(Error::VanishedGradient) => {
                status = SynthStatus::VanishedGradient;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if status == SynthStatus::IterationCap {
        // Report the confidence of the returned iterate, which has had one
        // more update than the last trace entry.
        let pass = forward_full(model, &p)?;
        final_confidence = log_softmax_f64(pass.logits().data())[k].exp();
    }
    Ok(Prototype {
        class_index: k,
        input: p,
        target,
        trace,
        final_confidence,
        seed: config.seed,
        status,
        iterations,
    })
}

/// Full K x S prototype grid; cells are independent and run in parallel.
pub fn synthesize_set(model: &ModelState, seeds: &[u64], config: &SynthConfig) -> Result<PrototypeSet> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list must be non-empty".into()));
    }
    let class_count = model.class_count();
    let cells: Vec<(usize, u64)> = (0..class_count)
        .flat_map(|k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let prototypes: Vec<Prototype> = cells
        .par_iter()
        .map(|&(k, seed)| {
            let cfg = SynthConfig { seed, ..config.clone() };
            synthesize_prototype(model, k, &cfg).map_err(|e| {
                Error::InvalidArgument(format!("prototype (class {k}, seed {seed}): {e}"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(PrototypeSet {
        prototypes,
        class_count,
        seeds: seeds.to_vec(),
        fingerprint: fingerprint(model)?,
    })
}

/// Write a prototype set as one raw tensor file per prototype plus a text
/// manifest (class, seed, status, confidence, iterations).
pub fn save_prototype_set<P: AsRef<Path>>(set: &PrototypeSet, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("model={}\n", set.fingerprint));
    manifest.push_str("class seed status final_confidence iterations file\n");
    for proto in &set.prototypes {
        let name = format!("proto_c{}_s{}.bin", proto.class_index, proto.seed);
        let mut file = std::fs::File::create(dir.join(&name))?;
        file.write_u32::<LittleEndian>(proto.input.len() as u32)?;
        for &v in proto.input.data() {
            file.write_u32::<LittleEndian>(v.to_bits())?;
        }
        manifest.push_str(&format!(
            "{} {} {} {:.6} {} {}\n",
            proto.class_index,
            proto.seed,
            proto.status.as_str(),
            proto.final_confidence,
            proto.iterations,
            name
        ));
    }
    let mut mf = std::fs::File::create(dir.join("manifest.txt"))?;
    mf.write_all(manifest.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerParams, LayerSpec, NetworkSpec};

    #[test]
    fn one_hot_basics() {
        assert_eq!(one_hot(2, 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap().data(), &[1.0]);
        assert!(one_hot(5, 3).is_err());
    }

    #[test]
    fn synth_step_takes_unit_scaled_step() {
        let p = Tensor::from_vec(vec![0.5, 0.5]);
        let g = Tensor::from_vec(vec![3.0, 4.0]);
        let next = synth_step(&p, &g, 0.1, false).unwrap();
        assert!((next.data()[0] - 0.44).abs() < 1e-6);
        assert!((next.data()[1] - 0.42).abs() < 1e-6);
    }

    #[test]
    fn synth_step_alpha_zero_keeps_p() {
        // alpha = 0 is rejected by SynthConfig but the step itself is the identity.
        let p = Tensor::from_vec(vec![0.3, 0.7]);
        let g = Tensor::from_vec(vec![1.0, -1.0]);
        let next = synth_step(&p, &g, 0.0, false).unwrap();
        assert_eq!(next.data(), p.data());
    }

    #[test]
    fn synth_step_flags_vanished_gradient() {
        let p = Tensor::from_vec(vec![0.5, 0.5]);
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        assert!(matches!(synth_step(&p, &g, 0.1, false), Err(Error::VanishedGradient)));
    }

    #[test]
    fn step_norm_equals_alpha_without_clipping() {
        let p = Tensor::from_vec(vec![0.5, 0.5, 0.5]);
        let g = Tensor::from_vec(vec![0.3, -1.2, 0.7]);
        let alpha = 0.05;
        let next = synth_step(&p, &g, alpha, false).unwrap();
        let norm: f64 = p
            .data()
            .iter()
            .zip(next.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((norm - alpha).abs() < 1e-6);
    }

    fn random_model(seed: u64) -> ModelState {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { input: 4, output: 3 },
            ],
            input_shape: [1, 8, 8],
            class_count: 3,
            feature_index: 3,
        };
        ModelState::random_init(spec, seed).unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_prototypes() {
        let model = random_model(11);
        let cfg = SynthConfig { max_iterations: 20, ..Default::default() };
        let a = synthesize_prototype(&model, 1, &cfg).unwrap();
        let b = synthesize_prototype(&model, 1, &cfg).unwrap();
        assert_eq!(a.input.data(), b.input.data());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn untrained_model_terminates_within_budget() {
        let model = random_model(5);
        let cfg = SynthConfig { max_iterations: 30, ..Default::default() };
        let proto = synthesize_prototype(&model, 0, &cfg).unwrap();
        assert!(proto.trace.len() <= 30);
        assert!(proto.input.is_finite());
        assert!(proto.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn set_has_full_grid_and_is_order_independent() {
        let model = random_model(2);
        let cfg = SynthConfig { max_iterations: 10, ..Default::default() };
        let set = synthesize_set(&model, &[1, 2], &cfg).unwrap();
        assert_eq!(set.prototypes.len(), 6);
        let permuted = synthesize_set(&model, &[2, 1], &cfg).unwrap();
        for k in 0..3 {
            assert_eq!(set.get(k, 0).input.data(), permuted.get(k, 1).input.data());
            assert_eq!(set.get(k, 1).input.data(), permuted.get(k, 0).input.data());
        }
    }

    #[test]
    fn empty_seed_list_rejected() {
        let model = random_model(2);
        assert!(synthesize_set(&model, &[], &SynthConfig::default()).is_err());
    }

    #[test]
    fn converged_trace_matches_confidence() {
        // A strongly separable affine model converges fast; on convergence the
        // last trace entry must equal -log(final_confidence).
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { input: 4, output: 2 }],
            input_shape: [1, 2, 2],
            class_count: 2,
            feature_index: 2,
        };
        let weights = Tensor::new(vec![2, 4], vec![8.0, 8.0, 8.0, 8.0, -8.0, -8.0, -8.0, -8.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 0.0]);
        let model = ModelState::new(
            spec,
            vec![LayerParams::Empty, LayerParams::Affine { weights, bias }],
        )
        .unwrap();
        let cfg = SynthConfig { max_iterations: 500, ..Default::default() };
        let proto = synthesize_prototype(&model, 0, &cfg).unwrap();
        assert_eq!(proto.status, SynthStatus::Converged);
        let last = *proto.trace.last().unwrap();
        assert!((last - (-proto.final_confidence.ln())).abs() < 1e-5);
    }
}
