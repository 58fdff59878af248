//! Minimal-perturbation adversaries for class prototypes via the multiclass
//! L2 DeepFool attack, plus the closed-form affine oracle used to validate it.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::network::{argmax, backward_from_logits, forward_full, ModelState};
use crate::synth::PrototypeSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub overshoot: f64,
    pub clip_to_unit_box: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { max_iterations: 50, overshoot: 0.02, clip_to_unit_box: true }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if self.overshoot < 0.0 {
            return Err(Error::InvalidArgument(format!("overshoot must be >= 0, got {}", self.overshoot)));
        }
        Ok(())
    }
}

/// Outcome of one DeepFool attack. `delta` is the accumulated perturbation
/// before overshoot; `p_adv = clip(p + (1 + eta) * delta)`.
#[derive(Clone, Debug)]
pub struct AdversaryResult {
    pub class_index: usize,
    pub seed: u64,
    pub delta: Tensor,
    pub p_adv: Tensor,
    pub iterations_used: usize,
    pub original_label: usize,
    pub adversarial_label: usize,
    pub l2_norm: f64,
    pub success: bool,
}

/// Gradients of every logit with respect to the input, as a K x N matrix.
fn logit_jacobian(model: &ModelState, x: &Tensor) -> Result<(Vec<f32>, Vec<Vec<f64>>)> {
    let pass = forward_full(model, x)?;
    let k = model.class_count();
    let logits = pass.logits().data().to_vec();
    let rows = (0..k)
        .map(|j| {
            let mut cot = vec![0.0f64; k];
            cot[j] = 1.0;
            backward_from_logits(model, &pass, &cot, false).0
        })
        .collect();
    Ok((logits, rows))
}

/// Multiclass L2 DeepFool: repeatedly step toward the nearest linearized
/// decision boundary until the predicted label flips or the budget runs out.
pub fn deepfool(model: &ModelState, p: &Tensor, config: &AttackConfig) -> Result<AdversaryResult> {
    config.validate()?;
    let class_count = model.class_count();
    if class_count < 2 {
        return Err(Error::InvalidArgument("no adversary exists for a single-class model".into()));
    }
    let pass = forward_full(model, p)?;
    let original_label = argmax(pass.probs.data());

    let n = p.len();
    let x0: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let mut r_total = vec![0.0f64; n];
    let mut iterations_used = 0;
    let mut flipped = false;

    for _ in 0..config.max_iterations {
        // Iterates are evaluated at the projected point when box clipping is
        // on, so the search cannot declare victory outside the valid box.
        let xi: Vec<f32> = x0
            .iter()
            .zip(&r_total)
            .map(|(&x, &r)| {
                let v = (x + (1.0 + config.overshoot) * r) as f32;
                if config.clip_to_unit_box {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        let xi = Tensor::new(p.shape().to_vec(), xi)?;
        let (logits, grads) = logit_jacobian(model, &xi)?;
        let current = argmax(&logits);
        if current != original_label {
            flipped = true;
            break;
        }
        iterations_used += 1;

        // Nearest linearized boundary among all rival classes.
        let mut best: Option<(f64, usize)> = None;
        for j in 0..class_count {
            if j == original_label {
                continue;
            }
            let df = logits[j] as f64 - logits[original_label] as f64;
            let wdiff_norm_sq: f64 = grads[j]
                .iter()
                .zip(&grads[original_label])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if wdiff_norm_sq < 1e-24 {
                continue;
            }
            let dist = df.abs() / wdiff_norm_sq.sqrt();
            if best.map_or(true, |(d, _)| dist < d) {
                best = Some((dist, j));
            }
        }
        let (_, l) = match best {
            Some(b) => b,
            None => break, // every rival boundary is degenerate
        };
        let df = logits[l] as f64 - logits[original_label] as f64;
        let wdiff: Vec<f64> = grads[l]
            .iter()
            .zip(&grads[original_label])
            .map(|(a, b)| a - b)
            .collect();
        let wnorm_sq: f64 = wdiff.iter().map(|v| v * v).sum();
        // Small additive margin so an exactly-on-boundary step still crosses.
        let scale = (df.abs() + 1e-6) / wnorm_sq;
        for (r, w) in r_total.iter_mut().zip(&wdiff) {
            *r += scale * w;
        }
    }

    let delta = Tensor::new(p.shape().to_vec(), r_total.iter().map(|&v| v as f32).collect())?;
    let p_adv: Vec<f32> = x0
        .iter()
        .zip(&r_total)
        .map(|(&x, &r)| {
            let v = (x + (1.0 + config.overshoot) * r) as f32;
            if config.clip_to_unit_box {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    let p_adv = Tensor::new(p.shape().to_vec(), p_adv)?;
    // The success contract is judged on the final, projected adversary.
    let final_pass = forward_full(model, &p_adv)?;
    let adversarial_label = argmax(final_pass.probs.data());
    let success = flipped && adversarial_label != original_label;

    Ok(AdversaryResult {
        class_index: 0,
        seed: 0,
        l2_norm: delta.l2_norm(),
        delta,
        p_adv,
        iterations_used,
        original_label,
        adversarial_label,
        success,
    })
}

/// Closed-form minimal L2 perturbation for an affine multiclass classifier
/// with logits `s = W x + b`: for each rival class the boundary is a
/// hyperplane, and the nearest one wins.
pub fn affine_minimal_perturbation(
    weights: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    current_class: usize,
) -> Result<(Tensor, f64)> {
    let k = weights.shape()[0];
    let n = weights.shape()[1];
    if bias.len() != k || x.len() != n || current_class >= k {
        return Err(Error::InvalidArgument("affine oracle argument shapes disagree".into()));
    }
    let w = weights.data();
    let scores: Vec<f64> = (0..k)
        .map(|j| {
            bias.data()[j] as f64
                + (0..n).map(|i| w[j * n + i] as f64 * x.data()[i] as f64).sum::<f64>()
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for j in 0..k {
        if j == current_class {
            continue;
        }
        let wdiff: Vec<f64> = (0..n)
            .map(|i| w[j * n + i] as f64 - w[current_class * n + i] as f64)
            .collect();
        let wnorm_sq: f64 = wdiff.iter().map(|v| v * v).sum();
        if wnorm_sq < 1e-24 {
            continue;
        }
        let margin = scores[current_class] - scores[j];
        let norm = margin.abs() / wnorm_sq.sqrt();
        if best.as_ref().map_or(true, |(d, _)| norm < *d) {
            let delta: Vec<f64> = wdiff.iter().map(|v| margin / wnorm_sq * v).collect();
            best = Some((norm, delta));
        }
    }
    match best {
        Some((norm, delta)) => Ok((
            Tensor::new(x.shape().to_vec(), delta.iter().map(|&v| v as f32).collect())?,
            norm,
        )),
        None => Err(Error::InvalidArgument(
            "degenerate boundary: all rival weight rows equal the current row".into(),
        )),
    }
}

/// Attack every prototype in a set. Per-item failures are reported in the
/// result, not fatal; a fingerprint mismatch is.
pub fn attack_set(
    model: &ModelState,
    protos: &PrototypeSet,
    config: &AttackConfig,
) -> Result<Vec<AdversaryResult>> {
    config.validate()?;
    let fp = fingerprint(model)?;
    if fp != protos.fingerprint {
        return Err(Error::FingerprintMismatch { expected: protos.fingerprint.clone(), actual: fp });
    }
    protos
        .prototypes
        .par_iter()
        .map(|proto| {
            let mut result = deepfool(model, &proto.input, config)?;
            result.class_index = proto.class_index;
            result.seed = proto.seed;
            Ok(result)
        })
        .collect()
}

/// Write adversary results as a text table plus raw `p_adv` tensors.
pub fn save_adversaries<P: AsRef<Path>>(results: &[AdversaryResult], dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut table = String::new();
    table.push_str("class seed success original_label adversarial_label delta_l2 iterations file\n");
    for r in results {
        let name = format!("adv_c{}_s{}.bin", r.class_index, r.seed);
        let mut file = std::fs::File::create(dir.join(&name))?;
        file.write_u32::<LittleEndian>(r.p_adv.len() as u32)?;
        for &v in r.p_adv.data() {
            file.write_u32::<LittleEndian>(v.to_bits())?;
        }
        table.push_str(&format!(
            "{} {} {} {} {} {:.6} {} {}\n",
            r.class_index,
            r.seed,
            r.success,
            r.original_label,
            r.adversarial_label,
            r.l2_norm,
            r.iterations_used,
            name
        ));
    }
    let mut tf = std::fs::File::create(dir.join("adversaries.txt"))?;
    tf.write_all(table.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerParams, LayerSpec, NetworkSpec};
    use crate::synth::{synthesize_set, SynthConfig};

    fn affine_model(weights: Vec<f32>, bias: Vec<f32>, n: usize, k: usize) -> ModelState {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { input: n, output: k }],
            input_shape: [n, 1, 1],
            class_count: k,
            feature_index: 1,
        };
        ModelState::new(
            spec,
            vec![
                LayerParams::Empty,
                LayerParams::Affine {
                    weights: Tensor::new(vec![k, n], weights).unwrap(),
                    bias: Tensor::new(vec![k], bias).unwrap(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn oracle_matches_bisector_geometry() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let x = Tensor::from_vec(vec![2.0, 0.0]);
        let (delta, norm) = affine_minimal_perturbation(&w, &b, &x, 0).unwrap();
        assert!((norm - 2.0f64.sqrt()).abs() < 1e-6);
        assert!((delta.data()[0] - -1.0).abs() < 1e-6);
        assert!((delta.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_on_boundary_gives_zero_norm() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let (_, norm) = affine_minimal_perturbation(&w, &b, &x, 0).unwrap();
        assert!(norm.abs() < 1e-6);
    }

    #[test]
    fn oracle_selects_near_boundary_among_three() {
        // Class 0 current; class 1 boundary much closer than class 2.
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -5.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        let x = Tensor::from_vec(vec![1.5, 0.0]);
        let (_, norm) = affine_minimal_perturbation(&w, &b, &x, 0).unwrap();
        // Brute force over the two per-class closed forms.
        let d1 = 1.5 / 2.0f64.sqrt();
        let d2 = (1.5 - -7.5) / 36.0f64.sqrt();
        assert!((norm - d1.min(d2)).abs() < 1e-9);
    }

    #[test]
    fn oracle_rejects_degenerate_boundary() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let x = Tensor::from_vec(vec![2.0, 0.0]);
        assert!(affine_minimal_perturbation(&w, &b, &x, 0).is_err());
    }

    #[test]
    fn deepfool_matches_affine_oracle() {
        let model = affine_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![2.0, 0.0]).unwrap();
        let cfg = AttackConfig { overshoot: 0.0, clip_to_unit_box: false, max_iterations: 50 };
        let result = deepfool(&model, &x, &cfg).unwrap();
        assert!(result.success);
        assert_ne!(result.adversarial_label, result.original_label);
        let rel = (result.l2_norm - 2.0f64.sqrt()).abs() / 2.0f64.sqrt();
        assert!(rel < 0.1, "relative gap {rel}");
    }

    #[test]
    fn single_class_rejected() {
        let model = affine_model(vec![1.0, 0.0], vec![0.0], 2, 1);
        let x = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(deepfool(&model, &x, &AttackConfig::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_failure_with_partial_delta() {
        // One iteration on a far-from-boundary input of a steep model.
        let model = affine_model(vec![10.0, 0.0, 0.0, 0.1], vec![5.0, -5.0], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.9, 0.1]).unwrap();
        let cfg = AttackConfig { max_iterations: 1, overshoot: 0.0, clip_to_unit_box: true };
        let result = deepfool(&model, &x, &cfg).unwrap();
        if !result.success {
            assert_eq!(result.iterations_used, 1);
        }
    }

    #[test]
    fn attack_set_covers_grid_and_checks_fingerprint() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { input: 4, output: 3 },
            ],
            input_shape: [1, 6, 6],
            class_count: 3,
            feature_index: 3,
        };
        let model = ModelState::random_init(spec.clone(), 9).unwrap();
        let protos = synthesize_set(
            &model,
            &[1, 2],
            &SynthConfig { max_iterations: 15, ..Default::default() },
        )
        .unwrap();
        let results = attack_set(&model, &protos, &AttackConfig::default()).unwrap();
        assert_eq!(results.len(), 6);

        let rerun = attack_set(&model, &protos, &AttackConfig::default()).unwrap();
        for (a, b) in results.iter().zip(&rerun) {
            assert_eq!(a.p_adv.data(), b.p_adv.data());
        }

        let other = ModelState::random_init(spec, 10).unwrap();
        assert!(matches!(
            attack_set(&other, &protos, &AttackConfig::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
