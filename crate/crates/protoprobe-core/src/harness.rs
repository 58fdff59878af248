//! Desk-scale validation loop: train small models under a growing
//! data-fraction schedule, checkpoint, and correlate the dataless metrics
//! with held-out accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{attack_set, AttackConfig};
use crate::data::{stratified_fraction, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_metrics, pearson, MetricReport, Thresholds};
use crate::network::{argmax, forward, parameter_gradients, ModelState, NetworkSpec};
use crate::synth::{synthesize_set, SynthConfig};

/// Cosine-annealed learning rate: `lr(0) = lr_max`, `lr(total) = lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr_max: 0.1, lr_min: 0.001, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Classification accuracy of a model over a dataset.
pub fn accuracy(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (x, &label) in dataset.inputs.iter().zip(&dataset.labels) {
        let (_, probs) = forward(model, x)?;
        if argmax(probs.data()) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Plain mini-batch SGD on the cross-entropy loss with a per-call cosine
/// annealed learning rate. Deterministic for a fixed seed.
pub fn train(model: &mut ModelState, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochStats>> {
    if dataset.class_count != model.class_count() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model has {}",
            dataset.class_count,
            model.class_count()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut stats = Vec::with_capacity(config.epochs);
    let anneal_span = config.epochs.saturating_sub(1);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, anneal_span, config.lr_max, config.lr_min);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(crate::tensor::Tensor, usize)> = chunk
                .iter()
                .map(|&i| (dataset.inputs[i].clone(), dataset.labels[i]))
                .collect();
            let result = parameter_gradients(model, &batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged(format!("epoch {epoch}: {e}")),
                other => other,
            })?;
            loss_sum += result.mean_loss;
            correct += result.correct;
            batches += 1;
            model.apply_sgd_step(&result.grads, lr)?;
        }
        stats.push(EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(stats)
}

/// Data-release schedule for a correlation study.
#[derive(Clone, Debug)]
pub struct StudySchedule {
    pub fractions: Vec<f64>,
    pub epochs_per_stage: usize,
    pub lr_first_stage: f64,
    pub lr_later_stages: f64,
    pub lr_min: f64,
}

impl Default for StudySchedule {
    fn default() -> Self {
        Self {
            fractions: vec![0.25, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0],
            epochs_per_stage: 25,
            lr_first_stage: 0.1,
            lr_later_stages: 0.05,
            lr_min: 0.001,
        }
    }
}

impl StudySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one fraction".into()));
        }
        for w in self.fractions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "fractions must be strictly increasing, got {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("fraction {f} outside (0,1]")));
            }
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::InvalidArgument("epochs_per_stage must be >= 1".into()));
        }
        if self.lr_first_stage <= 0.0 || self.lr_later_stages <= 0.0 {
            return Err(Error::InvalidArgument("stage learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One checkpoint of a study: accuracy and metrics after training on a
/// stage's data fraction.
#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub fraction: f64,
    pub cumulative_epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub m_g: f64,
    pub m_g_spread: (f64, f64),
    pub m_adv: f64,
    pub m_adv_spread: (f64, f64),
    pub excluded_attack_failures: usize,
}

#[derive(Clone, Debug)]
pub struct CorrelationStudy {
    pub records: Vec<CheckpointRecord>,
    pub pearson_g: f64,
    pub pearson_adv: f64,
    /// Stage-end model checkpoints, in fraction order.
    pub checkpoints: Vec<ModelState>,
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub schedule: StudySchedule,
    pub synth: SynthConfig,
    pub attack: AttackConfig,
    pub proto_seeds: Vec<u64>,
    pub train_seed: u64,
    pub batch_size: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            schedule: StudySchedule::default(),
            // Fixed synthesis budget: every checkpoint gets the same number
            // of update steps, so prototype quality differences reflect the
            // model, not the stopping rule.
            synth: SynthConfig {
                max_iterations: 120,
                confidence_target: 0.999_999_999_999,
                ..SynthConfig::default()
            },
            attack: AttackConfig::default(),
            proto_seeds: vec![1, 2, 3, 4, 5],
            train_seed: 0,
            batch_size: 64,
        }
    }
}

fn checkpoint_metrics(
    model: &ModelState,
    config: &StudyConfig,
) -> Result<MetricReport> {
    let protos = synthesize_set(model, &config.proto_seeds, &config.synth)?;
    let adversaries = attack_set(model, &protos, &config.attack)?;
    evaluate_metrics(model, &protos, &adversaries, Thresholds::default())
}

/// Warm-start training over the growing-fraction schedule; at each stage end
/// the test accuracy and the dataless metrics are recorded, and the Pearson
/// correlations computed at the end.
pub fn run_study(
    spec: &NetworkSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &StudyConfig,
) -> Result<CorrelationStudy> {
    config.schedule.validate()?;
    let mut model = ModelState::random_init(spec.clone(), config.train_seed)?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut cumulative_epochs = 0;
    for (stage, &fraction) in config.schedule.fractions.iter().enumerate() {
        let subset = stratified_fraction(train_set, fraction, config.train_seed)?;
        let lr_max = if stage == 0 {
            config.schedule.lr_first_stage
        } else {
            config.schedule.lr_later_stages
        };
        let train_cfg = TrainConfig {
            epochs: config.schedule.epochs_per_stage,
            batch_size: config.batch_size,
            lr_max,
            lr_min: config.schedule.lr_min,
            seed: config.train_seed.wrapping_add(stage as u64 * 7919),
        };
        train(&mut model, &subset, &train_cfg).map_err(|e| {
            Error::InvalidArgument(format!("stage {stage} (fraction {fraction}): {e}"))
        })?;
        cumulative_epochs += config.schedule.epochs_per_stage;

        let report = checkpoint_metrics(&model, config)
            .map_err(|e| Error::InvalidArgument(format!("stage {stage} metrics: {e}")))?;
        records.push(CheckpointRecord {
            fraction,
            cumulative_epochs,
            train_accuracy: accuracy(&model, &subset)?,
            test_accuracy: accuracy(&model, test_set)?,
            m_g: report.m_g,
            m_g_spread: report.m_g_spread,
            m_adv: report.m_adv,
            m_adv_spread: report.m_adv_spread,
            excluded_attack_failures: report.excluded_attack_failures,
        });
        checkpoints.push(model.clone());
    }
    let accs: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
    let m_gs: Vec<f64> = records.iter().map(|r| r.m_g).collect();
    let m_advs: Vec<f64> = records.iter().map(|r| r.m_adv).collect();
    let pearson_g = pearson(&m_gs, &accs)?;
    let pearson_adv = pearson(&m_advs, &accs)?;
    Ok(CorrelationStudy { records, pearson_g, pearson_adv, checkpoints })
}

/// CSV body for a study: one row per checkpoint plus a Pearson summary line.
pub fn render_study_csv(study: &CorrelationStudy, extra_header: &[String]) -> String {
    let mut out = String::new();
    for line in extra_header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str(
        "fraction,epochs,train_acc,test_acc,m_g,m_g_min,m_g_max,m_adv,m_adv_min,m_adv_max\n",
    );
    for r in &study.records {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.fraction,
            r.cumulative_epochs,
            r.train_accuracy,
            r.test_accuracy,
            r.m_g,
            r.m_g_spread.0,
            r.m_g_spread.1,
            r.m_adv,
            r.m_adv_spread.0,
            r.m_adv_spread.1
        ));
    }
    out.push_str(&format!(
        "# pearson_g={:.6} pearson_adv={:.6}\n",
        study.pearson_g, study.pearson_adv
    ));
    out
}

/// The reference desk configuration: an 8-class synthetic task and a
/// 3-conv + GAP + dense model with a 64-wide feature layer.
pub fn reference_spec() -> NetworkSpec {
    use crate::network::LayerSpec;
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 16, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 16, out_channels: 32, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 32, out_channels: 64, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { input: 64, output: 8 },
        ],
        input_shape: [1, 16, 16],
        class_count: 8,
        feature_index: 7,
    }
}

/// Reference desk dataset parameters: 100 train + 25 test per class at 16x16.
pub const REFERENCE_CLASSES: usize = 8;
pub const REFERENCE_TRAIN_PER_CLASS: usize = 100;
pub const REFERENCE_TEST_PER_CLASS: usize = 25;
pub const REFERENCE_SHAPE: [usize; 3] = [1, 16, 16];
pub const REFERENCE_DIFFICULTY: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_dataset;
    use crate::network::LayerSpec;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1, 0.001), 0.1);
        assert!((cosine_lr(10, 10, 0.1, 0.001) - 0.001).abs() < 1e-15);
    }

    fn small_spec(k: usize) -> NetworkSpec {
        NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 12, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { input: 12, output: k },
            ],
            input_shape: [1, 8, 8],
            class_count: k,
            feature_index: 3,
        }
    }

    #[test]
    fn tiny_model_memorizes_tiny_dataset() {
        let ds = gen_synthetic_dataset(2, 5, [1, 8, 8], 0.1, 3).unwrap();
        let mut model = ModelState::random_init(small_spec(2), 0).unwrap();
        let cfg = TrainConfig { epochs: 60, batch_size: 10, lr_max: 0.2, lr_min: 0.01, seed: 0 };
        train(&mut model, &ds, &cfg).unwrap();
        assert_eq!(accuracy(&model, &ds).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = gen_synthetic_dataset(2, 6, [1, 8, 8], 0.2, 4).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 4, lr_max: 0.1, lr_min: 0.001, seed: 9 };
        let mut a = ModelState::random_init(small_spec(2), 1).unwrap();
        let mut b = ModelState::random_init(small_spec(2), 1).unwrap();
        train(&mut a, &ds, &cfg).unwrap();
        train(&mut b, &ds, &cfg).unwrap();
        for (x, y) in a.parameter_tensors().iter().zip(b.parameter_tensors()) {
            assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn schedule_validation() {
        let mut s = StudySchedule::default();
        assert!(s.validate().is_ok());
        s.fractions = vec![0.5, 0.25];
        assert!(s.validate().is_err());
        s.fractions = vec![0.5, 1.5];
        assert!(s.validate().is_err());
        s.fractions = vec![];
        assert!(s.validate().is_err());
    }

    #[test]
    fn small_study_has_record_per_fraction() {
        let train_set = gen_synthetic_dataset(3, 20, [1, 8, 8], 0.6, 2).unwrap();
        let test_set = gen_synthetic_dataset(3, 10, [1, 8, 8], 0.6, 1002).unwrap();
        let config = StudyConfig {
            schedule: StudySchedule {
                fractions: vec![0.3, 0.6, 1.0],
                epochs_per_stage: 12,
                ..Default::default()
            },
            synth: SynthConfig { max_iterations: 40, ..Default::default() },
            proto_seeds: vec![1, 2],
            ..Default::default()
        };
        let study = run_study(&small_spec(3), &train_set, &test_set, &config).unwrap();
        assert_eq!(study.records.len(), 3);
        assert_eq!(study.checkpoints.len(), 3);
        let csv = render_study_csv(&study, &[]);
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("fraction")).count(), 3);
        assert!(csv.contains("pearson_g="));
    }
}
