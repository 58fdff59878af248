//! Feature-layer activation profiles: sorted prototype activations, optional
//! per-neuron training-data interquartile ranges, and the CSV export used for
//! plotting.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{forward, ModelState};
use crate::synth::Prototype;
use crate::tensor::Tensor;

/// Activation profile for one class: S x D prototype activations in a shared
/// neuron ordering, plus optional training-data quartiles.
#[derive(Clone, Debug)]
pub struct ActivationProfile {
    pub class_index: usize,
    /// Permutation of neuron indices; `sort_order[j]` is the original index
    /// of sorted column `j`. Ascending by mean prototype activation, ties
    /// broken by original index.
    pub sort_order: Vec<usize>,
    /// Seeds x neurons, columns in `sort_order`.
    pub prototype_activations: Vec<Vec<f32>>,
    pub seeds: Vec<u64>,
    pub train_q1: Option<Vec<f64>>,
    pub train_median: Option<Vec<f64>>,
    pub train_q3: Option<Vec<f64>>,
    /// Fraction of top-decile neurons whose every seed activation reaches the
    /// training q3. Present only with training data.
    pub iqr_exceedance: Option<f64>,
}

/// Feature vectors g(input) for a batch, one row per input.
pub fn feature_activations(model: &ModelState, inputs: &[Tensor]) -> Result<Vec<Vec<f32>>> {
    inputs
        .iter()
        .map(|x| forward(model, x).map(|(features, _)| features.data().to_vec()))
        .collect()
}

/// Linear-interpolation quantiles at positions q * (n - 1).
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quartiles of an empty sequence".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Ok((at(0.25), at(0.5), at(0.75)))
}

/// Build the profile for class `k` from its prototypes across seeds,
/// optionally overlaying class-`k` training-data IQRs.
pub fn build_profile(
    model: &ModelState,
    k: usize,
    prototypes: &[&Prototype],
    train_inputs: Option<&[Tensor]>,
) -> Result<ActivationProfile> {
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument(format!("no prototypes supplied for class {k}")));
    }
    for proto in prototypes {
        if proto.class_index != k {
            return Err(Error::InvalidArgument(format!(
                "prototype for class {} supplied to class-{k} profile",
                proto.class_index
            )));
        }
    }
    let proto_inputs: Vec<Tensor> = prototypes.iter().map(|p| p.input.clone()).collect();
    let raw = feature_activations(model, &proto_inputs)?;
    let d = raw[0].len();
    let s = raw.len();

    let mean: Vec<f64> = (0..d)
        .map(|j| raw.iter().map(|row| row[j] as f64).sum::<f64>() / s as f64)
        .collect();
    let mut sort_order: Vec<usize> = (0..d).collect();
    sort_order.sort_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap().then(a.cmp(&b)));

    let prototype_activations: Vec<Vec<f32>> = raw
        .iter()
        .map(|row| sort_order.iter().map(|&j| row[j]).collect())
        .collect();

    let (mut q1, mut median, mut q3, mut exceedance) = (None, None, None, None);
    if let Some(train) = train_inputs {
        let train_feats = feature_activations(model, train)?;
        if train_feats.is_empty() {
            return Err(Error::InvalidArgument("training input list is empty".into()));
        }
        let mut q1v = Vec::with_capacity(d);
        let mut mv = Vec::with_capacity(d);
        let mut q3v = Vec::with_capacity(d);
        for &j in &sort_order {
            let col: Vec<f64> = train_feats.iter().map(|row| row[j] as f64).collect();
            let (a, b, c) = quartiles(&col)?;
            q1v.push(a);
            mv.push(b);
            q3v.push(c);
        }
        // Top decile of the ascending ordering: the most activated neurons.
        let decile = (d + 9) / 10;
        let start = d - decile;
        let hits = (start..d)
            .filter(|&j| {
                prototype_activations.iter().all(|row| row[j] as f64 >= q3v[j])
            })
            .count();
        exceedance = Some(hits as f64 / decile as f64);
        q1 = Some(q1v);
        median = Some(mv);
        q3 = Some(q3v);
    }

    Ok(ActivationProfile {
        class_index: k,
        sort_order,
        prototype_activations,
        seeds: prototypes.iter().map(|p| p.seed).collect(),
        train_q1: q1,
        train_median: median,
        train_q3: q3,
        iqr_exceedance: exceedance,
    })
}

/// CSV columns: sorted_index, original_neuron, proto_seed_1..S, train_q1,
/// train_median, train_q3 (blank in dataless mode), one row per neuron.
pub fn render_profile_csv(profile: &ActivationProfile, extra_header: &[String]) -> String {
    let mut out = String::new();
    for line in extra_header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str(&format!("# class={}\n", profile.class_index));
    out.push_str(&format!(
        "# seeds={}\n",
        profile.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    out.push_str("# quantile_method=linear_interpolation_q_times_n_minus_1\n");
    if let Some(e) = profile.iqr_exceedance {
        out.push_str(&format!("# iqr_exceedance={e:.6}\n"));
    }
    let s = profile.prototype_activations.len();
    let mut header = vec!["sorted_index".to_string(), "original_neuron".to_string()];
    for i in 1..=s {
        header.push(format!("proto_seed_{i}"));
    }
    header.extend(["train_q1".into(), "train_median".into(), "train_q3".into()]);
    out.push_str(&header.join(","));
    out.push('\n');
    for (j, &orig) in profile.sort_order.iter().enumerate() {
        let mut row = vec![j.to_string(), orig.to_string()];
        for seed_row in &profile.prototype_activations {
            row.push(format!("{:.6}", seed_row[j]));
        }
        match (&profile.train_q1, &profile.train_median, &profile.train_q3) {
            (Some(q1), Some(m), Some(q3)) => {
                row.push(format!("{:.6}", q1[j]));
                row.push(format!("{:.6}", m[j]));
                row.push(format!("{:.6}", q3[j]));
            }
            _ => row.extend(["".to_string(), "".to_string(), "".to_string()]),
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn export_profile_csv<P: AsRef<Path>>(
    profile: &ActivationProfile,
    extra_header: &[String],
    destination: P,
) -> Result<()> {
    let mut file = std::fs::File::create(destination)?;
    file.write_all(render_profile_csv(profile, extra_header).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, ModelState, NetworkSpec};
    use crate::synth::{synthesize_set, SynthConfig};

    #[test]
    fn quartiles_linear_interpolation() {
        let (q1, m, q3) = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((q1 - 1.75).abs() < 1e-12);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((q3 - 3.25).abs() < 1e-12);
    }

    #[test]
    fn quartiles_constant_and_empty() {
        assert_eq!(quartiles(&[5.0, 5.0, 5.0]).unwrap(), (5.0, 5.0, 5.0));
        assert!(quartiles(&[]).is_err());
    }

    #[test]
    fn quartiles_match_brute_force_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let (q1, m, q3) = quartiles(&values).unwrap();
            // Definition-based check: interpolate order statistics directly.
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = |q: f64| {
                let pos = q * (sorted.len() as f64 - 1.0);
                let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
                sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - pos.floor())
            };
            assert!((q1 - oracle(0.25)).abs() < 1e-9);
            assert!((m - oracle(0.5)).abs() < 1e-9);
            assert!((q3 - oracle(0.75)).abs() < 1e-9);
        }
    }

    fn tiny_model() -> ModelState {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { input: 4, output: 2 },
            ],
            input_shape: [1, 6, 6],
            class_count: 2,
            feature_index: 3,
        };
        ModelState::random_init(spec, 21).unwrap()
    }

    #[test]
    fn feature_activations_consistent_with_forward() {
        let model = tiny_model();
        let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| i as f32 / 36.0).collect()).unwrap();
        let rows = feature_activations(&model, &[x.clone(), x.clone()]).unwrap();
        let (f, _) = forward(&model, &x).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], f.data());
        assert_eq!(rows[0], rows[1]);
        assert!(feature_activations(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn dataless_profile_has_no_iqr_fields() {
        let model = tiny_model();
        let set = synthesize_set(&model, &[1, 2], &SynthConfig { max_iterations: 10, ..Default::default() })
            .unwrap();
        let protos: Vec<&_> = (0..2).map(|s| set.get(0, s)).collect();
        let profile = build_profile(&model, 0, &protos, None).unwrap();
        assert!(profile.train_q1.is_none());
        assert!(profile.iqr_exceedance.is_none());
        // Sorting is a permutation.
        let mut order = profile.sort_order.clone();
        order.sort_unstable();
        assert_eq!(order, (0..order.len()).collect::<Vec<_>>());
        // Reference ordering is non-decreasing in the seed-mean activation.
        let d = profile.sort_order.len();
        let means: Vec<f64> = (0..d)
            .map(|j| {
                profile.prototype_activations.iter().map(|r| r[j] as f64).sum::<f64>()
                    / profile.prototype_activations.len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn adding_training_data_is_purely_additive() {
        let model = tiny_model();
        let set = synthesize_set(&model, &[1], &SynthConfig { max_iterations: 10, ..Default::default() })
            .unwrap();
        let protos: Vec<&_> = vec![set.get(1, 0)];
        let dataless = build_profile(&model, 1, &protos, None).unwrap();
        let train: Vec<Tensor> = (0..5)
            .map(|i| {
                Tensor::new(vec![1, 6, 6], (0..36).map(|j| ((i * 7 + j) % 10) as f32 / 10.0).collect())
                    .unwrap()
            })
            .collect();
        let with_data = build_profile(&model, 1, &protos, Some(&train)).unwrap();
        assert_eq!(dataless.sort_order, with_data.sort_order);
        assert_eq!(dataless.prototype_activations, with_data.prototype_activations);
        assert!(with_data.train_q1.is_some());
        assert!(with_data.iqr_exceedance.is_some());
        let (q1, m, q3) = (
            with_data.train_q1.as_ref().unwrap(),
            with_data.train_median.as_ref().unwrap(),
            with_data.train_q3.as_ref().unwrap(),
        );
        for j in 0..q1.len() {
            assert!(q1[j] <= m[j] + 1e-12 && m[j] <= q3[j] + 1e-12);
        }
    }

    #[test]
    fn csv_shape_matches_profile() {
        let model = tiny_model();
        let set = synthesize_set(&model, &[1, 2], &SynthConfig { max_iterations: 5, ..Default::default() })
            .unwrap();
        let protos: Vec<&_> = (0..2).map(|s| set.get(0, s)).collect();
        let profile = build_profile(&model, 0, &protos, None).unwrap();
        let csv = render_profile_csv(&profile, &[]);
        let data_rows: Vec<&str> =
            csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("sorted_index")).collect();
        assert_eq!(data_rows.len(), 4); // D = 4 feature neurons
        assert_eq!(data_rows[0].split(',').count(), 7); // 2 fixed + 2 seeds + 3 IQR
        assert!(data_rows[0].ends_with(",,,"));
    }
}
