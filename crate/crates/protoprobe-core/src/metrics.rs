//! Dataless quality metrics: prototype feature dissimilarity (M_g),
//! prototype-adversary dissimilarity (M_adv), Pearson correlation, and the
//! threshold verdicts.

use crate::adversary::AdversaryResult;
use crate::error::{Error, Result};
use crate::network::{forward, ModelState};
use crate::synth::{Prototype, PrototypeSet};

/// Unit feature rows of the per-class prototypes and their K x K similarity
/// matrix.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    /// K x D, row-major, every row unit-norm.
    pub g: Vec<f64>,
    pub class_count: usize,
    pub feature_dim: usize,
    /// K x K, `ggt[a * K + b] = cos(g_a, g_b)`.
    pub ggt: Vec<f64>,
}

/// Cosine similarity of two vectors; both must have positive norm.
pub fn cosine_similarity(v1: &[f32], v2: &[f32]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity length mismatch: {} vs {}",
            v1.len(),
            v2.len()
        )));
    }
    let n1: f64 = v1.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let n2: f64 = v2.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if n1 <= 0.0 || n2 <= 0.0 {
        return Err(Error::DegenerateFeature("zero-norm vector in cosine similarity".into()));
    }
    let dot: f64 = v1.iter().zip(v2).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok(dot / (n1 * n2))
}

/// Unit feature rows for one seed's prototypes (one per class, class order).
pub fn gram_rows(model: &ModelState, prototypes: &[&Prototype]) -> Result<GramMatrix> {
    let k = model.class_count();
    if prototypes.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected one prototype per class ({k}), got {}",
            prototypes.len()
        )));
    }
    let d = model.spec().feature_dim()?;
    let mut g = Vec::with_capacity(k * d);
    for proto in prototypes {
        let (features, _) = forward(model, &proto.input)?;
        let norm = features.l2_norm();
        if norm <= 0.0 {
            return Err(Error::DegenerateFeature(format!(
                "zero feature vector for class {}",
                proto.class_index
            )));
        }
        g.extend(features.data().iter().map(|&v| v as f64 / norm));
    }
    let mut ggt = vec![0.0f64; k * k];
    for a in 0..k {
        for b in 0..k {
            ggt[a * k + b] = (0..d).map(|i| g[a * d + i] * g[b * d + i]).sum();
        }
    }
    Ok(GramMatrix { g, class_count: k, feature_dim: d, ggt })
}

/// Mean prototype dissimilarity: one minus the mean of all K^2 pairwise
/// cosine similarities, diagonal included.
pub fn metric_g(gram: &GramMatrix) -> f64 {
    let k = gram.class_count;
    // Summing in sorted order makes the result exactly invariant under class
    // permutations, which only reorder the entries of GGT.
    let mut entries = gram.ggt.clone();
    entries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    1.0 - entries.iter().sum::<f64>() / (k * k) as f64
}

/// Per-class prototype/adversary feature similarities for one seed. Failed
/// attacks are excluded; the caller sees how many.
pub struct AdvSimilarity {
    pub m_adv: f64,
    pub per_class: Vec<Option<f64>>,
    pub excluded: usize,
}

pub fn metric_adv(
    model: &ModelState,
    prototypes: &[&Prototype],
    adversaries: &[&AdversaryResult],
) -> Result<AdvSimilarity> {
    if prototypes.len() != adversaries.len() {
        return Err(Error::InvalidArgument("prototype/adversary count mismatch".into()));
    }
    let mut per_class = Vec::with_capacity(prototypes.len());
    let mut sum = 0.0f64;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (proto, adv) in prototypes.iter().zip(adversaries) {
        if proto.class_index != adv.class_index {
            return Err(Error::InvalidArgument(format!(
                "prototype class {} paired with adversary class {}",
                proto.class_index, adv.class_index
            )));
        }
        if !adv.success {
            excluded += 1;
            per_class.push(None);
            continue;
        }
        let (pf, _) = forward(model, &proto.input)?;
        let (af, _) = forward(model, &adv.p_adv)?;
        let sim = cosine_similarity(pf.data(), af.data())?;
        sum += sim;
        included += 1;
        per_class.push(Some(sim));
    }
    if included == 0 {
        return Err(Error::NoAdversaries);
    }
    Ok(AdvSimilarity { m_adv: 1.0 - sum / included as f64, per_class, excluded })
}

/// Arithmetic mean with (min, max) spread.
pub fn aggregate_over_seeds(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero values".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((mean, min, max))
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length sequences of >= 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance in an input sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Verdict thresholds; defaults follow the empirical guidance of 0.8 for
/// accuracy and 0.35 for robustness.
#[derive(Clone, Copy, Debug)]
pub struct Thresholds {
    pub m_g: f64,
    pub m_adv: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { m_g: 0.8, m_adv: 0.35 }
    }
}

/// Full dataless evaluation result for one model.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub m_g: f64,
    pub m_adv: f64,
    pub m_g_spread: (f64, f64),
    pub m_adv_spread: (f64, f64),
    /// Seed-mean K x K similarity matrix.
    pub ggt_mean: Vec<f64>,
    pub class_count: usize,
    /// Seed-mean prototype/adversary similarity per class (None when every
    /// seed's attack on that class failed).
    pub per_class_adv_similarity: Vec<Option<f64>>,
    pub excluded_attack_failures: usize,
    pub seeds_used: Vec<u64>,
    pub feature_nonnegative: bool,
    pub thresholds: Thresholds,
    pub verdict_accuracy: bool,
    pub verdict_robustness: bool,
    pub fingerprint: String,
}

/// Apply the threshold verdicts ("or higher" is inclusive).
pub fn quality_report(m_g: f64, m_adv: f64, thresholds: Thresholds) -> (bool, bool) {
    (m_g >= thresholds.m_g, m_adv >= thresholds.m_adv)
}

/// Per-seed metrics then mean across seeds.
pub fn evaluate_metrics(
    model: &ModelState,
    protos: &PrototypeSet,
    adversaries: &[AdversaryResult],
    thresholds: Thresholds,
) -> Result<MetricReport> {
    let k = protos.class_count;
    let s = protos.seeds.len();
    if adversaries.len() != k * s {
        return Err(Error::InvalidArgument(format!(
            "expected {} adversaries, got {}",
            k * s,
            adversaries.len()
        )));
    }
    let mut m_g_per_seed = Vec::with_capacity(s);
    let mut m_adv_per_seed = Vec::with_capacity(s);
    let mut ggt_mean = vec![0.0f64; k * k];
    let mut adv_sums = vec![(0.0f64, 0usize); k];
    let mut excluded = 0usize;
    let mut feature_nonnegative = true;

    for seed_idx in 0..s {
        let protos_seed = protos.seed_slice(seed_idx);
        for proto in &protos_seed {
            let (features, _) = forward(model, &proto.input)?;
            if features.data().iter().any(|&v| v < 0.0) {
                feature_nonnegative = false;
            }
        }
        let gram = gram_rows(model, &protos_seed)?;
        m_g_per_seed.push(metric_g(&gram));
        for (acc, v) in ggt_mean.iter_mut().zip(&gram.ggt) {
            *acc += v / s as f64;
        }

        let advs_seed: Vec<&AdversaryResult> = protos_seed
            .iter()
            .map(|p| {
                adversaries
                    .iter()
                    .find(|a| a.class_index == p.class_index && a.seed == p.seed)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "missing adversary for (class {}, seed {})",
                            p.class_index, p.seed
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        let adv = metric_adv(model, &protos_seed, &advs_seed)?;
        m_adv_per_seed.push(adv.m_adv);
        excluded += adv.excluded;
        for (slot, sim) in adv_sums.iter_mut().zip(&adv.per_class) {
            if let Some(v) = sim {
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }

    let (m_g, g_min, g_max) = aggregate_over_seeds(&m_g_per_seed)?;
    let (m_adv, a_min, a_max) = aggregate_over_seeds(&m_adv_per_seed)?;
    let per_class_adv_similarity = adv_sums
        .iter()
        .map(|&(sum, n)| if n > 0 { Some(sum / n as f64) } else { None })
        .collect();
    let (verdict_accuracy, verdict_robustness) = quality_report(m_g, m_adv, thresholds);
    Ok(MetricReport {
        m_g,
        m_adv,
        m_g_spread: (g_min, g_max),
        m_adv_spread: (a_min, a_max),
        ggt_mean,
        class_count: k,
        per_class_adv_similarity,
        excluded_attack_failures: excluded,
        seeds_used: protos.seeds.clone(),
        feature_nonnegative,
        thresholds,
        verdict_accuracy,
        verdict_robustness,
        fingerprint: protos.fingerprint.clone(),
    })
}

/// Render a report as text. `extra_header` lines (already formatted as
/// `key=value`) are emitted after the fingerprint; timestamps, if any, must
/// stay in there.
pub fn render_report(report: &MetricReport, extra_header: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!("model={}\n", report.fingerprint));
    for line in extra_header {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!(
        "seeds={}\n",
        report.seeds_used.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    out.push_str(&format!(
        "thresholds: m_g>={} m_adv>={}\n",
        report.thresholds.m_g, report.thresholds.m_adv
    ));
    if !report.feature_nonnegative {
        out.push_str("note: feature layer has negative activations; metric range is [0,2]\n");
    }
    let k = report.class_count;
    // Eq-verbatim averaging keeps the diagonal, so M_g can never exceed 1 - 1/K.
    out.push_str(&format!("m_g ceiling for K={}: {:.6}\n", k, 1.0 - 1.0 / k as f64));
    out.push_str(&format!("excluded_attack_failures={}\n", report.excluded_attack_failures));
    out.push_str("gram (seed-mean cosine similarities):\n");
    for a in 0..k {
        let row: Vec<String> =
            (0..k).map(|b| format!("{:.6}", report.ggt_mean[a * k + b])).collect();
        out.push_str(&format!("  {}\n", row.join(" ")));
    }
    out.push_str("per-class adversary similarity (seed-mean):\n");
    for (c, sim) in report.per_class_adv_similarity.iter().enumerate() {
        match sim {
            Some(v) => out.push_str(&format!("  class {c}: {v:.6}\n")),
            None => out.push_str(&format!("  class {c}: all attacks failed\n")),
        }
    }
    out.push_str(&format!(
        "m_g spread=({:.6},{:.6}) m_adv spread=({:.6},{:.6})\n",
        report.m_g_spread.0, report.m_g_spread.1, report.m_adv_spread.0, report.m_adv_spread.1
    ));
    out.push_str(&format!(
        "M_g={:.6} M_adv={:.6} verdicts={},{}\n",
        report.m_g, report.m_adv, report.verdict_accuracy, report.verdict_robustness
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071068).abs() < 1e-6);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateFeature(_))
        ));
    }

    fn gram_from_rows(rows: Vec<Vec<f64>>) -> GramMatrix {
        let k = rows.len();
        let d = rows[0].len();
        let g: Vec<f64> = rows.into_iter().flatten().collect();
        let mut ggt = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                ggt[a * k + b] = (0..d).map(|i| g[a * d + i] * g[b * d + i]).sum();
            }
        }
        GramMatrix { g, class_count: k, feature_dim: d, ggt }
    }

    #[test]
    fn metric_g_orthogonal_pair_is_half() {
        let gram = gram_from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((metric_g(&gram) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metric_g_identical_prototypes_is_zero() {
        let gram = gram_from_rows(vec![vec![1.0, 0.0]; 3]);
        assert!(metric_g(&gram).abs() < 1e-12);
    }

    #[test]
    fn metric_g_single_class_is_zero() {
        let gram = gram_from_rows(vec![vec![0.6, 0.8]]);
        assert!(metric_g(&gram).abs() < 1e-12);
    }

    #[test]
    fn metric_g_permutation_invariant() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.707], vec![0.0, 1.0, 0.0]];
        let a = metric_g(&gram_from_rows(rows.clone()));
        let permuted = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        let b = metric_g(&gram_from_rows(permuted));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_reports_mean_and_spread() {
        let (mean, min, max) = aggregate_over_seeds(&[0.4, 0.6]).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        assert_eq!((min, max), (0.4, 0.6));
        assert_eq!(aggregate_over_seeds(&[0.5]).unwrap().0, 0.5);
        assert!(aggregate_over_seeds(&[]).is_err());
    }

    #[test]
    fn pearson_exact_linear() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_zero_variance() {
        assert!(matches!(
            pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn verdict_thresholds_are_inclusive() {
        let t = Thresholds::default();
        assert_eq!(quality_report(0.811, 0.426, t), (true, true));
        assert_eq!(quality_report(0.707, 0.306, t), (false, false));
        assert_eq!(quality_report(0.80, 0.35, t), (true, true));
    }
}
