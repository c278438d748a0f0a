//! Decision rules and metrics.
//!
//! Two per-sample scores are produced: the energy `E(x)` and the
//! reconstruction error `‖x − f(x)‖² = ‖∇ₓE(x)‖²`. A sample is flagged when
//! its score is strictly above the rule's threshold. Because `log Z` does not
//! depend on `x`, flagging `p(x) < p_th` is the same as flagging
//! `E(x) > −log p_th − log Z`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Item;
use crate::error::{DsebmError, Result};
use crate::model::{Detector, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub label: String,
    /// Ground truth, when known.
    pub outlier: Option<bool>,
    pub energy: f64,
    pub recon_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub energy: f64,
    pub recon_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub entries: Vec<ScoreEntry>,
    pub thresholds: Option<Thresholds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Energy,
    Recon,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Energy => "energy",
            Criterion::Recon => "recon",
        }
    }
}

impl ScoreReport {
    pub fn scores(&self, criterion: Criterion) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| match criterion {
                Criterion::Energy => e.energy,
                Criterion::Recon => e.recon_error,
            })
            .collect()
    }

    /// Sets both thresholds to the `(1 − rho)`-quantile of this report's scores.
    pub fn with_quantile_thresholds(mut self, rho: f64) -> Result<Self> {
        self.thresholds = Some(Thresholds {
            energy: choose_threshold(&self.scores(Criterion::Energy), rho)?,
            recon_error: choose_threshold(&self.scores(Criterion::Recon), rho)?,
        });
        Ok(self)
    }

    /// Flags under each rule, `None` until thresholds are set.
    pub fn flags(&self, criterion: Criterion) -> Option<Vec<bool>> {
        let th = self.thresholds?;
        let cut = match criterion {
            Criterion::Energy => th.energy,
            Criterion::Recon => th.recon_error,
        };
        Some(self.scores(criterion).into_iter().map(|s| s > cut).collect())
    }

    /// Tab-separated lines with a header row; flags are blank without
    /// thresholds, ground truth is blank when unknown.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if let Some(th) = self.thresholds {
            writeln!(out, "# thresholds energy={} recon_error={}", th.energy, th.recon_error).unwrap();
        }
        out.push_str("id\tlabel\toutlier\tenergy\trecon_error\tflag_energy\tflag_recon\n");
        let fe = self.flags(Criterion::Energy);
        let fr = self.flags(Criterion::Recon);
        let flag = |f: &Option<Vec<bool>>, i: usize| match f {
            Some(v) => if v[i] { "1" } else { "0" },
            None => "",
        };
        for (i, e) in self.entries.iter().enumerate() {
            let truth = match e.outlier {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.label,
                truth,
                e.energy,
                e.recon_error,
                flag(&fe, i),
                flag(&fr, i)
            )
            .unwrap();
        }
        out
    }

    /// Parses [`ScoreReport::to_tsv`] output. Flags are recomputed from the
    /// threshold comment rather than trusted.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let parse_err = |record: usize, message: String| DsebmError::Parse {
            path: "<scores>".into(),
            record,
            message,
        };
        let mut thresholds = None;
        let mut entries = Vec::new();
        let mut seen_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let record = lineno + 1;
            if let Some(rest) = line.strip_prefix("# thresholds ") {
                let mut th = Thresholds { energy: f64::NAN, recon_error: f64::NAN };
                for kv in rest.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| parse_err(record, format!("bad threshold field {kv:?}")))?;
                    let v: f64 = v.parse().map_err(|_| parse_err(record, format!("bad number {v:?}")))?;
                    match k {
                        "energy" => th.energy = v,
                        "recon_error" => th.recon_error = v,
                        _ => return Err(parse_err(record, format!("unknown threshold {k:?}"))),
                    }
                }
                thresholds = Some(th);
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                seen_header = true;
                if line.starts_with("id\t") {
                    continue;
                }
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 5 {
                return Err(parse_err(record, format!("expected at least 5 columns, got {}", cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| parse_err(record, format!("bad number {s:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(record, format!("non-finite score {s:?}")));
                }
                Ok(v)
            };
            let outlier = match cols[2] {
                "1" => Some(true),
                "0" => Some(false),
                "" => None,
                other => return Err(parse_err(record, format!("bad outlier flag {other:?}"))),
            };
            entries.push(ScoreEntry {
                id: cols[0].to_string(),
                label: cols[1].to_string(),
                outlier,
                energy: num(cols[3])?,
                recon_error: num(cols[4])?,
            });
        }
        Ok(Self { entries, thresholds })
    }
}

/// Energy and reconstruction error for every item, in input order. Ground
/// truth is filled in when `inlier_classes` is given.
pub fn score_samples(
    detector: &Detector,
    items: &[Item],
    inlier_classes: Option<&BTreeSet<String>>,
) -> Result<ScoreReport> {
    let samples: Vec<&Sample> = items.iter().map(|i| &i.sample).collect();
    let scores = score_all(detector, &samples)?;
    let entries = items
        .iter()
        .zip(scores)
        .map(|(item, (energy, recon_error))| ScoreEntry {
            id: item.id.clone(),
            label: item.label.clone(),
            outlier: inlier_classes.map(|set| !set.contains(&item.label)),
            energy,
            recon_error,
        })
        .collect();
    Ok(ScoreReport {
        entries,
        thresholds: None,
    })
}

/// `(energy, recon_error)` per sample, computed in parallel, in input order.
pub fn score_all(detector: &Detector, samples: &[&Sample]) -> Result<Vec<(f64, f64)>> {
    samples.par_iter().map(|s| detector.scores(s)).collect()
}

/// The `(1 − rho)`-quantile of `scores`: with `n` scores, the value at rank
/// `n − ⌊rho·n⌋` in ascending order, so that about `rho·n` samples lie
/// strictly above it.
pub fn choose_threshold(scores: &[f64], rho: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(DsebmError::Empty("no scores to threshold".into()));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DsebmError::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let flagged = ((rho * n as f64) + 1e-9).floor() as usize;
    let rank = n.saturating_sub(flagged).max(1);
    Ok(sorted[rank - 1])
}

/// Confusion counts and derived metrics at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Absent when nothing is flagged.
    pub precision: Option<f64>,
    /// Absent when the ground truth has no outliers.
    pub recall: Option<f64>,
    pub f1: f64,
}

impl Metrics {
    pub fn compute(scores: &[f64], truth: &[bool], threshold: f64) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&s, &t) in scores.iter().zip(truth) {
            match (s > threshold, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(threshold, tp, fp, fn_, tn)
    }

    fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
            _ => 0.0,
        };
        Self {
            threshold,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn flagged(&self) -> usize {
        self.tp + self.fp
    }
}

/// Metrics at every distinct score used as a threshold, ascending.
pub fn sweep(scores: &[f64], truth: &[bool]) -> Vec<Metrics> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    let mut out = Vec::new();
    // Walking upward, everything at or below the current value is unflagged.
    let (mut below_pos, mut below_neg) = (0, 0);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
        out.push(Metrics::from_counts(
            v,
            positives - below_pos,
            negatives - below_neg,
            below_pos,
            below_neg,
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// `(1 − rho)`-quantile of the scores being evaluated.
    Quantile(f64),
    /// Thresholds maximizing F1 along the sweep.
    BestF1,
    Fixed(Thresholds),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion: Criterion,
    pub metrics: Metrics,
    pub sweep: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub outliers: usize,
    pub energy: CriterionReport,
    pub recon: CriterionReport,
}

impl EvalReport {
    pub fn criterion(&self, c: Criterion) -> &CriterionReport {
        match c {
            Criterion::Energy => &self.energy,
            Criterion::Recon => &self.recon,
        }
    }

    /// `criterion,threshold,precision,recall,f1` rows for both sweeps.
    pub fn sweep_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("criterion,threshold,precision,recall,f1\n");
        for rep in [&self.energy, &self.recon] {
            for m in &rep.sweep {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    rep.criterion.name(),
                    m.threshold,
                    opt(m.precision),
                    opt(m.recall),
                    m.f1
                )
                .unwrap();
            }
        }
        out
    }
}

/// Precision, recall and F1 for both rules against the report's ground truth.
pub fn evaluate(report: &ScoreReport, mode: ThresholdMode) -> Result<EvalReport> {
    if report.entries.is_empty() {
        return Err(DsebmError::Empty("no scored samples".into()));
    }
    let truth: Vec<bool> = report
        .entries
        .iter()
        .map(|e| {
            e.outlier
                .ok_or_else(|| DsebmError::InvalidArgument(format!("sample {:?} has no ground truth", e.id)))
        })
        .collect::<Result<_>>()?;
    let one = |criterion: Criterion, fixed: Option<f64>| -> Result<CriterionReport> {
        let scores = report.scores(criterion);
        let curve = sweep(&scores, &truth);
        let metrics = match (mode, fixed) {
            (ThresholdMode::Quantile(rho), _) => {
                Metrics::compute(&scores, &truth, choose_threshold(&scores, rho)?)
            }
            (ThresholdMode::Fixed(_), Some(th)) => Metrics::compute(&scores, &truth, th),
            _ => curve
                .iter()
                .fold(None::<&Metrics>, |best, m| match best {
                    Some(b) if b.f1 >= m.f1 => Some(b),
                    _ => Some(m),
                })
                .cloned()
                .expect("nonempty sweep"),
        };
        Ok(CriterionReport {
            criterion,
            metrics,
            sweep: curve,
        })
    };
    let (fe, fr) = match mode {
        ThresholdMode::Fixed(th) => (Some(th.energy), Some(th.recon_error)),
        _ => (None, None),
    };
    Ok(EvalReport {
        samples: truth.len(),
        outliers: truth.iter().filter(|&&t| t).count(),
        energy: one(Criterion::Energy, fe)?,
        recon: one(Criterion::Recon, fr)?,
    })
}

/// Averages over repeated runs (one per inlier class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub runs: usize,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEvalReport {
    pub energy: MeanMetrics,
    pub recon: MeanMetrics,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean precision, recall and F1 across runs; absent per-run values are
/// skipped.
pub fn mean_report(runs: &[EvalReport]) -> Result<MeanEvalReport> {
    if runs.is_empty() {
        return Err(DsebmError::Empty("no runs to average".into()));
    }
    let agg = |c: Criterion| {
        let ms: Vec<&Metrics> = runs.iter().map(|r| &r.criterion(c).metrics).collect();
        MeanMetrics {
            runs: ms.len(),
            mean_precision: mean_of(ms.iter().map(|m| m.precision)),
            mean_recall: mean_of(ms.iter().map(|m| m.recall)),
            mean_f1: ms.iter().map(|m| m.f1).sum::<f64>() / ms.len() as f64,
        }
    };
    Ok(MeanEvalReport {
        energy: agg(Criterion::Energy),
        recon: agg(Criterion::Recon),
    })
}

/// `log ∫ e^{−E(x)} dx` over `[lo, hi]` by composite Simpson's rule on
/// `intervals` (rounded up to even) subintervals, in log-sum-exp form.
pub fn log_partition_1d(energy: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> Result<f64> {
    if !(hi > lo) || intervals < 2 {
        return Err(DsebmError::InvalidArgument("need hi > lo and at least two intervals".into()));
    }
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let neg: Vec<f64> = (0..=n).map(|i| -energy(lo + i as f64 * h)).collect();
    if neg.iter().any(|v| !v.is_finite()) {
        return Err(DsebmError::NonFinite("energy on quadrature grid".into()));
    }
    let m = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = neg
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * (v - m).exp()
        })
        .sum();
    Ok(m + (sum * h / 3.0).ln())
}

/// Energy threshold equivalent to the density threshold `p_th`.
pub fn energy_threshold_for_density(p_th: f64, log_partition: f64) -> f64 {
    -p_th.ln() - log_partition
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_threshold_cases() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let th = choose_threshold(&scores, 0.2).unwrap();
        assert_eq!(th, 8.0);
        let flagged: Vec<f64> = scores.iter().copied().filter(|&s| s > th).collect();
        assert_eq!(flagged, vec![9.0, 10.0]);

        assert_eq!(choose_threshold(&scores, 1e-9).unwrap(), 10.0);
        assert!(choose_threshold(&[], 0.2).is_err());
        assert!(choose_threshold(&scores, 0.0).is_err());
        assert!(choose_threshold(&scores, 1.0).is_err());
    }

    #[test]
    fn ties_at_boundary_are_deterministic() {
        let scores = [1.0, 2.0, 3.0, 3.0, 3.0];
        let th = choose_threshold(&scores, 0.4).unwrap();
        assert_eq!(th, 3.0);
        // Strict inequality: boundary samples stay inliers, nothing flagged.
        assert_eq!(scores.iter().filter(|&&s| s > th).count(), 0);
        assert_eq!(choose_threshold(&scores, 0.4).unwrap(), th);
    }

    fn report(scores: &[(f64, bool)]) -> ScoreReport {
        ScoreReport {
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &(s, o))| ScoreEntry {
                    id: i.to_string(),
                    label: if o { "1".into() } else { "0".into() },
                    outlier: Some(o),
                    energy: s,
                    recon_error: s,
                })
                .collect(),
            thresholds: None,
        }
    }

    #[test]
    fn perfect_separation() {
        let r = report(&[(0.1, false), (0.2, false), (0.3, false), (0.9, true)]);
        let e = evaluate(&r, ThresholdMode::Quantile(0.25)).unwrap();
        assert_eq!(e.energy.metrics.precision, Some(1.0));
        assert_eq!(e.energy.metrics.recall, Some(1.0));
        assert_eq!(e.energy.metrics.f1, 1.0);
    }

    #[test]
    fn everything_flagged() {
        let r = report(&[(1.0, false), (2.0, true), (3.0, false), (4.0, false), (5.0, true)]);
        let m = Metrics::compute(&r.scores(Criterion::Energy), &[false, true, false, false, true], f64::NEG_INFINITY);
        assert_eq!(m.precision, Some(0.4));
        assert_eq!(m.recall, Some(1.0));
    }

    #[test]
    fn hand_built_confusion() {
        // TP = 3, FP = 1, FN = 2, TN = 4 at threshold 0.5.
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01];
        let truth = [true, true, true, false, true, true, false, false, false, false];
        let m = Metrics::compute(&scores, &truth, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 1, 2, 4));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.6));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_positives_leaves_recall_absent() {
        let m = Metrics::compute(&[1.0, 2.0], &[false, false], 1.5);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, 0.0);
        let m = Metrics::compute(&[1.0, 2.0], &[true, false], 5.0);
        assert_eq!(m.precision, None);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let mut r = report(&[(1.0, false)]);
        r.entries[0].outlier = None;
        assert!(evaluate(&r, ThresholdMode::BestF1).is_err());
    }

    #[test]
    fn sweep_agrees_with_direct_metrics() {
        let scores = [0.3, 0.1, 0.3, 0.9, 0.5];
        let truth = [false, false, true, true, false];
        let curve = sweep(&scores, &truth);
        assert_eq!(curve.len(), 4);
        for m in &curve {
            assert_eq!(*m, Metrics::compute(&scores, &truth, m.threshold));
        }
    }

    #[test]
    fn best_f1_mode_picks_curve_maximum() {
        let r = report(&[(0.1, false), (0.5, true), (0.2, false), (0.7, true), (0.6, false)]);
        let e = evaluate(&r, ThresholdMode::BestF1).unwrap();
        let best = e.energy.sweep.iter().map(|m| m.f1).fold(0.0, f64::max);
        assert_eq!(e.energy.metrics.f1, best);
    }

    #[test]
    fn tsv_round_trip() {
        let r = report(&[(0.25, false), (1.5, true)]).with_quantile_thresholds(0.5).unwrap();
        let text = r.to_tsv();
        assert!(text.contains("flag_energy"));
        let back = ScoreReport::from_tsv(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mean_over_runs() {
        let a = evaluate(&report(&[(0.1, false), (0.9, true)]), ThresholdMode::Quantile(0.5)).unwrap();
        let b = evaluate(&report(&[(0.9, false), (0.1, true)]), ThresholdMode::Quantile(0.5)).unwrap();
        let m = mean_report(&[a, b]).unwrap();
        assert_eq!(m.energy.mean_f1, 0.5);
        assert_eq!(m.energy.runs, 2);
    }

    #[test]
    fn gaussian_partition_function() {
        let lz = log_partition_1d(|x| 0.5 * x * x, -12.0, 12.0, 2000).unwrap();
        assert!((lz - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn raising_threshold_is_monotone(
            data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 1..40),
            a in -6.0f64..6.0,
            b in -6.0f64..6.0,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ml = Metrics::compute(&scores, &truth, lo);
            let mh = Metrics::compute(&scores, &truth, hi);
            prop_assert!(mh.flagged() <= ml.flagged());
            if let (Some(rl), Some(rh)) = (ml.recall, mh.recall) {
                prop_assert!(rh <= rl);
            }
        }

        #[test]
        fn f1_is_harmonic_mean(data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 1..40), t in -6.0f64..6.0) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
            let m = Metrics::compute(&scores, &truth, t);
            match (m.precision, m.recall) {
                (Some(p), Some(r)) if p + r > 0.0 => prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15),
                _ => prop_assert_eq!(m.f1, 0.0),
            }
        }
    }
}
