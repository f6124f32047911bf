//! Novelty scores, ROC curves, decision boundaries and autocorrelation.
//!
//! Scores are oriented so that higher means more anomalous: flows score a
//! window by its negative mean log-likelihood per timepoint, LOF by its raw
//! factor. Diverged flow samples score `+inf`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Label, Normalizer, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::lof::LofModel;
use crate::tensor::Tensor;

/// Any model that can score windows.
#[derive(Debug, Clone)]
pub enum Detector {
    Flow(FlowModel),
    Lof(LofModel),
}

impl Detector {
    pub fn kind(&self) -> &'static str {
        match self {
            Detector::Flow(f) => f.kind(),
            Detector::Lof(_) => "lof",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Detector::Flow(f) => f.dim(),
            Detector::Lof(l) => l.dim(),
        }
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        match self {
            Detector::Flow(f) => f.normalizer(),
            Detector::Lof(l) => l.normalizer.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub source: String,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub divergent: Vec<bool>,
    /// Total log-likelihood per sample, for flows.
    pub log_likelihood: Option<Vec<f64>>,
}

impl ScoreSet {
    pub fn new(source: impl Into<String>, scores: Vec<f64>, labels: Vec<Label>, divergent: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != divergent.len() {
            return Err(Error::contract("scores, labels and flags must have equal length"));
        }
        let scores = scores
            .into_iter()
            .zip(&divergent)
            .map(|(s, &d)| if d { f64::INFINITY } else { s })
            .collect();
        Ok(Self {
            source: source.into(),
            scores,
            labels,
            divergent,
            log_likelihood: None,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Concatenates two sets from the same model.
    pub fn join(mut self, other: ScoreSet) -> Self {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.divergent.extend(other.divergent);
        self.log_likelihood = match (self.log_likelihood, other.log_likelihood) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == Label::Abnormal).count();
        (self.len() - pos, pos)
    }
}

/// Scores every row of `batch`, labelled with the batch label.
pub fn score_batch(detector: &Detector, batch: &TimeSeriesBatch) -> Result<ScoreSet> {
    if let Some(expected) = detector.normalizer() {
        if batch.normalizer.as_ref() != Some(expected) {
            return Err(Error::contract(format!(
                "batch was not standardized with the {} model's normalizer",
                detector.kind()
            )));
        }
    }
    if batch.timepoints() != detector.dim() {
        return Err(Error::dim("score_batch", batch.data.shape(), &[0, detector.dim()]));
    }
    let labels = vec![batch.label; batch.samples()];
    match detector {
        Detector::Flow(flow) => {
            let out = flow.score(&batch.data)?;
            let d = flow.dim() as f64;
            let scores = out.log_prob.data().iter().map(|lp| -lp / d).collect();
            let mut set = ScoreSet::new(flow.kind(), scores, labels, out.diverged)?;
            set.log_likelihood = Some(out.log_prob.into_data());
            Ok(set)
        }
        Detector::Lof(lof) => {
            let scores = lof.score(&batch.data)?;
            let n = scores.len();
            ScoreSet::new("lof", scores, labels, vec![false; n])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point; a sample is flagged when its score is
    /// `>=` the threshold. The first entry is `+inf` and flags nothing.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Sweeps the distinct score values from highest to lowest.
pub fn roc(set: &ScoreSet) -> Result<RocCurve> {
    let (neg, pos) = set.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::contract("ROC needs both normal and abnormal samples"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut fp, mut tp) = (0usize, 0usize);
    // twice the trapezoid area in units of one (negative, positive) pair
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let (fp0, tp0) = (fp, tp);
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] == Label::Abnormal {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    let auc = (area2 as f64 / 2.0) / (neg as f64 * pos as f64);
    Ok(RocCurve { points, thresholds, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionBoundary {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn rates(set: &ScoreSet, threshold: f64) -> (f64, f64) {
    let (neg, pos) = set.class_counts();
    let (mut fp, mut tp) = (0usize, 0usize);
    for (s, l) in set.scores.iter().zip(&set.labels) {
        if *s >= threshold {
            match l {
                Label::Abnormal => tp += 1,
                _ => fp += 1,
            }
        }
    }
    (fp as f64 / neg.max(1) as f64, tp as f64 / pos.max(1) as f64)
}

/// Lowest threshold whose false-positive rate does not exceed `target_fpr`.
/// The threshold sits midway in the gap below the lowest admitted score,
/// or one unit below the minimum when every sample is admitted.
pub fn decision_boundary(set: &ScoreSet, target_fpr: f64) -> Result<DecisionBoundary> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::contract(format!("target FPR {target_fpr} outside [0, 1]")));
    }
    let mut unique = set.scores.clone();
    unique.sort_by(|a, b| b.total_cmp(a));
    unique.dedup();
    let mut chosen = None;
    for (k, &u) in unique.iter().enumerate() {
        if rates(set, u).0 <= target_fpr {
            chosen = Some(k);
        } else {
            break;
        }
    }
    let threshold = match chosen {
        None => f64::INFINITY,
        Some(k) if k + 1 == unique.len() => unique[k] - 1.0,
        Some(k) if unique[k].is_infinite() => f64::MAX,
        Some(k) => 0.5 * (unique[k] + unique[k + 1]),
    };
    let (fpr, tpr) = rates(set, threshold);
    Ok(DecisionBoundary { threshold, fpr, tpr })
}

/// Smallest false-positive rate at which every abnormal sample is flagged.
pub fn fpr_at_full_recall(set: &ScoreSet) -> Result<f64> {
    let lowest = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, l)| **l == Label::Abnormal)
        .map(|(s, _)| *s)
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.min(s))))
        .ok_or_else(|| Error::contract("no abnormal samples"))?;
    Ok(rates(set, lowest).0)
}

/// Biased per-sample autocorrelation at lags `0..T`, averaged over samples.
pub fn autocorrelation(data: &Tensor) -> Result<Vec<f64>> {
    let (n, t) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::contract("autocorrelation needs at least two samples"));
    }
    let mut acf = vec![0.0; t];
    for i in 0..n {
        let row = data.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let c0: f64 = c.iter().map(|v| v * v).sum();
        if !(c0 > 0.0) {
            return Err(Error::Degenerate(format!("sample {i} is constant")));
        }
        for (k, a) in acf.iter_mut().enumerate() {
            let ck: f64 = c[..t - k].iter().zip(&c[k..]).map(|(x, y)| x * y).sum();
            *a += ck / c0;
        }
    }
    Ok(acf.into_iter().map(|a| a / n as f64).collect())
}

/// Histogram of finite scores per class over a shared range. Infinite
/// scores are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
    pub normal_divergent: usize,
    pub abnormal_divergent: usize,
}

pub fn histogram(set: &ScoreSet, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let finite = set.scores.iter().copied().filter(|s| s.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
    let (lo, hi) = if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut h = Histogram {
        edges,
        normal: vec![0; bins],
        abnormal: vec![0; bins],
        normal_divergent: 0,
        abnormal_divergent: 0,
    };
    for (s, l) in set.scores.iter().zip(&set.labels) {
        let abnormal = *l == Label::Abnormal;
        if !s.is_finite() {
            *if abnormal { &mut h.abnormal_divergent } else { &mut h.normal_divergent } += 1;
            continue;
        }
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if abnormal {
            h.abnormal[b] += 1;
        } else {
            h.normal[b] += 1;
        }
    }
    Ok(h)
}

/// Everything reported for one model on one test pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub tau: Option<f64>,
    pub auc: f64,
    pub boundary: DecisionBoundary,
    pub target_fpr: f64,
    pub fpr_at_full_recall: f64,
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub divergent_count: usize,
}

pub fn summarize(set: &ScoreSet, tau: Option<f64>, target_fpr: f64) -> Result<(EvalSummary, RocCurve)> {
    let curve = roc(set)?;
    let (neg, pos) = set.class_counts();
    let summary = EvalSummary {
        model: set.source.clone(),
        tau,
        auc: curve.auc,
        boundary: decision_boundary(set, target_fpr)?,
        target_fpr,
        fpr_at_full_recall: fpr_at_full_recall(set)?,
        normal_count: neg,
        abnormal_count: pos,
        divergent_count: set.divergent.iter().filter(|&&d| d).count(),
    };
    Ok((summary, curve))
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Normal => "normal",
        Label::Abnormal => "abnormal",
        Label::Unknown => "unknown",
    }
}

pub fn write_scores_csv(set: &ScoreSet, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,label,score,divergent\n");
    for (i, ((s, l), d)) in set.scores.iter().zip(&set.labels).zip(&set.divergent).enumerate() {
        out.push_str(&format!("{i},{},{s:?},{d}\n", label_name(*l)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "threshold,fpr,tpr")?;
    for (t, (fpr, tpr)) in curve.thresholds.iter().zip(&curve.points) {
        writeln!(f, "{t:?},{fpr:?},{tpr:?}")?;
    }
    Ok(())
}

pub fn write_histogram_csv(h: &Histogram, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "bin_start,bin_end,normal,abnormal")?;
    for (k, (n, a)) in h.normal.iter().zip(&h.abnormal).enumerate() {
        writeln!(f, "{:?},{:?},{n},{a}", h.edges[k], h.edges[k + 1])?;
    }
    writeln!(f, "inf,inf,{},{}", h.normal_divergent, h.abnormal_divergent)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maf::{MafConfig, MafStack};

    fn set(pairs: &[(f64, bool)]) -> ScoreSet {
        ScoreSet::new(
            "test",
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| if p.1 { Label::Abnormal } else { Label::Normal }).collect(),
            vec![false; pairs.len()],
        )
        .unwrap()
    }

    fn pairwise(s: &ScoreSet) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for (a, la) in s.scores.iter().zip(&s.labels) {
            for (n, ln) in s.scores.iter().zip(&s.labels) {
                if *la == Label::Abnormal && *ln == Label::Normal {
                    count += 1.0;
                    acc += if a > n { 1.0 } else if a == n { 0.5 } else { 0.0 };
                }
            }
        }
        acc / count
    }

    #[test]
    fn small_roc_example() {
        // every abnormal score beats every normal one here
        let s = set(&[(0.1, false), (0.4, true), (0.35, false), (0.8, true)]);
        assert_eq!(roc(&s).unwrap().auc, 1.0);
        assert_eq!(pairwise(&s), 1.0);
        let s = set(&[(0.1, false), (0.4, true), (0.5, false), (0.8, true)]);
        let c = roc(&s).unwrap();
        assert_eq!(c.auc, 0.75);
        assert_eq!(pairwise(&s), 0.75);
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn separated_and_identical() {
        let s = set(&[(0.0, false), (1.0, false), (5.0, true), (6.0, true)]);
        let c = roc(&s).unwrap();
        assert_eq!(c.auc, 1.0);
        assert!(c.points.contains(&(0.0, 1.0)));
        let s = set(&[(1.0, false), (2.0, false), (1.0, true), (2.0, true)]);
        assert_eq!(roc(&s).unwrap().auc, 0.5);
        let s = set(&[(3.0, false), (3.0, true)]);
        assert_eq!(roc(&s).unwrap().auc, 0.5);
        assert!(matches!(roc(&set(&[(1.0, true)])), Err(Error::Contract(_))));
    }

    #[test]
    fn boundaries() {
        let s = set(&[(0.0, false), (1.0, false), (5.0, true), (6.0, true)]);
        let b = decision_boundary(&s, 0.0).unwrap();
        assert_eq!(b, DecisionBoundary { threshold: 3.0, fpr: 0.0, tpr: 1.0 });
        let b = decision_boundary(&s, 1.0).unwrap();
        assert_eq!(b, DecisionBoundary { threshold: -1.0, fpr: 1.0, tpr: 1.0 });
        let b = decision_boundary(&s, 0.5).unwrap();
        assert_eq!((b.threshold, b.fpr), (0.5, 0.5));
        let s = set(&[(9.0, false), (5.0, true)]);
        let b = decision_boundary(&s, 0.0).unwrap();
        assert_eq!((b.fpr, b.tpr), (0.0, 0.0));
        assert!(decision_boundary(&s, 1.5).is_err());
        assert_eq!(fpr_at_full_recall(&set(&[(1.0, false), (4.0, false), (3.0, true)])).unwrap(), 0.5);
    }

    #[test]
    fn divergent_scores_rank_first() {
        let s = ScoreSet::new(
            "cnf",
            vec![0.5, 7.0, 0.2],
            vec![Label::Normal, Label::Abnormal, Label::Normal],
            vec![false, true, false],
        )
        .unwrap();
        assert_eq!(s.scores[1], f64::INFINITY);
        assert_eq!(roc(&s).unwrap().auc, 1.0);
        let b = decision_boundary(&s, 0.0).unwrap();
        assert_eq!((b.fpr, b.tpr), (0.0, 1.0));
        let h = histogram(&s, 4).unwrap();
        assert_eq!(h.abnormal_divergent, 1);
        assert_eq!(h.normal.iter().sum::<usize>(), 2);
    }

    #[test]
    fn identity_flow_scores_half_log_two_pi() {
        let maf = MafStack::new(MafConfig { dim: 100, layers: 1, hidden_sizes: vec![8], flip: true }, 0).unwrap();
        let det = Detector::Flow(FlowModel::Maf(maf));
        let batch = TimeSeriesBatch::new(Tensor::zeros(&[2, 100]), Label::Normal).unwrap();
        let s = score_batch(&det, &batch).unwrap();
        let expected = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((s.scores[0] - expected).abs() < 1e-12);
        assert!((expected - 0.918_94).abs() < 1e-5);
    }

    #[test]
    fn normalizer_mismatch_is_rejected() {
        let mut maf = MafStack::new(MafConfig { dim: 3, layers: 1, hidden_sizes: vec![4], flip: true }, 0).unwrap();
        maf.normalizer = Some(Normalizer { mean: vec![0.0; 3], std: vec![1.0; 3] });
        let det = Detector::Flow(FlowModel::Maf(maf));
        let batch = TimeSeriesBatch::new(Tensor::zeros(&[2, 3]), Label::Normal).unwrap();
        assert!(matches!(score_batch(&det, &batch), Err(Error::Contract(_))));
    }

    #[test]
    fn autocorrelation_basics() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..8).map(|t| ((t * (i + 2)) as f64).sin()).collect()).collect();
        let acf = autocorrelation(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(acf[0], 1.0);
        assert!(acf.iter().all(|a| a.abs() <= 1.0 + 1e-12));
        let flat = Tensor::from_rows(&[vec![1.0; 4], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(autocorrelation(&flat), Err(Error::Degenerate(_))));
        assert!(autocorrelation(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn writers_emit_headers() {
        let dir = tempfile::tempdir().unwrap();
        let s = set(&[(0.1, false), (0.4, true)]);
        write_scores_csv(&s, &dir.path().join("s.csv")).unwrap();
        write_roc_csv(&roc(&s).unwrap(), &dir.path().join("r.csv")).unwrap();
        write_histogram_csv(&histogram(&s, 3).unwrap(), &dir.path().join("h.csv")).unwrap();
        let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text, "sample_id,label,score,divergent\n0,normal,0.1,false\n1,abnormal,0.4,false\n");
        let roc_text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(roc_text.starts_with("threshold,fpr,tpr\ninf,0.0,0.0\n"));
    }
}
