//! Synthetic series with a prescribed autocorrelation, CSV ingestion and the
//! preprocessing pipeline (split, subsample, window, standardize).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::standard_normal;
use crate::tensor::{matmul_t, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessingState {
    Raw,
    Subsampled,
    Windowed,
    Standardized,
}

/// Per-timestep statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation of every column.
    pub fn fit(data: &Tensor) -> Result<Self> {
        let (mean, std) = column_moments(data)?;
        if let Some(t) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Degenerate(format!("zero variance at timestep {t}")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Tensor) -> Result<Tensor> {
        if data.cols() != self.dim() {
            return Err(Error::dim("standardize", data.shape(), &[0, self.dim()]));
        }
        let mut out = data.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

fn column_moments(data: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Degenerate("no samples".into()));
    }
    let mean: Vec<f64> = data.sum_cols()?.data().iter().map(|s| s / n as f64).collect();
    let mut var = vec![0.0; data.cols()];
    for i in 0..n {
        for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *v += (x - m).powi(2);
        }
    }
    Ok((mean, var.into_iter().map(|v| (v / n as f64).sqrt()).collect()))
}

/// A matrix of samples × timepoints with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    pub data: Tensor,
    pub label: Label,
    pub tau: Option<f64>,
    pub state: PreprocessingState,
    pub normalizer: Option<Normalizer>,
}

impl TimeSeriesBatch {
    pub fn new(data: Tensor, label: Label) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::dim("TimeSeriesBatch", data.shape(), &[0, 0]));
        }
        Ok(Self {
            data,
            label,
            tau: None,
            state: PreprocessingState::Raw,
            normalizer: None,
        })
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    pub fn timepoints(&self) -> usize {
        self.data.cols()
    }

    fn with_data(&self, data: Tensor, state: PreprocessingState) -> Self {
        Self {
            data,
            state,
            ..self.clone()
        }
    }
}

/// `f(Δt) = exp(-|Δt|/τ) · cos(Δt / period_divisor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutocorrSpec {
    pub tau: f64,
    pub period_divisor: f64,
}

impl AutocorrSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::contract(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            tau,
            period_divisor: 15.0,
        })
    }

    pub fn at(&self, lag: f64) -> f64 {
        (-lag.abs() / self.tau).exp() * (lag / self.period_divisor).cos()
    }
}

pub fn build_covariance(spec: &AutocorrSpec, t: usize) -> Tensor {
    let mut s = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            s.set2(i, j, spec.at(i.abs_diff(j) as f64));
        }
    }
    s
}

/// Lower-triangular `B` with `S = B·Bᵀ`.
pub fn cholesky(s: &Tensor) -> Result<Tensor> {
    let n = s.rows();
    if s.shape() != [n, n] {
        return Err(Error::dim("cholesky", s.shape(), &[n, n]));
    }
    let a = s.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = &l[j * n..j * n + j];
        let diag = a[j * n + j] - row_j.iter().map(|v| v * v).sum::<f64>();
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { jitter: 0.0 });
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = (a[i * n + j] - dot) / d;
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Cholesky with diagonal jitter escalating from 1e-10 to 1e-6. Returns the
/// factor and the jitter that was needed.
pub fn cholesky_with_jitter(s: &Tensor) -> Result<(Tensor, f64)> {
    for jitter in [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6] {
        let mut m = s.clone();
        for i in 0..m.rows() {
            let v = m.get2(i, i);
            m.set2(i, i, v + jitter);
        }
        match cholesky(&m) {
            Ok(b) => return Ok((b, jitter)),
            Err(Error::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite { jitter: 1e-6 })
}

/// Rows `y_i` of white noise mapped to `B·y_i`, so `cov = B·Bᵀ`.
pub fn color_noise(white: &Tensor, factor: &Tensor) -> Result<Tensor> {
    matmul_t(white, false, factor, true)
}

pub fn generate_synthetic(spec: &AutocorrSpec, t: usize, n: usize, seed: u64) -> Result<TimeSeriesBatch> {
    if n == 0 || t == 0 {
        return Err(Error::contract("need at least one sample and one timepoint"));
    }
    let (factor, _) = cholesky_with_jitter(&build_covariance(spec, t))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = standard_normal(n, t, &mut rng);
    Ok(TimeSeriesBatch::new(color_noise(&white, &factor)?, Label::Unknown)?.with_tau(spec.tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenormMode {
    /// Divide by the abnormal std, multiply by the normal std.
    #[default]
    StdRatio,
    /// Divide by the abnormal variance, multiply by the normal variance.
    LiteralVariance,
}

/// Rescales each timestep of `abnormal` so its inter-sample spread matches
/// `normal`.
pub fn renormalize_abnormal(abnormal: &TimeSeriesBatch, normal: &TimeSeriesBatch, mode: RenormMode) -> Result<TimeSeriesBatch> {
    if abnormal.timepoints() != normal.timepoints() {
        return Err(Error::dim("renormalize_abnormal", abnormal.data.shape(), normal.data.shape()));
    }
    let (_, s_ab) = column_moments(&abnormal.data)?;
    let (_, s_no) = column_moments(&normal.data)?;
    if let Some(t) = s_ab.iter().chain(&s_no).position(|&s| !(s > 0.0)) {
        return Err(Error::Degenerate(format!(
            "zero variance at timestep {}",
            t % abnormal.timepoints()
        )));
    }
    let ratio: Vec<f64> = s_ab
        .iter()
        .zip(&s_no)
        .map(|(a, n)| match mode {
            RenormMode::StdRatio => n / a,
            RenormMode::LiteralVariance => (n * n) / (a * a),
        })
        .collect();
    let mut data = abnormal.data.clone();
    for i in 0..data.rows() {
        for (v, r) in data.row_mut(i).iter_mut().zip(&ratio) {
            *v *= r;
        }
    }
    Ok(abnormal.with_data(data, abnormal.state))
}

/// Metadata stored next to a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default = "raw_state")]
    pub state: PreprocessingState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
}

fn raw_state() -> PreprocessingState {
    PreprocessingState::Raw
}

/// `data.csv` → `data.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    csv.with_file_name(format!("{stem}.meta.json"))
}

fn label_from_name(path: &Path) -> Label {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if stem.contains("abnormal") {
        Label::Abnormal
    } else if stem.contains("normal") {
        Label::Normal
    } else {
        Label::Unknown
    }
}

/// Reads one sample per row. A first row that does not parse as numbers is
/// taken as a header. Metadata comes from the sidecar when present,
/// otherwise the label is inferred from the file name.
pub fn load_csv(path: &Path) -> Result<TimeSeriesBatch> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(k + 1, e.to_string()))?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c))
            .collect();
        if k == 0 && parsed.iter().any(|p| p.is_err()) {
            continue; // header
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(v) => return Err(parse_err(line, format!("column {}: non-finite value {v}", c + 1))),
                Err(c) => {
                    return Err(parse_err(
                        line,
                        format!("column {}: not a number: {:?}", c + 1, &record[c]),
                    ))
                }
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(line, format!("expected {w} columns, found {}", row.len())))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    let mut batch = TimeSeriesBatch::new(Tensor::from_rows(&rows)?, label_from_name(path))?;
    let meta = sidecar_path(path);
    if meta.exists() {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(&meta)?)?;
        batch.label = side.label;
        batch.tau = side.tau;
        batch.state = side.state;
        batch.normalizer = side.normalizer;
    }
    Ok(batch)
}

/// Writes the batch as headerless CSV plus its sidecar.
pub fn write_csv(batch: &TimeSeriesBatch, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Io(e.into()))?;
    for i in 0..batch.samples() {
        writer
            .write_record(batch.data.row(i).iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::Io(e.into()))?;
    }
    writer.flush()?;
    let side = Sidecar {
        label: batch.label,
        tau: batch.tau,
        state: batch.state,
        normalizer: batch.normalizer.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub train_fraction: f64,
    pub stride: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            stride: 10,
            window: 100,
            seed: 0,
        }
    }
}

/// Deterministic split; returns `(train, test, train_indices, test_indices)`.
pub fn split_train_test(
    batch: &TimeSeriesBatch,
    train_fraction: f64,
    seed: u64,
) -> Result<(TimeSeriesBatch, TimeSeriesBatch, Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract("train fraction must be in (0, 1)"));
    }
    let n = batch.samples();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!("cannot split {n} samples into train and test")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, te) = idx.split_at(n_train);
    Ok((
        batch.with_data(batch.data.select_rows(tr), batch.state),
        batch.with_data(batch.data.select_rows(te), batch.state),
        tr.to_vec(),
        te.to_vec(),
    ))
}

/// Keeps every `stride`-th timepoint starting at 0.
pub fn subsample(batch: &TimeSeriesBatch, stride: usize) -> Result<TimeSeriesBatch> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    if batch.state != PreprocessingState::Raw {
        return Err(Error::contract(format!("cannot subsample a {:?} batch", batch.state)));
    }
    let keep: Vec<usize> = (0..batch.timepoints()).step_by(stride).collect();
    let mut rows = Vec::with_capacity(batch.samples());
    for i in 0..batch.samples() {
        let r = batch.data.row(i);
        rows.push(keep.iter().map(|&t| r[t]).collect::<Vec<_>>());
    }
    Ok(batch.with_data(Tensor::from_rows(&rows)?, PreprocessingState::Subsampled))
}

/// The middle `len` timepoints, starting at `floor((T - len) / 2)`.
pub fn window_middle(batch: &TimeSeriesBatch, len: usize) -> Result<TimeSeriesBatch> {
    let t = batch.timepoints();
    if len == 0 || t < len {
        return Err(Error::contract(format!("series of length {t} is shorter than the window {len}")));
    }
    if matches!(batch.state, PreprocessingState::Windowed | PreprocessingState::Standardized) {
        return Err(Error::contract(format!("cannot window a {:?} batch", batch.state)));
    }
    let start = (t - len) / 2;
    Ok(batch.with_data(batch.data.slice_cols(start, start + len)?, PreprocessingState::Windowed))
}

pub fn standardize(batch: &TimeSeriesBatch, normalizer: &Normalizer) -> Result<TimeSeriesBatch> {
    if batch.state == PreprocessingState::Standardized {
        return Err(Error::contract("batch is already standardized"));
    }
    let mut out = batch.with_data(normalizer.apply(&batch.data)?, PreprocessingState::Standardized);
    out.normalizer = Some(normalizer.clone());
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub train: TimeSeriesBatch,
    pub test_normal: TimeSeriesBatch,
    /// The `others` inputs, in order.
    pub others: Vec<TimeSeriesBatch>,
    pub normalizer: Normalizer,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Split normal data, subsample and window every batch, then standardize
/// everything with per-timestep statistics of the training split.
pub fn preprocess(normal: &TimeSeriesBatch, others: &[TimeSeriesBatch], config: &PreprocessConfig) -> Result<Preprocessed> {
    for o in others {
        if o.timepoints() != normal.timepoints() {
            return Err(Error::dim("preprocess", normal.data.shape(), o.data.shape()));
        }
    }
    let t_sub = normal.timepoints().div_ceil(config.stride.max(1));
    if t_sub < config.window {
        return Err(Error::contract(format!(
            "{} timepoints subsampled by {} leave {t_sub}, fewer than the window {}",
            normal.timepoints(),
            config.stride,
            config.window
        )));
    }
    let (train, test, train_indices, test_indices) = split_train_test(normal, config.train_fraction, config.seed)?;
    let shape = |b: &TimeSeriesBatch| window_middle(&subsample(b, config.stride)?, config.window);
    let train = shape(&train)?;
    let normalizer = Normalizer::fit(&train.data)?;
    let finish = |b: &TimeSeriesBatch| standardize(&shape(b)?, &normalizer);
    Ok(Preprocessed {
        train: standardize(&train, &normalizer)?,
        test_normal: finish(&test)?,
        others: others.iter().map(finish).collect::<Result<_>>()?,
        normalizer: normalizer.clone(),
        train_indices,
        test_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> TimeSeriesBatch {
        TimeSeriesBatch::new(Tensor::from_rows(rows).unwrap(), Label::Normal).unwrap()
    }

    #[test]
    fn covariance_values() {
        let spec = AutocorrSpec::new(50.0).unwrap();
        let s = build_covariance(&spec, 60);
        for i in 0..60 {
            assert_eq!(s.get2(i, i), 1.0);
        }
        // e^{-1}·cos(50/15), evaluated independently
        let expected = (-1.0f64).exp() * (50.0f64 / 15.0).cos();
        assert!((s.get2(0, 50) - expected).abs() < 1e-15);
        assert!((s.get2(0, 50) + 0.361_14).abs() < 1e-5);
        assert_eq!(s.get2(3, 7), s.get2(7, 3));
        assert_eq!(build_covariance(&spec, 1).data(), &[1.0]);
        assert!(AutocorrSpec::new(0.0).is_err());
    }

    #[test]
    fn cholesky_small_cases() {
        assert_eq!(cholesky(&Tensor::identity(4)).unwrap(), Tensor::identity(4));
        let s = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let b = cholesky(&s).unwrap();
        assert!(b.max_abs_diff(&Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap()) < 1e-15);
        let not_pd = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&not_pd), Err(Error::NotPositiveDefinite { .. })));
        assert!(matches!(cholesky_with_jitter(&not_pd), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn cholesky_reconstructs_tau50_covariance() {
        let s = build_covariance(&AutocorrSpec::new(50.0).unwrap(), 100);
        let (b, _) = cholesky_with_jitter(&s).unwrap();
        for i in 0..100 {
            for j in i + 1..100 {
                assert_eq!(b.get2(i, j), 0.0);
            }
        }
        let rec = matmul_t(&b, false, &b, true).unwrap();
        assert!(rec.max_abs_diff(&s) < 1e-8);
    }

    #[test]
    fn identity_factor_keeps_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = standard_normal(4, 6, &mut rng);
        assert_eq!(color_noise(&y, &Tensor::identity(6)).unwrap(), y);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = AutocorrSpec::new(20.0).unwrap();
        let a = generate_synthetic(&spec, 30, 10, 5).unwrap();
        let b = generate_synthetic(&spec, 30, 10, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tau, Some(20.0));
        assert_ne!(a, generate_synthetic(&spec, 30, 10, 6).unwrap());
    }

    #[test]
    fn renormalization_equalizes_spread() {
        let spec = AutocorrSpec::new(50.0).unwrap();
        let normal = generate_synthetic(&spec, 20, 5000, 1).unwrap();
        let mut scaled = generate_synthetic(&spec, 20, 5000, 2).unwrap();
        scaled.data = scaled.data.scale(3.0);
        let fixed = renormalize_abnormal(&scaled, &normal, RenormMode::StdRatio).unwrap();
        let (_, s_fixed) = column_moments(&fixed.data).unwrap();
        let (_, s_norm) = column_moments(&normal.data).unwrap();
        for (a, b) in s_fixed.iter().zip(&s_norm) {
            assert!((a / b - 1.0).abs() < 0.02);
        }
        // same distribution: nearly the identity
        let same = generate_synthetic(&spec, 20, 5000, 3).unwrap();
        let out = renormalize_abnormal(&same, &normal, RenormMode::StdRatio).unwrap();
        let ratio = out.data.get2(0, 0) / same.data.get2(0, 0);
        assert!((ratio - 1.0).abs() < 0.1);
        let lit = renormalize_abnormal(&scaled, &normal, RenormMode::LiteralVariance).unwrap();
        let (_, s_lit) = column_moments(&lit.data).unwrap();
        assert!((s_lit[0] / s_norm[0] - 1.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn renormalization_rejects_zero_variance() {
        let normal = batch(&[vec![1.0, 2.0], vec![2.0, 3.0]]);
        let flat = batch(&[vec![1.0, 5.0], vec![1.0, 6.0]]);
        assert!(matches!(
            renormalize_abnormal(&flat, &normal, RenormMode::StdRatio),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn window_floor_rule() {
        let b = TimeSeriesBatch::new(Tensor::zeros(&[2, 100]), Label::Normal).unwrap();
        let w = window_middle(&b, 100).unwrap();
        assert_eq!(w.data, b.data);
        let b = TimeSeriesBatch::new(
            Tensor::new(vec![1, 101], (0..101).map(f64::from).collect()).unwrap(),
            Label::Normal,
        )
        .unwrap();
        let w = window_middle(&b, 100).unwrap();
        assert_eq!(w.data.data()[0], 0.0);
        assert_eq!(w.data.data()[99], 99.0);
        assert!(window_middle(&b, 102).is_err());
    }

    #[test]
    fn subsample_keeps_every_stride() {
        let b = TimeSeriesBatch::new(
            Tensor::new(vec![1, 25], (0..25).map(f64::from).collect()).unwrap(),
            Label::Normal,
        )
        .unwrap();
        let s = subsample(&b, 10).unwrap();
        assert_eq!(s.data.data(), &[0.0, 10.0, 20.0]);
        assert_eq!(s.state, PreprocessingState::Subsampled);
        assert!(subsample(&s, 2).is_err());
    }

    #[test]
    fn preprocess_pipeline() {
        let spec = AutocorrSpec::new(50.0).unwrap();
        let normal = generate_synthetic(&spec, 1000, 50, 1).unwrap();
        let other = generate_synthetic(&AutocorrSpec::new(20.0).unwrap(), 1000, 30, 2).unwrap();
        let p = preprocess(&normal, &[other], &PreprocessConfig::default()).unwrap();
        assert_eq!(p.train.data.shape(), &[40, 100]);
        assert_eq!(p.test_normal.data.shape(), &[10, 100]);
        assert_eq!(p.others[0].data.shape(), &[30, 100]);
        let (mean, std) = column_moments(&p.train.data).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-12));
        // split partitions the samples
        let mut all: Vec<usize> = p.train_indices.iter().chain(&p.test_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        // first train row = subsample+window of the raw row, standardized
        let raw = normal.data.row(p.train_indices[0]);
        let expected = (raw[0] - p.normalizer.mean[0]) / p.normalizer.std[0];
        assert!((p.train.data.get2(0, 0) - expected).abs() < 1e-12);
        assert!(matches!(standardize(&p.train, &p.normalizer), Err(Error::Contract(_))));
        assert_eq!(p.test_normal.normalizer.as_ref(), Some(&p.normalizer));
    }

    #[test]
    fn preprocess_rejects_short_series() {
        let b = TimeSeriesBatch::new(Tensor::zeros(&[10, 500]), Label::Normal).unwrap();
        assert!(matches!(preprocess(&b, &[], &PreprocessConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plain.csv");
        fs::write(&p, "1,2,3\n4,5,6\n").unwrap();
        let b = load_csv(&p).unwrap();
        assert_eq!(b.data.shape(), &[2, 3]);
        assert_eq!(b.label, Label::Unknown);

        let p = dir.path().join("abnormal_run.csv");
        fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        let b = load_csv(&p).unwrap();
        assert_eq!(b.data.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(b.label, Label::Abnormal);

        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3,NaN\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 2"), "{err}");

        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "1,2\nx,3\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("not a number"));
        fs::write(&p, "").unwrap();
        assert!(load_csv(&p).is_err());

        let mut b = batch(&[vec![0.1, -2.5], vec![3.0, 1e-7]]).with_tau(50.0);
        b.state = PreprocessingState::Standardized;
        b.normalizer = Some(Normalizer { mean: vec![0.0, 1.0], std: vec![1.0, 2.0] });
        let p = dir.path().join("stored.csv");
        write_csv(&b, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), b);
    }
}
