//! One function per CLI verb. Each reads its inputs from and writes its
//! outputs to the configured output directory, so the verbs can run one by
//! one or chained through [`reproduce_synthetic`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use flownovel_core::cnf::{CnfConfig, CnfModel};
use flownovel_core::datagen::{
    generate_synthetic, load_csv, preprocess, renormalize_abnormal, write_csv, AutocorrSpec, Label,
    PreprocessingState, TimeSeriesBatch,
};
use flownovel_core::eval::{
    autocorrelation, histogram, score_batch, summarize, write_histogram_csv, write_roc_csv, write_scores_csv,
    Detector, EvalSummary, ScoreSet,
};
use flownovel_core::flow::FlowModel;
use flownovel_core::lof::LofModel;
use flownovel_core::maf::{MafConfig, MafStack};
use flownovel_core::persist;
use flownovel_core::train::{train, TrainReport};
use flownovel_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Independent stream for each consumer of the master seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `20` → `"20"`, `12.5` → `"12.5"`.
pub fn tau_tag(tau: f64) -> String {
    if tau.fract() == 0.0 && tau.abs() < 1e15 {
        format!("{}", tau as i64)
    } else {
        format!("{tau}")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub normal: PathBuf,
    pub abnormal: Vec<PathBuf>,
}

pub fn cmd_gen(config: &ExperimentConfig) -> Result<GenOutput> {
    let d = &config.data;
    let dir = config.data_dir();
    create_dir(&dir)?;
    let mut normal = generate_synthetic(&AutocorrSpec::new(d.normal_tau)?, d.timepoints, d.samples, sub_seed(config.seed, 1))?;
    normal.label = Label::Normal;
    let normal_path = dir.join("normal.csv");
    write_csv(&normal, &normal_path)?;
    let mut abnormal = Vec::new();
    for (i, &tau) in d.abnormal_taus.iter().enumerate() {
        let raw = generate_synthetic(&AutocorrSpec::new(tau)?, d.timepoints, d.abnormal_samples, sub_seed(config.seed, 2 + i as u64))?;
        let mut batch = renormalize_abnormal(&raw, &normal, d.renorm)?;
        batch.label = Label::Abnormal;
        let path = dir.join(format!("abnormal_tau{}.csv", tau_tag(tau)));
        write_csv(&batch, &path)?;
        abnormal.push(path);
    }
    Ok(GenOutput { normal: normal_path, abnormal })
}

fn listed(dir: &Path, prefix: &str, skip: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with(prefix) && name.ends_with(".csv") && name != skip {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string()
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub train: PathBuf,
    pub test_normal: PathBuf,
    pub test_sets: Vec<PathBuf>,
}

/// Split, subsample, window and standardize; writes `train.csv`,
/// `test_normal.csv` and one `test_<name>.csv` per abnormal set.
pub fn cmd_preprocess(config: &ExperimentConfig) -> Result<PreprocessOutput> {
    let normal_path = config.data.normal_csv.clone().unwrap_or_else(|| config.data_dir().join("normal.csv"));
    let abnormal_paths = if config.data.abnormal_csv.is_empty() {
        listed(&config.data_dir(), "abnormal_", "")?
    } else {
        config.data.abnormal_csv.clone()
    };
    let mut normal = load_csv(&normal_path)?;
    if normal.label == Label::Unknown {
        normal.label = Label::Normal;
    }
    let others = abnormal_paths
        .iter()
        .map(|p| {
            let mut b = load_csv(p)?;
            if b.label == Label::Unknown {
                b.label = Label::Abnormal;
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = preprocess(&normal, &others, &config.preprocess_config())?;

    let dir = config.preprocessed_dir();
    create_dir(&dir)?;
    for stale in listed(&dir, "test_", "")? {
        fs::remove_file(&stale)?;
        let _ = fs::remove_file(flownovel_core::datagen::sidecar_path(&stale));
    }
    let train_path = dir.join("train.csv");
    let test_normal = dir.join("test_normal.csv");
    write_csv(&out.train, &train_path)?;
    write_csv(&out.test_normal, &test_normal)?;
    let mut test_sets = Vec::new();
    for (batch, path) in out.others.iter().zip(&abnormal_paths) {
        let name = stem(path);
        let name = name.strip_prefix("abnormal_").unwrap_or(&name);
        let target = dir.join(format!("test_{name}.csv"));
        write_csv(batch, &target)?;
        test_sets.push(target);
    }
    Ok(PreprocessOutput { train: train_path, test_normal, test_sets })
}

fn load_standardized(path: &Path) -> Result<TimeSeriesBatch> {
    let batch = load_csv(path)?;
    if batch.state != PreprocessingState::Standardized || batch.normalizer.is_none() {
        return Err(Error::Contract(format!("{} has no normalizer; run preprocess first", path.display())).into());
    }
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub kind: ModelKind,
    pub model: PathBuf,
    /// Absent for LOF, which is fitted without epochs.
    pub report: Option<TrainReport>,
}

fn write_report(report: &TrainReport, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_nll,validation_nll")?;
    for r in &report.epochs {
        let v = r.validation_nll.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(f, "{},{:?},{v}", r.epoch, r.train_nll)?;
    }
    Ok(())
}

pub fn cmd_train(config: &ExperimentConfig, kind: ModelKind) -> Result<TrainOutput> {
    let data = load_standardized(&config.preprocessed_dir().join("train.csv"))?;
    let dim = data.timepoints();
    let normalizer = data.normalizer.clone();
    let init_seed = sub_seed(config.seed, 10 + kind as u64);
    let tc = config.train_config(kind);
    let (detector, report) = match kind {
        ModelKind::Maf => {
            let mc = MafConfig {
                dim,
                layers: config.maf.layers,
                hidden_sizes: config.maf.hidden_sizes.clone(),
                flip: config.maf.flip,
            };
            let mut m = MafStack::new(mc, init_seed)?;
            let report = train(&mut m, &data.data, &tc)?;
            m.normalizer = normalizer;
            (Detector::Flow(FlowModel::Maf(m)), Some(report))
        }
        ModelKind::Cnf => {
            let cc = CnfConfig {
                dim,
                hidden_sizes: config.cnf.hidden_sizes.clone(),
                diagonal_head: config.cnf.diagonal_head,
                solver: config.cnf.solver,
                ..CnfConfig::default()
            };
            let mut m = CnfModel::new(cc, init_seed)?;
            let report = train(&mut m, &data.data, &tc)?;
            m.normalizer = normalizer;
            (Detector::Flow(FlowModel::Cnf(m)), Some(report))
        }
        ModelKind::Lof => {
            let mut l = LofModel::fit(data.data.clone(), config.lof.min_pts, config.lof.metric)?;
            l.normalizer = normalizer;
            (Detector::Lof(l), None)
        }
    };
    create_dir(&config.model_dir())?;
    let path = config.model_path(kind);
    persist::save(&detector, &path)?;
    if let Some(r) = &report {
        write_report(r, &config.model_dir().join(format!("train_report_{}.csv", kind.name())))?;
    }
    Ok(TrainOutput { kind, model: path, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub test_set: String,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub results: Vec<EvalRecord>,
}

impl EvalOutput {
    pub fn find(&self, model: ModelKind, test_set: &str) -> Option<&EvalSummary> {
        self.results
            .iter()
            .find(|r| r.summary.model == model.name() && r.test_set == test_set)
            .map(|r| &r.summary)
    }

    pub fn auc(&self, model: ModelKind, tau: f64) -> Option<f64> {
        self.find(model, &format!("tau{}", tau_tag(tau))).map(|s| s.auc)
    }
}

/// Scores the held-out normal windows together with each abnormal set, for
/// every configured model.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<EvalOutput> {
    let pre = config.preprocessed_dir();
    let normal = load_standardized(&pre.join("test_normal.csv"))?;
    let sets = listed(&pre, "test_", "test_normal.csv")?;
    if sets.is_empty() {
        return Err(Error::Contract("no abnormal test sets; run preprocess first".into()).into());
    }
    let tests = sets
        .iter()
        .map(|p| Ok((stem(p).trim_start_matches("test_").to_string(), load_standardized(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let dir = config.eval_dir();
    create_dir(&dir)?;
    let mut results = Vec::new();
    for &kind in &config.eval.models {
        let path = config.model_path(kind);
        if !path.exists() {
            return Err(Error::Contract(format!("{} not found; train the {} model first", path.display(), kind.name())).into());
        }
        let detector = persist::load(&path)?;
        let normal_scores = score_batch(&detector, &normal)?;
        for (name, batch) in &tests {
            let mut abnormal = score_batch(&detector, batch)?;
            abnormal.labels.fill(Label::Abnormal);
            let set: ScoreSet = normal_scores.clone().join(abnormal);
            let (summary, curve) = summarize(&set, batch.tau, config.eval.target_fpr)?;
            let tag = format!("{}_{name}", kind.name());
            write_scores_csv(&set, &dir.join(format!("scores_{tag}.csv")))?;
            write_roc_csv(&curve, &dir.join(format!("roc_{tag}.csv")))?;
            write_histogram_csv(&histogram(&set, config.eval.histogram_bins)?, &dir.join(format!("histogram_{tag}.csv")))?;
            results.push(EvalRecord { test_set: name.clone(), summary });
        }
    }
    let out = EvalOutput { results };
    let json = serde_json::to_string_pretty(&out).map_err(Error::from)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub kind: ModelKind,
    pub samples: PathBuf,
    /// Mean autocorrelation of the generated windows at lags `0..=max_lag`.
    pub generated_acf: Vec<f64>,
    /// The same for the training windows.
    pub data_acf: Vec<f64>,
    /// The generating autocorrelation at the subsampled lags, when the
    /// training data is synthetic.
    pub reference_acf: Option<Vec<f64>>,
}

pub fn cmd_sample(config: &ExperimentConfig, kind: ModelKind) -> Result<SampleOutput> {
    if kind == ModelKind::Lof {
        return Err(CliError::Usage("LOF is not a generative model; sample needs maf or cnf".into()));
    }
    let Detector::Flow(flow) = persist::load(&config.model_path(kind))? else {
        return Err(Error::Model(format!("{} does not hold a flow", config.model_path(kind).display())).into());
    };
    let train_set = load_standardized(&config.preprocessed_dir().join("train.csv"))?;
    let count = config.sample.count;
    let samples = flow.sample(count, sub_seed(config.seed, 20 + kind as u64))?;
    let lags = (config.sample.max_lag + 1).min(flow.dim());
    let generated_acf = autocorrelation(&samples)?[..lags].to_vec();
    let data_acf = autocorrelation(&train_set.data)?[..lags].to_vec();
    let reference_acf: Option<Vec<f64>> = match train_set.tau {
        Some(tau) => {
            let spec = AutocorrSpec::new(tau)?;
            Some((0..lags).map(|k| spec.at((k * config.preprocess.stride) as f64)).collect())
        }
        None => None,
    };

    let dir = config.sample_dir();
    create_dir(&dir)?;
    let mut batch = TimeSeriesBatch::new(samples, Label::Unknown)?;
    batch.state = PreprocessingState::Standardized;
    batch.normalizer = flow.normalizer().cloned();
    let path = dir.join(format!("generated_{}.csv", kind.name()));
    write_csv(&batch, &path)?;
    let mut f = fs::File::create(dir.join(format!("acf_compare_{}.csv", kind.name())))?;
    writeln!(f, "lag,generated,data,reference")?;
    for k in 0..lags {
        let r = reference_acf.as_ref().map(|r| format!("{:?}", r[k])).unwrap_or_default();
        writeln!(f, "{k},{:?},{:?},{r}", generated_acf[k], data_acf[k])?;
    }
    Ok(SampleOutput { kind, samples: path, generated_acf, data_acf, reference_acf })
}

#[derive(Debug, Clone)]
pub struct ReproduceOutput {
    pub training: Vec<TrainOutput>,
    pub eval: EvalOutput,
    pub samples: Vec<SampleOutput>,
}

/// gen → preprocess → train every configured model → eval → sample flows.
pub fn reproduce_synthetic(config: &ExperimentConfig) -> Result<ReproduceOutput> {
    cmd_gen(config)?;
    cmd_preprocess(config)?;
    let training = config
        .eval
        .models
        .iter()
        .map(|&k| cmd_train(config, k))
        .collect::<Result<Vec<_>>>()?;
    let eval = cmd_eval(config)?;
    let samples = config
        .eval
        .models
        .iter()
        .filter(|&&k| k != ModelKind::Lof)
        .map(|&k| cmd_sample(config, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReproduceOutput { training, eval, samples })
}
