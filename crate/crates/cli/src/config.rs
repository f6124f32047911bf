//! Experiment configuration: one JSON document, every field optional.

use std::fs;
use std::path::{Path, PathBuf};

use flownovel_core::datagen::{PreprocessConfig, RenormMode};
use flownovel_core::lof::Metric;
use flownovel_core::ode::SolverConfig;
use flownovel_core::optim::AdamConfig;
use flownovel_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "FLOWNOVEL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Maf,
    Cnf,
    Lof,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Maf => "maf",
            ModelKind::Cnf => "cnf",
            ModelKind::Lof => "lof",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessSettings,
    pub training: TrainingSettings,
    pub maf: MafSettings,
    pub cnf: CnfSettings,
    pub lof: LofSettings,
    pub eval: EvalSettings,
    pub sample: SampleSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("flownovel-out"),
            data: DataConfig::default(),
            preprocess: PreprocessSettings::default(),
            training: TrainingSettings::default(),
            maf: MafSettings::default(),
            cnf: CnfSettings::default(),
            lof: LofSettings::default(),
            eval: EvalSettings::default(),
            sample: SampleSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub normal_tau: f64,
    pub abnormal_taus: Vec<f64>,
    pub timepoints: usize,
    pub samples: usize,
    pub abnormal_samples: usize,
    pub renorm: RenormMode,
    /// External data used instead of the synthetic sets when given.
    pub normal_csv: Option<PathBuf>,
    pub abnormal_csv: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            normal_tau: 50.0,
            abnormal_taus: vec![40.0, 30.0, 20.0],
            timepoints: 1000,
            samples: 1000,
            abnormal_samples: 1000,
            renorm: RenormMode::StdRatio,
            normal_csv: None,
            abnormal_csv: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub train_fraction: f64,
    pub stride: usize,
    pub window: usize,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        let d = PreprocessConfig::default();
        Self {
            train_fraction: d.train_fraction,
            stride: d.stride,
            window: d.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub restore_best: bool,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.adam.learning_rate,
            weight_decay: t.adam.weight_decay,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            restore_best: t.restore_best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MafSettings {
    pub layers: usize,
    pub hidden_sizes: Vec<usize>,
    pub flip: bool,
    pub epochs: usize,
}

impl Default for MafSettings {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden_sizes: vec![256, 256, 256],
            flip: true,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnfSettings {
    pub hidden_sizes: Vec<usize>,
    pub diagonal_head: bool,
    pub epochs: usize,
    pub solver: SolverConfig,
}

impl Default for CnfSettings {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![256, 256],
            diagonal_head: true,
            epochs: 140,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofSettings {
    pub min_pts: usize,
    pub metric: Metric,
}

impl Default for LofSettings {
    fn default() -> Self {
        Self {
            min_pts: 50,
            metric: Metric::Chebyshev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub models: Vec<ModelKind>,
    pub target_fpr: f64,
    pub histogram_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Maf, ModelKind::Cnf, ModelKind::Lof],
            target_fpr: 0.0,
            histogram_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub count: usize,
    pub max_lag: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { count: 1000, max_lag: 30 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if !(self.data.normal_tau > 0.0) || self.data.abnormal_taus.iter().any(|t| !(*t > 0.0)) {
            return bad("decay times must be positive");
        }
        if self.data.samples < 2 || self.data.timepoints == 0 {
            return bad("need at least two samples and one timepoint");
        }
        if self.training.batch_size == 0 || !(self.training.learning_rate > 0.0) {
            return bad("batch size and learning rate must be positive");
        }
        if self.maf.layers == 0 {
            return bad("MAF needs at least one layer");
        }
        if !(0.0..=1.0).contains(&self.eval.target_fpr) {
            return bad("target FPR must be in [0, 1]");
        }
        self.cnf.solver.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            train_fraction: self.preprocess.train_fraction,
            stride: self.preprocess.stride,
            window: self.preprocess.window,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        TrainConfig {
            epochs: match kind {
                ModelKind::Maf => self.maf.epochs,
                ModelKind::Cnf => self.cnf.epochs,
                ModelKind::Lof => 0,
            },
            batch_size: self.training.batch_size,
            adam: AdamConfig {
                learning_rate: self.training.learning_rate,
                weight_decay: self.training.weight_decay,
                ..AdamConfig::default()
            },
            seed: self.seed.wrapping_add(100 + kind as u64),
            validation_fraction: self.training.validation_fraction,
            restore_best: self.training.restore_best,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.output_dir.join("preprocessed")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    pub fn sample_dir(&self) -> PathBuf {
        self.output_dir.join("sample")
    }

    pub fn model_path(&self, kind: ModelKind) -> PathBuf {
        self.model_dir().join(format!("model_{}.json", kind.name()))
    }
}
