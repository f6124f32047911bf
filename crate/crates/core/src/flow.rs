//! Pieces shared by both flow families.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cnf::CnfModel;
use crate::datagen::Normalizer;
use crate::error::Result;
use crate::maf::MafStack;
use crate::tensor::Tensor;

/// Per-row log-densities together with divergence flags. Diverged rows
/// carry a log-density of `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowScores {
    pub log_prob: Tensor,
    pub diverged: Vec<bool>,
}

impl FlowScores {
    pub(crate) fn from_log_prob(mut log_prob: Tensor) -> Self {
        let diverged: Vec<bool> = log_prob.data().iter().map(|v| !v.is_finite()).collect();
        for (v, &bad) in log_prob.data_mut().iter_mut().zip(&diverged) {
            if bad {
                *v = f64::NEG_INFINITY;
            }
        }
        Self { log_prob, diverged }
    }

    pub fn any_diverged(&self) -> bool {
        self.diverged.iter().any(|&d| d)
    }
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_density(z: &Tensor) -> Result<Tensor> {
    let c = -0.5 * z.cols() as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(z.map(|v| -0.5 * v * v).sum_rows()?.map(|v| v + c))
}

/// A trained density model over fixed-length windows.
#[derive(Debug, Clone)]
pub enum FlowModel {
    Maf(MafStack),
    Cnf(CnfModel),
}

impl FlowModel {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowModel::Maf(_) => "maf",
            FlowModel::Cnf(_) => "cnf",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowModel::Maf(m) => m.dim(),
            FlowModel::Cnf(m) => m.dim(),
        }
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        match self {
            FlowModel::Maf(m) => m.normalizer.as_ref(),
            FlowModel::Cnf(m) => m.normalizer.as_ref(),
        }
    }

    pub fn score(&self, x: &Tensor) -> Result<FlowScores> {
        match self {
            FlowModel::Maf(m) => m.score(x),
            FlowModel::Cnf(m) => m.log_prob(x),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        match self {
            FlowModel::Maf(m) => m.sample(n, seed),
            FlowModel::Cnf(m) => m.sample(n, seed),
        }
    }

    /// Noise-space image of `x` (the "transformed samples" view).
    pub fn to_noise(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FlowModel::Maf(m) => Ok(m.forward(x)?.0),
            FlowModel::Cnf(m) => m.to_noise(x),
        }
    }
}
