//! Mini-batch maximum-likelihood training shared by the flow models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

/// A model trained by minimizing mean negative log-likelihood.
pub trait Trainable {
    fn dim(&self) -> usize;
    fn parameters(&self) -> Vec<Tensor>;
    fn set_parameters(&mut self, params: &[Tensor]) -> Result<()>;
    /// Mean NLL of `x` recorded on `tape`, with `leaves` standing for
    /// [`Trainable::parameters`] in order.
    fn batch_nll<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>], x: &Tensor) -> Result<Var<'t>>;
    /// Mean NLL of `x` evaluated eagerly. May be `+inf` when samples diverge.
    fn eval_nll(&self, x: &Tensor) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of the training rows held out for validation.
    pub validation_fraction: f64,
    /// Restore the parameters of the epoch with the lowest validation NLL.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            adam: AdamConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean NLL per sample (summed over timepoints).
    pub train_nll: f64,
    pub validation_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dim: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub selected_epoch: usize,
}

impl TrainReport {
    pub fn final_record(&self) -> &EpochRecord {
        self.epochs.last().expect("report has the epoch-0 record")
    }

    pub fn selected_record(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }

    /// NLL per timepoint of the selected epoch on validation data (train
    /// data when no validation split was made).
    pub fn selected_per_dim_nll(&self) -> f64 {
        let r = self.selected_record();
        r.validation_nll.unwrap_or(r.train_nll) / self.dim as f64
    }
}

fn split_rows(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

pub fn train<M: Trainable>(model: &mut M, data: &Tensor, config: &TrainConfig) -> Result<TrainReport> {
    if data.shape().len() != 2 || data.cols() != model.dim() {
        return Err(Error::dim("train", data.shape(), &[0, model.dim()]));
    }
    if data.rows() == 0 || config.batch_size == 0 {
        return Err(Error::contract("training needs data and a positive batch size"));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::contract("validation fraction must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = split_rows(data.rows(), config.validation_fraction, &mut rng);
    let train_x = data.select_rows(&train_idx);
    let val_x = (!val_idx.is_empty()).then(|| data.select_rows(&val_idx));

    let mut params = model.parameters();
    let mut adam = AdamState::new(config.adam, &params);
    let validate = |m: &M| -> Result<Option<f64>> { val_x.as_ref().map(|v| m.eval_nll(v)).transpose() };

    let mut records = vec![EpochRecord {
        epoch: 0,
        train_nll: model.eval_nll(&train_x)?,
        validation_nll: validate(model)?,
    }];
    let mut best = (records[0].validation_nll.unwrap_or(f64::INFINITY), 0, params.clone());

    let mut order = train_idx.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.select_rows(chunk);
            let tape = Tape::new();
            let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = model.batch_nll(&tape, &leaves, &batch)?;
            let nll = loss.value().item().unwrap_or(f64::NAN);
            if !nll.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: b, nll });
            }
            let grads = tape.backward(&loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|l| grads.get(l)).collect();
            drop(tape);
            adam.step(&mut params, &grads)?;
            model.set_parameters(&params)?;
            total += nll * chunk.len() as f64;
        }
        let validation_nll = validate(model)?;
        if let Some(v) = validation_nll {
            if v < best.0 {
                best = (v, epoch, params.clone());
            }
        }
        records.push(EpochRecord {
            epoch,
            train_nll: total / order.len() as f64,
            validation_nll,
        });
    }

    let selected_epoch = if config.restore_best && val_x.is_some() {
        model.set_parameters(&best.2)?;
        best.1
    } else {
        config.epochs
    };
    Ok(TrainReport {
        dim: model.dim(),
        epochs: records,
        selected_epoch,
    })
}
