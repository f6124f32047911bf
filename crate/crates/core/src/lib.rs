//! Flow-based novelty detection for univariate time series.
//!
//! Masked autoregressive flows and a continuous flow with a MADE drift are
//! trained on normal windows and score unseen windows by exact
//! log-likelihood; a Local Outlier Factor detector serves as baseline.

pub mod autodiff;
pub mod cnf;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flow;
pub mod lof;
pub mod made;
pub mod maf;
pub mod ode;
pub mod optim;
pub mod persist;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
