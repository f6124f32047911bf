use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flownovel::commands::{cmd_eval, cmd_gen, cmd_preprocess, cmd_sample, cmd_train, reproduce_synthetic};
use flownovel::{CliError, ExperimentConfig, ModelKind};

/// Flow-based novelty detection for univariate time series.
#[derive(Debug, Parser)]
#[command(name = "flownovel", version)]
struct Cli {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config and FLOWNOVEL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic normal and abnormal sets.
    Gen,
    /// Split, subsample, window and standardize.
    Preprocess,
    /// Train a flow or fit LOF on the preprocessed training windows.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the test sets and write ROC, histogram and summary files.
    Eval {
        /// Models to evaluate (default: all configured).
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Vec<ModelKind>,
        /// False-positive budget for the reported decision boundary.
        #[arg(long)]
        target_fpr: Option<f64>,
    },
    /// Draw samples from a trained flow and compare autocorrelations.
    Sample {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run gen, preprocess, train, eval and sample in one go.
    ReproduceSynthetic {
        #[arg(long)]
        maf_epochs: Option<usize>,
        #[arg(long)]
        cnf_epochs: Option<usize>,
        /// RK4 steps of the continuous flow.
        #[arg(long)]
        cnf_steps: Option<usize>,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply_env()?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    match &cli.command {
        Command::Train { model, epochs: Some(e) } => match model {
            ModelKind::Maf => config.maf.epochs = *e,
            ModelKind::Cnf => config.cnf.epochs = *e,
            ModelKind::Lof => {}
        },
        Command::Eval { models, target_fpr } => {
            if !models.is_empty() {
                config.eval.models = models.clone();
            }
            if let Some(t) = target_fpr {
                config.eval.target_fpr = *t;
            }
        }
        Command::Sample { count: Some(n), .. } => config.sample.count = *n,
        Command::ReproduceSynthetic { maf_epochs, cnf_epochs, cnf_steps } => {
            config.maf.epochs = maf_epochs.unwrap_or(config.maf.epochs);
            config.cnf.epochs = cnf_epochs.unwrap_or(config.cnf.epochs);
            config.cnf.solver.step_count = cnf_steps.unwrap_or(config.cnf.solver.step_count);
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve(&cli)?;
    match cli.command {
        Command::Gen => {
            let out = cmd_gen(&config)?;
            println!("wrote {} and {} abnormal sets", out.normal.display(), out.abnormal.len());
        }
        Command::Preprocess => {
            let out = cmd_preprocess(&config)?;
            println!("wrote {} and {} test sets", out.train.display(), out.test_sets.len() + 1);
        }
        Command::Train { model, .. } => {
            let out = cmd_train(&config, model)?;
            match &out.report {
                Some(r) => println!(
                    "{}: epoch {} selected, NLL per timepoint {:.4}; saved {}",
                    model.name(),
                    r.selected_epoch,
                    r.selected_per_dim_nll(),
                    out.model.display()
                ),
                None => println!("{}: fitted; saved {}", model.name(), out.model.display()),
            }
        }
        Command::Eval { .. } => {
            for r in cmd_eval(&config)?.results {
                println!("{:<4} {:<10} AUC {:.4}", r.summary.model, r.test_set, r.summary.auc);
            }
        }
        Command::Sample { model, .. } => {
            let out = cmd_sample(&config, model)?;
            println!("wrote {}", out.samples.display());
        }
        Command::ReproduceSynthetic { .. } => {
            let out = reproduce_synthetic(&config)?;
            for r in out.eval.results {
                println!("{:<4} {:<10} AUC {:.4}", r.summary.model, r.test_set, r.summary.auc);
            }
        }
        Command::ShowConfig => println!("{}", config.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
