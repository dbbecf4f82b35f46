use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use protoimpute::data::SyntheticSpec;
use protoimpute::experiment::{self, DatasetSource, ExperimentConfig, ALPHA_GRID};
use protoimpute::model::RecoveryStrategy;
use protoimpute::Result;

#[derive(Parser)]
#[command(name = "protoimpute", version, about = "Incomplete two-view clustering with prototype-based imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-view dataset directory.
    Generate(GenerateArgs),
    /// Train, cluster and score every seed.
    Train(ExperimentArgs),
    /// Score a saved checkpoint on a dataset directory.
    Evaluate(CheckpointArgs),
    /// Write the completed representation of a dataset as CSV.
    Impute(CheckpointArgs),
    /// Metrics over missing rates and seeds.
    SweepMissing {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        rates: Vec<f64>,
    },
    /// Metrics and prototype similarity over a similarity-bound and
    /// regularizer-weight grid.
    SweepParams {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ALPHA_GRID)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.02])]
        betas: Vec<f64>,
    },
    /// Loss-term and recovery-strategy ablations.
    Ablate(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 20)]
    d1: usize,
    #[arg(long, default_value_t = 30)]
    d2: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "default")]
    strategy: RecoveryStrategy,
    /// k-means seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = protoimpute::clustering::DEFAULT_RESTARTS)]
    restarts: usize,
    /// Output file (`impute` only).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Experiment settings. Flags override the config file, which overrides the
/// defaults.
#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; replaces the synthetic source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<RecoveryStrategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau_sample: Option<f64>,
    #[arg(long)]
    tau_prototype: Option<f64>,
    #[arg(long)]
    disable_sample_loss: bool,
    #[arg(long)]
    disable_prototype_loss: bool,
    #[arg(long)]
    disable_regularizer: bool,
    /// Drop the same-view self pair from the sample loss denominator.
    #[arg(long)]
    exclude_self_pair: bool,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    high_missing_threshold: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = self.data {
            cfg.source = DatasetSource::Directory { path };
        }
        if let DatasetSource::Synthetic(spec) = &mut cfg.source {
            let SyntheticSpec { n, k, separation, .. } = spec;
            set(n, self.n);
            set(k, self.k);
            set(separation, self.separation);
        }
        set(&mut cfg.missing_rate, self.missing_rate);
        set(&mut cfg.seeds, self.seeds);
        set(&mut cfg.output_dir, self.out);
        set(&mut cfg.strategy, self.strategy);
        set(&mut cfg.restarts, self.restarts);
        set(&mut cfg.high_missing_threshold, self.high_missing_threshold);
        let t = &mut cfg.train;
        set(&mut t.total_epochs, self.epochs);
        set(&mut t.warmup_epochs, self.warmup_epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.hidden, self.hidden);
        set(&mut t.feature_dim, self.feature_dim);
        let l = &mut t.loss;
        set(&mut l.alpha, self.alpha);
        set(&mut l.beta, self.beta);
        set(&mut l.tau_sample, self.tau_sample);
        set(&mut l.tau_prototype, self.tau_prototype);
        l.enable_sample &= !self.disable_sample_loss;
        l.enable_prototype &= !self.disable_prototype_loss;
        l.enable_regularizer &= !self.disable_regularizer;
        l.include_self_pair &= !self.exclude_self_pair;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let spec = SyntheticSpec {
                n: a.n,
                k: a.k,
                latent_dim: a.latent_dim,
                view_dims: [a.d1, a.d2],
                separation: a.separation,
                hidden: a.hidden,
                noise: a.noise,
                seed: a.seed,
            };
            print_json(&experiment::cmd_generate(&spec, a.missing_rate, &a.out)?)
        }
        Command::Train(exp) => {
            let (_, agg) = experiment::cmd_train(&exp.resolve()?)?;
            print_json(&agg)
        }
        Command::Evaluate(a) => print_json(&experiment::cmd_evaluate(
            &a.checkpoint,
            &a.data,
            a.strategy,
            a.seed,
            a.restarts,
        )?),
        Command::Impute(a) => {
            let out = a
                .out
                .ok_or_else(|| protoimpute::Error::Config("impute needs --out".into()))?;
            let rep = experiment::cmd_impute(&a.checkpoint, &a.data, a.strategy, &out)?;
            eprintln!("wrote {} x {} representation to {}", rep.rows(), rep.cols(), out.display());
            Ok(())
        }
        Command::SweepMissing { exp, rates } => {
            let cfg = exp.resolve()?;
            experiment::cmd_sweep_missing(&cfg, &rates)?;
            eprintln!("wrote {}", cfg.output_dir.join("sweep_missing.csv").display());
            Ok(())
        }
        Command::SweepParams { exp, alphas, betas } => {
            let cfg = exp.resolve()?;
            experiment::cmd_sweep_params(&cfg, &alphas, &betas)?;
            eprintln!("wrote {}", cfg.output_dir.join("sweep_params.csv").display());
            Ok(())
        }
        Command::Ablate(exp) => {
            let cfg = exp.resolve()?;
            experiment::cmd_ablate(&cfg)?;
            eprintln!("wrote {}", cfg.output_dir.join("ablation.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
