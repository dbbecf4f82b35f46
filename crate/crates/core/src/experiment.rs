//! Experiment runs behind the command-line tool: dataset preparation, the
//! train-and-evaluate pipeline per seed, and the sweep and ablation tables.
//! Every function is a pure function of its configuration and files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{assemble_representation, kmeans, prototype_similarity, score, ClusteringResult};
use crate::data::{
    apply_missing, generate_synthetic, load_dataset, save_dataset, write_matrix_csv, DatasetMeta, MultiViewDataset,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, RecoveryStrategy};
use crate::numerics::Matrix;
use crate::training::{train, TrainConfig, TrainReport};

/// Schema version of `metrics.json` and `aggregate.json`.
pub const METRICS_VERSION: u32 = 1;
pub const DEFAULT_HIGH_MISSING_THRESHOLD: f64 = 0.7;
pub const MAX_SWEEP_RATE: f64 = 0.9;
/// Similarity bounds swept by default.
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const BETA_GRID: [f64; 5] = [0.001, 0.02, 0.1, 0.5, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Generated per run, with the run seed replacing the spec's seed.
    Synthetic(SyntheticSpec),
    /// A dataset directory as written by `save_dataset`.
    Directory { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DatasetSource,
    pub missing_rate: f64,
    pub train: TrainConfig,
    pub strategy: RecoveryStrategy,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// k-means restarts.
    pub restarts: usize,
    /// Missing rate from which the small-batch, low-learning-rate settings
    /// apply.
    pub high_missing_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DatasetSource::default(),
            missing_rate: 0.5,
            train: TrainConfig::default(),
            strategy: RecoveryStrategy::Default,
            output_dir: PathBuf::from("runs"),
            seeds: vec![1],
            restarts: crate::clustering::DEFAULT_RESTARTS,
            high_missing_threshold: DEFAULT_HIGH_MISSING_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("k-means needs at least one restart".into()));
        }
        if let DatasetSource::Synthetic(spec) = &self.source {
            spec.validate()?;
        }
        self.train.validate()
    }

    fn with_loss(&self, loss: LossConfig) -> Self {
        let mut cfg = self.clone();
        cfg.train.loss = loss;
        cfg
    }

    fn with_rate(&self, missing_rate: f64) -> Self {
        ExperimentConfig {
            missing_rate,
            ..self.clone()
        }
    }
}

/// The dataset of one run, with the configured missing rate applied, and
/// its cluster count.
pub fn prepare_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(MultiViewDataset, usize)> {
    let (ds, k) = match &cfg.source {
        DatasetSource::Synthetic(spec) => {
            let spec = SyntheticSpec { seed, ..spec.clone() };
            (generate_synthetic(&spec)?, spec.k)
        }
        DatasetSource::Directory { path } => {
            let (ds, meta) = load_dataset(path)?;
            (ds, meta.k)
        }
    };
    if cfg.missing_rate == 0.0 {
        return Ok((ds, k));
    }
    if !ds.is_fully_observed() {
        return Err(Error::Config(
            "a missing rate can only be applied to a fully observed dataset".into(),
        ));
    }
    Ok((apply_missing(&ds, cfg.missing_rate, seed)?, k))
}

/// Training settings of one run: the run seed, the dataset's cluster count,
/// and the high-missing-rate overrides when they apply.
pub fn train_config_for(cfg: &ExperimentConfig, seed: u64, clusters: usize) -> TrainConfig {
    let mut t = TrainConfig {
        seed,
        clusters,
        ..cfg.train.clone()
    };
    if cfg.missing_rate >= cfg.high_missing_threshold {
        t = t.with_high_missing_overrides();
    }
    t
}

/// Contents of `metrics.json`. Scores are absent for unlabeled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub version: u32,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub inertia: f64,
    pub seed: u64,
}

pub fn evaluate(
    model: &Model,
    ds: &MultiViewDataset,
    strategy: RecoveryStrategy,
    seed: u64,
    restarts: usize,
) -> Result<(ClusteringResult, MetricsRecord)> {
    let rep = assemble_representation(model, ds, strategy)?;
    let clustering = kmeans(&rep, model.config.clusters, seed, restarts)?;
    let scores = ds.labels().map(|l| score(&clustering.assignments, l)).transpose()?;
    let record = MetricsRecord {
        version: METRICS_VERSION,
        acc: scores.map(|s| s.acc),
        nmi: scores.map(|s| s.nmi),
        ari: scores.map(|s| s.ari),
        inertia: clustering.inertia,
        seed,
    };
    Ok((clustering, record))
}

pub struct RunOutput {
    pub seed: u64,
    pub dataset: MultiViewDataset,
    pub model: Model,
    pub report: TrainReport,
    pub clustering: ClusteringResult,
    pub metrics: MetricsRecord,
}

/// Prepare, train, assemble, cluster and score one seed, without touching
/// the file system.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let (dataset, k) = prepare_dataset(cfg, seed)?;
    let (model, mut report) = train(&dataset, &train_config_for(cfg, seed, k))?;
    let (clustering, metrics) = evaluate(&model, &dataset, cfg.strategy, seed, cfg.restarts)?;
    if let (Some(acc), Some(nmi), Some(ari)) = (metrics.acc, metrics.nmi, metrics.ari) {
        report.metrics = Some(crate::clustering::MetricScores { acc, nmi, ari });
    }
    Ok(RunOutput {
        seed,
        dataset,
        model,
        report,
        clustering,
        metrics,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub inertia: f64,
}

/// Contents of `aggregate.json`: mean and population standard deviation
/// over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub mean: ScoreSummary,
    pub std: ScoreSummary,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Contract("nothing to aggregate".into()));
    }
    let column = |f: fn(&MetricsRecord) -> Option<f64>| -> Option<(f64, f64)> {
        let values: Option<Vec<f64>> = records.iter().map(f).collect();
        values.map(|v| mean_std(&v))
    };
    let (acc, nmi, ari) = (column(|r| r.acc), column(|r| r.nmi), column(|r| r.ari));
    let inertia = column(|r| Some(r.inertia)).expect("always present");
    Ok(Aggregate {
        version: METRICS_VERSION,
        seeds: records.iter().map(|r| r.seed).collect(),
        mean: ScoreSummary {
            acc: acc.map(|p| p.0),
            nmi: nmi.map(|p| p.0),
            ari: ari.map(|p| p.0),
            inertia: inertia.0,
        },
        std: ScoreSummary {
            acc: acc.map(|p| p.1),
            nmi: nmi.map(|p| p.1),
            ari: ari.map(|p| p.1),
            inertia: inertia.1,
        },
    })
}

/// Writes a synthetic dataset, with the missing rate applied, in the
/// dataset directory format.
pub fn cmd_generate(spec: &SyntheticSpec, missing_rate: f64, out_dir: &Path) -> Result<DatasetMeta> {
    spec.validate()?;
    let full = generate_synthetic(spec)?;
    let ds = apply_missing(&full, missing_rate, spec.seed)?;
    let meta = DatasetMeta::describe(&ds, spec.k, spec.seed);
    save_dataset(&ds, out_dir, &meta)?;
    Ok(meta)
}

/// Trains every seed and writes, per seed, `checkpoint.json`,
/// `train_log.jsonl` and `metrics.json`, plus `aggregate.json` over seeds.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(Vec<MetricsRecord>, Aggregate)> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    let records = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = run_seed(cfg, seed)?;
            let dir = seed_dir(&cfg.output_dir, seed);
            create_dir(&dir)?;
            run.model.save(&dir.join("checkpoint.json"))?;
            run.report.write_log(&dir.join("train_log.jsonl"))?;
            write_json(&dir.join("metrics.json"), &run.metrics)?;
            Ok(run.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&records)?;
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
    Ok((records, agg))
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    strategy: RecoveryStrategy,
    seed: u64,
    restarts: usize,
) -> Result<MetricsRecord> {
    let model = Model::load(checkpoint)?;
    let (ds, _) = load_dataset(dataset)?;
    Ok(evaluate(&model, &ds, strategy, seed, restarts)?.1)
}

/// Writes the completed `N x 2d` representation, missing halves rebuilt by
/// `strategy`, as CSV.
pub fn cmd_impute(checkpoint: &Path, dataset: &Path, strategy: RecoveryStrategy, out: &Path) -> Result<Matrix> {
    let model = Model::load(checkpoint)?;
    let (ds, _) = load_dataset(dataset)?;
    let rep = assemble_representation(&model, &ds, strategy)?;
    write_matrix_csv(out, &rep)?;
    Ok(rep)
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRateRow {
    pub rate: f64,
    pub seed: u64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
}

/// One row per (rate, seed), rates outermost, written to
/// `sweep_missing.csv`.
pub fn cmd_sweep_missing(cfg: &ExperimentConfig, rates: &[f64]) -> Result<Vec<MissingRateRow>> {
    if rates.is_empty() {
        return Err(Error::Config("no missing rates to sweep".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=MAX_SWEEP_RATE).contains(*r)) {
        return Err(Error::Config(format!("swept missing rates must lie in [0, 0.9], got {r}")));
    }
    for &r in rates {
        cfg.with_rate(r).validate()?;
    }
    let cells: Vec<(f64, u64)> = rates
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(rate, seed)| {
            let m = run_seed(&cfg.with_rate(rate), seed)?.metrics;
            Ok(MissingRateRow {
                rate,
                seed,
                acc: m.acc,
                nmi: m.nmi,
                ari: m.ari,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    write_table(&cfg.output_dir.join("sweep_missing.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    /// Mean cosine similarity of matched cross-view prototype
    /// representations after training.
    pub prototype_similarity: f64,
}

/// Full grid over `alphas x betas x seeds`, written to `sweep_params.csv`.
pub fn cmd_sweep_params(cfg: &ExperimentConfig, alphas: &[f64], betas: &[f64]) -> Result<Vec<ParamRow>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("parameter grids must be non-empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("similarity bounds must lie in [0, 1], got {a}")));
    }
    let mut cells = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let c = cfg.with_loss(LossConfig {
                alpha,
                beta,
                ..cfg.train.loss.clone()
            });
            c.validate()?;
            for &seed in &cfg.seeds {
                cells.push((alpha, beta, seed, c.clone()));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|(alpha, beta, seed, c)| {
            let run = run_seed(c, *seed)?;
            Ok(ParamRow {
                alpha: *alpha,
                beta: *beta,
                seed: *seed,
                acc: run.metrics.acc,
                nmi: run.metrics.nmi,
                ari: run.metrics.ari,
                prototype_similarity: prototype_similarity(&run.model, &run.dataset)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    write_table(&cfg.output_dir.join("sweep_params.csv"), &rows)?;
    Ok(rows)
}

/// Loss-term subsets of the loss ablation, in table order.
pub const LOSS_ABLATION: [(&str, bool, bool, bool); 4] = [
    ("R", false, false, true),
    ("S+R", true, false, true),
    ("P+R", false, true, true),
    ("S+P+R", true, true, true),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    Losses,
    Recovery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: AblationTable,
    pub variant: String,
    pub seed: u64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
}

/// The loss-term ablation followed by the recovery-strategy ablation, each
/// in table order with seeds innermost, written to `ablation.csv`. The
/// recovery rows re-evaluate the full-objective model of each seed.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let cells: Vec<(usize, u64)> = (0..LOSS_ABLATION.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(v, seed)| {
            let (_, s, p, r) = LOSS_ABLATION[v];
            let c = cfg.with_loss(LossConfig {
                enable_sample: s,
                enable_prototype: p,
                enable_regularizer: r,
                ..cfg.train.loss.clone()
            });
            run_seed(&c, seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<AblationRow> = cells
        .iter()
        .zip(&runs)
        .map(|(&(v, seed), run)| AblationRow {
            table: AblationTable::Losses,
            variant: LOSS_ABLATION[v].0.to_string(),
            seed,
            acc: run.metrics.acc,
            nmi: run.metrics.nmi,
            ari: run.metrics.ari,
        })
        .collect();

    let full = &runs[(LOSS_ABLATION.len() - 1) * cfg.seeds.len()..];
    let recovery = RecoveryStrategy::ALL
        .iter()
        .flat_map(|&s| full.iter().map(move |run| (s, run)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(strategy, run)| {
            let m = evaluate(&run.model, &run.dataset, strategy, run.seed, cfg.restarts)?.1;
            Ok(AblationRow {
                table: AblationTable::Recovery,
                variant: strategy.name().to_string(),
                seed: run.seed,
                acc: m.acc,
                nmi: m.nmi,
                ari: m.ari,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.extend(recovery);
    create_dir(&cfg.output_dir)?;
    write_table(&cfg.output_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}
