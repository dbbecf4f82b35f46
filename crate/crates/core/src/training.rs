//! Two-phase training: a warm-up on the sample contrastive loss and the
//! attention regularizer, one Hungarian alignment of the view-2 prototypes,
//! then the full objective for the remaining epochs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{solve_assignment, view_forward, MetricScores};
use crate::data::{InstanceKind, MultiViewDataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss_on_tape, LossBreakdown, LossConfig, LossInputVars};
use crate::model::{dual_attention_on_tape, encode_on_tape, Model, ModelConfig, ViewVars};
use crate::numerics::{cosine_similarity, AdamState, Matrix, Tape, Var};
use crate::seeded_rng;

pub const HIGH_MISSING_BATCH_SIZE: usize = 128;
pub const HIGH_MISSING_LEARNING_RATE: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Encoder hidden widths.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub clusters: usize,
    /// Must stay off: the prototype loss is only meaningful after alignment.
    pub warmup_prototype_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 150,
            warmup_epochs: 50,
            batch_size: 1024,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            hidden: vec![256, 256],
            feature_dim: 64,
            clusters: 3,
            warmup_prototype_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warm-up of {} epochs exceeds the {} total epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.warmup_prototype_loss {
            return Err(Error::Config(
                "the prototype loss cannot run during warm-up, before prototypes are aligned".into(),
            ));
        }
        self.loss.validate()?;
        self.model_config([1, 1]).validate()
    }

    pub fn model_config(&self, input_dims: [usize; 2]) -> ModelConfig {
        ModelConfig {
            input_dims,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            clusters: self.clusters,
            seed: self.seed,
        }
    }

    /// Small batches and a lower learning rate, used at high missing rates.
    pub fn with_high_missing_overrides(mut self) -> Self {
        self.batch_size = HIGH_MISSING_BATCH_SIZE;
        self.learning_rate = HIGH_MISSING_LEARNING_RATE;
        self
    }

    fn warmup_loss(&self) -> LossConfig {
        LossConfig {
            enable_prototype: false,
            ..self.loss.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Full,
}

/// One line of the training log: batch-averaged losses of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_sample: f64,
    pub l_prototype: f64,
    pub l_regularizer: f64,
    pub total: f64,
    pub phase: Phase,
}

impl EpochRecord {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            l_sample: self.l_sample,
            l_prototype: self.l_prototype,
            l_regularizer: self.l_regularizer,
            total: self.total,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// View-2 prototype order chosen by the alignment: new row `i` is old
    /// row `alignment[i]`.
    pub alignment: Option<Vec<usize>>,
    pub metrics: Option<MetricScores>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.history {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub kinds: Vec<InstanceKind>,
}

impl Batch {
    pub fn complete_count(&self) -> usize {
        self.kinds.iter().filter(|&&k| k == InstanceKind::Complete).count()
    }
}

/// Shuffled batches of one epoch, deterministic in `(seed, epoch)`. The last
/// batch holds the remainder; a batch size above `n` gives one full batch.
pub fn make_batches(ds: &MultiViewDataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seeded_rng(seed, crate::STREAM_BATCHES + epoch as u64));
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
            kinds: c.iter().map(|&i| ds.kind(i)).collect(),
        })
        .collect())
}

/// Records the loss of one batch on `tape`. Each view sees the batch rows
/// observed in it; the sample loss pairs the complete rows, the prototype
/// loss needs both views present, and the regularizer covers every present
/// view.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &[ViewVars; 2],
    ds: &MultiViewDataset,
    batch: &[usize],
    cfg: &LossConfig,
) -> Result<crate::losses::LossVars> {
    let mut outputs = [None, None];
    // position of each batch entry within its view's rows
    let mut position = [vec![None; batch.len()], vec![None; batch.len()]];
    for view in 0..2 {
        let rows: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|&(_, &i)| ds.mask()[i][view])
            .map(|(b, &i)| {
                position[view][b] = Some(0);
                i
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        for (next, p) in position[view].iter_mut().flatten().enumerate() {
            *p = next;
        }
        let raw = tape.constant(ds.view(view).select_rows(&rows)?);
        let x = encode_on_tape(tape, raw, &vars[view].encoder)?;
        outputs[view] = Some(dual_attention_on_tape(tape, x, &vars[view])?);
    }

    let (pos1, pos2): (Vec<usize>, Vec<usize>) = position[0]
        .iter()
        .zip(&position[1])
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    let samples = match (&outputs[0], &outputs[1]) {
        (Some(o1), Some(o2)) if !pos1.is_empty() => Some((
            tape.select_rows(o1.samples, &pos1)?,
            tape.select_rows(o2.samples, &pos2)?,
        )),
        _ => None,
    };
    let prototypes = match (&outputs[0], &outputs[1]) {
        (Some(o1), Some(o2)) => Some((o1.prototypes, o2.prototypes)),
        _ => None,
    };
    let attention: Vec<Var> = outputs.iter().flatten().map(|o| o.attention).collect();
    total_loss_on_tape(
        tape,
        LossInputVars {
            samples,
            prototypes,
            attention: &attention,
        },
        cfg,
    )
}

/// Prototype matching between views from their representations: entry `i`
/// is the view-2 row paired with view-1 row `i`, maximizing the summed
/// cosine similarity.
pub fn match_prototypes(u1: &Matrix, u2: &Matrix) -> Result<Vec<usize>> {
    if u1.shape() != u2.shape() {
        return Err(Error::Shape {
            op: "match_prototypes",
            left: u1.shape(),
            right: u2.shape(),
        });
    }
    let k = u1.rows();
    let mut cost = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            cost.set(i, j, -cosine_similarity(u1.row(i), u2.row(j))?);
        }
    }
    Ok(solve_assignment(&cost)?
        .permutation()
        .expect("square problems assign every row"))
}

/// Reorders the view-2 prototypes to match view 1, judged on the prototype
/// representations of all complete instances. Returns the order applied.
pub fn align_prototypes(model: &mut Model, ds: &MultiViewDataset) -> Result<Vec<usize>> {
    let complete = ds.complete_indices();
    if complete.is_empty() {
        return Err(Error::Contract("alignment needs at least one complete instance".into()));
    }
    let u1 = view_forward(model, ds, 0, &complete)?.output.prototypes;
    let u2 = view_forward(model, ds, 1, &complete)?.output.prototypes;
    let order = match_prototypes(&u1, &u2)?;
    model.views[1].prototypes = model.views[1].prototypes.select_rows(&order)?;
    Ok(order)
}

/// Owns the model and optimizer through both phases.
pub struct Trainer<'a> {
    ds: &'a MultiViewDataset,
    cfg: TrainConfig,
    model: Model,
    optimizer: AdamState,
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, ds: &'a MultiViewDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let dims = [ds.view(0).cols(), ds.view(1).cols()];
        if dims != model.config.input_dims {
            return Err(Error::Shape {
                op: "train",
                left: (dims[0], dims[1]),
                right: (model.config.input_dims[0], model.config.input_dims[1]),
            });
        }
        if ds.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let optimizer = AdamState::new(
            cfg.learning_rate,
            model.views.iter().flat_map(|v| v.params()),
        );
        Ok(Trainer {
            ds,
            cfg,
            model,
            optimizer,
            report: TrainReport::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epochs_run(&self) -> usize {
        self.report.history.len()
    }

    pub fn warmup(&mut self) -> Result<()> {
        let loss = self.cfg.warmup_loss();
        for _ in 0..self.cfg.warmup_epochs {
            self.epoch(&loss, Phase::Warmup)?;
        }
        Ok(())
    }

    /// Aligns the view-2 prototypes and carries the optimizer moments of
    /// those rows along with them.
    pub fn align(&mut self) -> Result<Vec<usize>> {
        let order = align_prototypes(&mut self.model, self.ds)?;
        let index = self.model.views[0].params().len() + self.model.views[1].params().len() - 1;
        self.optimizer.permute_rows(index, &order)?;
        self.report.alignment = Some(order.clone());
        Ok(order)
    }

    pub fn train_full(&mut self) -> Result<()> {
        let loss = self.cfg.loss.clone();
        while self.epochs_run() < self.cfg.total_epochs {
            self.epoch(&loss, Phase::Full)?;
        }
        Ok(())
    }

    pub fn finish(self) -> (Model, TrainReport) {
        (self.model, self.report)
    }

    fn epoch(&mut self, loss: &LossConfig, phase: Phase) -> Result<()> {
        let start = Instant::now();
        let epoch = self.epochs_run() + 1;
        let batches = make_batches(self.ds, self.cfg.batch_size, self.cfg.seed, epoch)?;
        let mut sum = [0.0; 4];
        for batch in &batches {
            let b = self.step(&batch.indices, loss, epoch)?;
            for (s, v) in sum.iter_mut().zip([b.l_sample, b.l_prototype, b.l_regularizer, b.total]) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        self.report.history.push(EpochRecord {
            epoch,
            l_sample: sum[0] / n,
            l_prototype: sum[1] / n,
            l_regularizer: sum[2] / n,
            total: sum[3] / n,
            phase,
        });
        self.report.epoch_seconds.push(start.elapsed().as_secs_f64());
        Ok(())
    }

    fn step(&mut self, batch: &[usize], loss: &LossConfig, epoch: usize) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = [
            self.model.views[0].register(&mut tape, true),
            self.model.views[1].register(&mut tape, true),
        ];
        let lv = batch_loss(&mut tape, &vars, self.ds, batch, loss)?;
        let b = lv.breakdown(&tape);
        for (term, v) in [
            ("l_sample", b.l_sample),
            ("l_prototype", b.l_prototype),
            ("l_regularizer", b.l_regularizer),
            ("total", b.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, epoch });
            }
        }
        let params: Vec<Var> = vars.iter().flat_map(|v| v.params()).collect();
        let grads = tape.gradient(lv.total, &params)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { term: "gradient", epoch });
        }
        let mut targets: Vec<&mut Matrix> = self.model.views.iter_mut().flat_map(|v| v.params_mut()).collect();
        self.optimizer.step(&mut targets, &grads)?;
        Ok(b)
    }
}

/// Warm-up, alignment and full training from a freshly initialized model.
pub fn train(ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config([ds.view(0).cols(), ds.view(1).cols()]))?;
    train_model(model, ds, cfg)
}

pub fn train_model(model: Model, ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut trainer = Trainer::new(model, ds, cfg.clone())?;
    trainer.warmup()?;
    trainer.align()?;
    trainer.train_full()?;
    Ok(trainer.finish())
}
