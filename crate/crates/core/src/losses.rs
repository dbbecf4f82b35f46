//! Sample-level contrastive loss, bounded prototype contrastive loss and the
//! attention regularizer, plus their sum.
//!
//! Every loss is built on a [`Tape`] so the training loop can differentiate
//! it; the `&Matrix` entry points evaluate the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature of the sample contrastive loss.
    pub tau_sample: f64,
    /// Temperature of the prototype contrastive loss.
    pub tau_prototype: f64,
    /// Target cross-view similarity of matched prototypes.
    pub alpha: f64,
    /// Weight of the attention sharpness term.
    pub beta: f64,
    pub enable_sample: bool,
    pub enable_prototype: bool,
    pub enable_regularizer: bool,
    /// Keep the `j = i` same-view term in the sample loss denominator.
    pub include_self_pair: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_sample: 0.5,
            tau_prototype: 2.0,
            alpha: 0.75,
            beta: 0.02,
            enable_sample: true,
            enable_prototype: true,
            enable_regularizer: true,
            include_self_pair: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sample > 0.0 && self.tau_sample.is_finite()) {
            return Err(Error::Config(format!("tau_sample must be positive, got {}", self.tau_sample)));
        }
        if !(self.tau_prototype > 0.0 && self.tau_prototype.is_finite()) {
            return Err(Error::Config(format!(
                "tau_prototype must be positive, got {}",
                self.tau_prototype
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sample: f64,
    pub l_prototype: f64,
    pub l_regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(l_sample: f64, l_prototype: f64, l_regularizer: f64) -> Self {
        LossBreakdown {
            l_sample,
            l_prototype,
            l_regularizer,
            total: l_sample + l_prototype + l_regularizer,
        }
    }
}

fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    if let Some(i) = m.row_norms().iter().position(|&n| n <= NORM_EPS) {
        return Err(Error::Degenerate(format!("{what} row {i} is zero")));
    }
    Ok(())
}

fn check_pair(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape {
            op: "contrastive loss",
            left: av.shape(),
            right: bv.shape(),
        });
    }
    check_nonzero_rows(av, what)?;
    check_nonzero_rows(bv, what)
}

/// Cosine-similarity matrix between the rows of `a` and the rows of `b`,
/// given their row-normalized versions.
fn similarity(tape: &mut Tape, a_unit: Var, b_unit: Var) -> Result<Var> {
    let bt = tape.transpose(b_unit)?;
    tape.matmul(a_unit, bt)
}

/// Sample contrastive loss between matched rows of two views.
pub fn sample_contrastive_on_tape(tape: &mut Tape, z1: Var, z2: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, z1, z2, "sample")?;
    let n1 = tape.l2_normalize_rows(z1, NORM_EPS)?;
    let n2 = tape.l2_normalize_rows(z2, NORM_EPS)?;
    let s11 = similarity(tape, n1, n1)?;
    let s12 = similarity(tape, n1, n2)?;
    let s22 = similarity(tape, n2, n2)?;
    sample_contrastive_from_similarity_vars(tape, s11, s12, s22, cfg)
}

/// Sample contrastive loss expressed on the three similarity matrices
/// `s11 = s(z1_i, z1_j)`, `s12 = s(z1_i, z2_j)` and `s22 = s(z2_i, z2_j)`.
pub fn sample_contrastive_from_similarity_vars(
    tape: &mut Tape,
    s11: Var,
    s12: Var,
    s22: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = tape.value(s12).rows();
    for s in [s11, s12, s22] {
        if tape.value(s).shape() != (n, n) {
            return Err(Error::Shape {
                op: "sample_contrastive",
                left: tape.value(s).shape(),
                right: (n, n),
            });
        }
    }
    let mask = if cfg.include_self_pair {
        None
    } else {
        let mut m = Matrix::filled(n, 2 * n, 1.0);
        for i in 0..n {
            m.set(i, i, 0.0);
        }
        Some(m)
    };
    let s21 = tape.transpose(s12)?;
    let inv_tau = 1.0 / cfg.tau_sample;

    let mut total: Option<Var> = None;
    for (same, cross) in [(s11, s12), (s22, s21)] {
        let row = tape.hconcat(same, cross)?;
        let row = tape.scale(row, inv_tau)?;
        let lse = tape.logsumexp_rows(row, mask.clone())?;
        let pos = tape.diag(cross)?;
        let pos = tape.scale(pos, inv_tau)?;
        let per_sample = tape.sub(lse, pos)?;
        let s = tape.sum(per_sample)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("two directions");
    tape.scale(total, 1.0 / (2.0 * n as f64))
}

/// Bounded contrastive loss between the prototype representations of the
/// two views. Row `i` of each view is the positive pair.
pub fn prototype_contrastive_on_tape(tape: &mut Tape, u1: Var, u2: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, u1, u2, "prototype")?;
    let k = tape.value(u1).rows();
    let units = [tape.l2_normalize_rows(u1, NORM_EPS)?, tape.l2_normalize_rows(u2, NORM_EPS)?];
    let inv_tau = 1.0 / cfg.tau_prototype;
    let mut off_diag = Matrix::filled(k, k, 1.0);
    for i in 0..k {
        off_diag.set(i, i, 0.0);
    }

    // |s - alpha| / tau on the diagonal of a similarity matrix
    let bounded = |tape: &mut Tape, s: Var| -> Result<Var> {
        let d = tape.diag(s)?;
        let d = tape.add_scalar(d, -cfg.alpha)?;
        let d = tape.abs(d)?;
        tape.scale(d, inv_tau)
    };

    let cross = similarity(tape, units[0], units[1])?;
    let pos = bounded(tape, cross)?;
    let first = tape.sum(pos)?;
    let first = tape.scale(first, 2.0 / k as f64)?;

    let mut second: Option<Var> = None;
    for a in 0..2 {
        for b in 0..2 {
            let s = if (a, b) == (0, 1) {
                cross
            } else {
                similarity(tape, units[a], units[b])?
            };
            let pos = bounded(tape, s)?;
            let diag = tape.diag_embed(pos)?;
            let neg = tape.scale(s, inv_tau)?;
            let neg = tape.mul_const(neg, off_diag.clone())?;
            let logits = tape.add(neg, diag)?;
            let lse = tape.logsumexp_rows(logits, None)?;
            let term = tape.sum(lse)?;
            second = Some(match second {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    let second = second.expect("four view pairs");
    let second = tape.scale(second, 1.0 / k as f64)?;
    tape.add(first, second)
}

/// Attention regularizer summed over views: column-mass entropy term minus
/// `beta` times the per-entry entropy term, with `0 ln 0 = 0`.
pub fn attention_regularizer_on_tape(tape: &mut Tape, attention: &[Var], cfg: &LossConfig) -> Result<Var> {
    if attention.is_empty() {
        return Err(Error::Contract("attention regularizer needs at least one view".into()));
    }
    let mut total: Option<Var> = None;
    for &a in attention {
        if tape.value(a).as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("attention has a negative entry".into()));
        }
        let cols = tape.col_sums(a)?;
        let col_term = tape.xlogx(cols)?;
        let col_term = tape.sum(col_term)?;
        let entry_term = tape.xlogx(a)?;
        let entry_term = tape.sum(entry_term)?;
        let entry_term = tape.scale(entry_term, cfg.beta)?;
        let view = tape.sub(col_term, entry_term)?;
        total = Some(match total {
            Some(t) => tape.add(t, view)?,
            None => view,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Per-term tape handles of one loss evaluation. Disabled or unavailable
/// terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sample: Option<Var>,
    pub prototype: Option<Var>,
    pub regularizer: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossBreakdown {
            l_sample: get(self.sample),
            l_prototype: get(self.prototype),
            l_regularizer: get(self.regularizer),
            total: tape.scalar(self.total),
        }
    }
}

/// Inputs of one loss evaluation on a tape. A missing input silently drops
/// the corresponding term.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossInputVars<'a> {
    /// Matched sample representations of complete instances.
    pub samples: Option<(Var, Var)>,
    /// Prototype representations of both views.
    pub prototypes: Option<(Var, Var)>,
    /// Attention of every view present in the batch.
    pub attention: &'a [Var],
}

pub fn total_loss_on_tape(tape: &mut Tape, inputs: LossInputVars<'_>, cfg: &LossConfig) -> Result<LossVars> {
    let sample = match (cfg.enable_sample, inputs.samples) {
        (true, Some((z1, z2))) => Some(sample_contrastive_on_tape(tape, z1, z2, cfg)?),
        _ => None,
    };
    let prototype = match (cfg.enable_prototype, inputs.prototypes) {
        (true, Some((u1, u2))) => Some(prototype_contrastive_on_tape(tape, u1, u2, cfg)?),
        _ => None,
    };
    let regularizer = if cfg.enable_regularizer && !inputs.attention.is_empty() {
        Some(attention_regularizer_on_tape(tape, inputs.attention, cfg)?)
    } else {
        None
    };
    let mut total = tape.constant(Matrix::zeros(1, 1));
    for term in [sample, prototype, regularizer].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(LossVars {
        sample,
        prototype,
        regularizer,
        total,
    })
}

pub fn sample_contrastive(z1: &Matrix, z2: &Matrix, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z1.clone()), tape.constant(z2.clone()));
    let l = sample_contrastive_on_tape(&mut tape, a, b, cfg)?;
    Ok(tape.scalar(l))
}

/// Sample loss from precomputed similarity matrices.
pub fn sample_contrastive_from_similarities(
    s11: &Matrix,
    s12: &Matrix,
    s22: &Matrix,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [s11, s12, s22].map(|m| tape.constant(m.clone()));
    let l = sample_contrastive_from_similarity_vars(&mut tape, vars[0], vars[1], vars[2], cfg)?;
    Ok(tape.scalar(l))
}

pub fn prototype_contrastive(u1: &Matrix, u2: &Matrix, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(u1.clone()), tape.constant(u2.clone()));
    let l = prototype_contrastive_on_tape(&mut tape, a, b, cfg)?;
    Ok(tape.scalar(l))
}

pub fn attention_regularizer(attention: &[Matrix], cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = attention.iter().map(|a| tape.constant(a.clone())).collect();
    let l = attention_regularizer_on_tape(&mut tape, &vars, cfg)?;
    Ok(tape.scalar(l))
}

/// Everything the full objective looks at for one batch.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub samples: Option<(Matrix, Matrix)>,
    pub prototypes: Option<(Matrix, Matrix)>,
    pub attention: Vec<Matrix>,
}

pub fn total_loss(inputs: &LossInputs, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut pair = |p: &Option<(Matrix, Matrix)>| {
        p.as_ref()
            .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
    };
    let samples = pair(&inputs.samples);
    let prototypes = pair(&inputs.prototypes);
    let attention: Vec<Var> = inputs.attention.iter().map(|a| tape.constant(a.clone())).collect();
    let vars = total_loss_on_tape(
        &mut tape,
        LossInputVars {
            samples,
            prototypes,
            attention: &attention,
        },
        cfg,
    )?;
    Ok(vars.breakdown(&tape))
}
