//! Per-view encoder, the sample/prototype dual attention layer and
//! prototype-based recovery of missing views.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var, NORM_EPS};
use crate::seeded_rng;

/// Allowed deviation of an attention row sum from one before recovery
/// refuses the input.
const ROW_STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw feature dimension of each view.
    pub input_dims: [usize; 2],
    /// Hidden widths of the encoder MLP.
    pub hidden: Vec<usize>,
    /// Shared feature dimension `d`.
    pub feature_dim: usize,
    /// Number of prototypes per view, equal to the target cluster count.
    pub clusters: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dims: [usize; 2], clusters: usize, seed: u64) -> Self {
        ModelConfig {
            input_dims,
            hidden: vec![256, 256],
            feature_dim: 64,
            clusters,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0) || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Config("cluster count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in x out`, applied as `x W + b`.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    /// MLP `dims[0] -> dims[1] -> ... -> dims[last]` with Xavier-uniform
    /// weights and zero biases.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: xavier_uniform(w[0], w[1], rng),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("encoder needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::Shape {
                    op: "encoder bias",
                    left: l.weight.shape(),
                    right: l.bias.shape(),
                });
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.weight.rows() != l.weight.cols() {
                    return Err(Error::Shape {
                        op: "encoder layer chain",
                        left: l.weight.shape(),
                        right: next.weight.shape(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Trainable state of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub encoder: EncoderParams,
    /// Projects samples before they are scored against prototypes.
    pub sample_query: Matrix,
    /// Projects prototypes before they are scored against samples.
    pub prototype_key: Matrix,
    /// Projects samples aggregated into prototype representations.
    pub sample_value: Matrix,
    /// Projects prototypes aggregated into sample representations.
    pub prototype_value: Matrix,
    /// `K x d` learnable prototypes.
    pub prototypes: Matrix,
}

impl ViewParams {
    pub fn init(input_dim: usize, hidden: &[usize], feature_dim: usize, clusters: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let encoder = EncoderParams::init(&dims, rng);
        let d = feature_dim;
        let sample_query = xavier_uniform(d, d, rng);
        let prototype_key = xavier_uniform(d, d, rng);
        let sample_value = xavier_uniform(d, d, rng);
        let prototype_value = xavier_uniform(d, d, rng);
        let gauss: Vec<f64> = (0..clusters * d).map(|_| StandardNormal.sample(rng)).collect();
        let prototypes = Matrix::from_parts(clusters, d, gauss).l2_normalize_rows(NORM_EPS);
        ViewParams {
            encoder,
            sample_query,
            prototype_key,
            sample_value,
            prototype_value,
            prototypes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn clusters(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.feature_dim();
        if self.encoder.output_dim() != d {
            return Err(Error::Shape {
                op: "encoder output",
                left: (1, self.encoder.output_dim()),
                right: self.prototypes.shape(),
            });
        }
        for (name, w) in [
            ("sample_query", &self.sample_query),
            ("prototype_key", &self.prototype_key),
            ("sample_value", &self.sample_value),
            ("prototype_value", &self.prototype_value),
        ] {
            if w.shape() != (d, d) {
                return Err(Error::Shape {
                    op: name,
                    left: w.shape(),
                    right: (d, d),
                });
            }
        }
        Ok(())
    }

    /// Parameters in a fixed order shared by [`Self::params_mut`] and
    /// [`Self::register`].
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.encoder.layers.len() + 5);
        for l in &self.encoder.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.sample_query,
            &self.prototype_key,
            &self.sample_value,
            &self.prototype_value,
            &self.prototypes,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.encoder.layers.len() + 5);
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.sample_query,
            &mut self.prototype_key,
            &mut self.sample_value,
            &mut self.prototype_value,
            &mut self.prototypes,
        ]);
        out
    }

    /// Records this view's parameters on `tape`, as trainable leaves or as
    /// constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ViewVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        ViewVars {
            encoder,
            sample_query: leaf(&self.sample_query),
            prototype_key: leaf(&self.prototype_key),
            sample_value: leaf(&self.sample_value),
            prototype_value: leaf(&self.prototype_value),
            prototypes: leaf(&self.prototypes),
            feature_dim: self.feature_dim(),
        }
    }
}

/// Tape handles for one view's parameters.
#[derive(Clone, Debug)]
pub struct ViewVars {
    pub encoder: Vec<(Var, Var)>,
    pub sample_query: Var,
    pub prototype_key: Var,
    pub sample_value: Var,
    pub prototype_value: Var,
    pub prototypes: Var,
    feature_dim: usize,
}

impl ViewVars {
    pub fn params(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([
            self.sample_query,
            self.prototype_key,
            self.sample_value,
            self.prototype_value,
            self.prototypes,
        ]);
        out
    }
}

/// Attention, sample representations and prototype representations of
/// one view for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DualAttentionOutput {
    /// `N x K`, row-stochastic.
    pub attention: Matrix,
    /// `N x d`.
    pub samples: Matrix,
    /// `K x d`.
    pub prototypes: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct DualAttentionVars {
    pub attention: Var,
    pub samples: Var,
    pub prototypes: Var,
}

/// How a missing view's representation is rebuilt from the observed one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryStrategy {
    /// Observed sample plus the missing view's prototypes weighted by the
    /// observed view's attention.
    #[default]
    Default,
    /// Observed sample plus the observed view's own prototypes.
    PrototypesFromObservedView,
    /// Twice the attention-weighted missing-view prototypes.
    PrototypesFromMissingViewOnly,
    /// Twice the observed sample.
    SamplesFromObservedViewOnly,
}

impl RecoveryStrategy {
    pub const ALL: [RecoveryStrategy; 4] = [
        RecoveryStrategy::PrototypesFromObservedView,
        RecoveryStrategy::PrototypesFromMissingViewOnly,
        RecoveryStrategy::SamplesFromObservedViewOnly,
        RecoveryStrategy::Default,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecoveryStrategy::Default => "default",
            RecoveryStrategy::PrototypesFromObservedView => "prototypes-from-observed-view",
            RecoveryStrategy::PrototypesFromMissingViewOnly => "prototypes-from-missing-view-only",
            RecoveryStrategy::SamplesFromObservedViewOnly => "samples-from-observed-view-only",
        }
    }
}

impl fmt::Display for RecoveryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecoveryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecoveryStrategy::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown recovery strategy `{s}`")))
    }
}

/// Both views' parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub views: [ViewParams; 2],
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, crate::STREAM_MODEL_INIT);
        let views = [0, 1].map(|v| {
            ViewParams::init(
                config.input_dims[v],
                &config.hidden,
                config.feature_dim,
                config.clusters,
                &mut rng,
            )
        });
        Ok(Model { config, views })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (v, vp) in self.views.iter().enumerate() {
            vp.validate()?;
            if vp.encoder.input_dim() != self.config.input_dims[v]
                || vp.clusters() != self.config.clusters
                || vp.feature_dim() != self.config.feature_dim
            {
                return Err(Error::Contract(format!(
                    "view {} parameters disagree with the model configuration",
                    v + 1
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Model = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_parts(fan_in, fan_out, data)
}

/// Encoder forward pass on a tape: affine layers with ReLU in between,
/// followed by row-wise L2 normalization.
pub fn encode_on_tape(tape: &mut Tape, raw: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut h = raw;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row_broadcast(h, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    tape.l2_normalize_rows(h, NORM_EPS)
}

/// Dual attention forward pass on a tape.
///
/// `A = softmax(x Wq (C Wk)^T / sqrt(d))`, `Z = x + A norm(C Wpv)`,
/// `U = C + A^T (x Wsv)`.
pub fn dual_attention_on_tape(tape: &mut Tape, x: Var, vv: &ViewVars) -> Result<DualAttentionVars> {
    let d = vv.feature_dim;
    let xv = tape.value(x);
    if xv.cols() != d {
        return Err(Error::Shape {
            op: "dual_attention",
            left: xv.shape(),
            right: tape.value(vv.prototypes).shape(),
        });
    }
    let logits = attention_logits_on_tape(tape, x, vv)?;
    let attention = tape.softmax_rows(logits)?;

    let proto_values = tape.matmul(vv.prototypes, vv.prototype_value)?;
    let proto_values = tape.l2_normalize_rows(proto_values, NORM_EPS)?;
    let attended = tape.matmul(attention, proto_values)?;
    let samples = tape.add(x, attended)?;

    let sample_values = tape.matmul(x, vv.sample_value)?;
    let at = tape.transpose(attention)?;
    let gathered = tape.matmul(at, sample_values)?;
    let prototypes = tape.add(vv.prototypes, gathered)?;

    Ok(DualAttentionVars {
        attention,
        samples,
        prototypes,
    })
}

fn attention_logits_on_tape(tape: &mut Tape, x: Var, vv: &ViewVars) -> Result<Var> {
    let q = tape.matmul(x, vv.sample_query)?;
    let k = tape.matmul(vv.prototypes, vv.prototype_key)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    tape.scale(logits, 1.0 / (vv.feature_dim as f64).sqrt())
}

pub fn encode(raw: &Matrix, enc: &EncoderParams) -> Result<Matrix> {
    enc.validate()?;
    if raw.cols() != enc.input_dim() {
        return Err(Error::Shape {
            op: "encode",
            left: raw.shape(),
            right: enc.layers[0].weight.shape(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(raw.clone());
    let layers: Vec<(Var, Var)> = enc
        .layers
        .iter()
        .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
        .collect();
    let out = encode_on_tape(&mut tape, x, &layers)?;
    Ok(tape.value(out).clone())
}

/// Pre-softmax attention scores of `x` against the view's prototypes.
pub fn attention_logits(x: &Matrix, vp: &ViewParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vv = vp.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let logits = attention_logits_on_tape(&mut tape, xv, &vv)?;
    Ok(tape.value(logits).clone())
}

pub fn dual_attention(x: &Matrix, vp: &ViewParams) -> Result<DualAttentionOutput> {
    let mut tape = Tape::new();
    let vv = vp.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = dual_attention_on_tape(&mut tape, xv, &vv)?;
    Ok(DualAttentionOutput {
        attention: tape.value(out.attention).clone(),
        samples: tape.value(out.samples).clone(),
        prototypes: tape.value(out.prototypes).clone(),
    })
}

/// Row-normalized `C Wpv` of a view: the prototype vectors that get
/// aggregated into sample representations.
pub fn prototype_values(vp: &ViewParams) -> Result<Matrix> {
    Ok(vp
        .prototypes
        .matmul(&vp.prototype_value)?
        .l2_normalize_rows(NORM_EPS))
}

/// Rebuilds the missing view's representation for samples observed in the
/// other view. `observed` holds their encoded features and `attention`
/// their attention in the observed view.
pub fn impute(
    observed: &Matrix,
    attention: &Matrix,
    missing_view: &ViewParams,
    strategy: RecoveryStrategy,
    observed_view: &ViewParams,
) -> Result<Matrix> {
    if attention.rows() != observed.rows() {
        return Err(Error::Shape {
            op: "impute",
            left: observed.shape(),
            right: attention.shape(),
        });
    }
    for (i, s) in attention.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > ROW_STOCHASTIC_TOL || attention.row(i).iter().any(|&a| a < 0.0) {
            return Err(Error::Contract(format!(
                "attention row {i} is not stochastic (sum {s})"
            )));
        }
    }
    let source = match strategy {
        RecoveryStrategy::PrototypesFromObservedView => observed_view,
        _ => missing_view,
    };
    let check = |vp: &ViewParams| -> Result<()> {
        if vp.feature_dim() != observed.cols() || vp.clusters() != attention.cols() {
            return Err(Error::Shape {
                op: "impute",
                left: (attention.cols(), observed.cols()),
                right: vp.prototypes.shape(),
            });
        }
        Ok(())
    };
    check(missing_view)?;
    check(observed_view)?;

    match strategy {
        RecoveryStrategy::Default | RecoveryStrategy::PrototypesFromObservedView => {
            observed.add(&attention.matmul(&prototype_values(source)?)?)
        }
        RecoveryStrategy::PrototypesFromMissingViewOnly => {
            Ok(attention.matmul(&prototype_values(source)?)?.scale(2.0))
        }
        RecoveryStrategy::SamplesFromObservedViewOnly => Ok(observed.scale(2.0)),
    }
}
