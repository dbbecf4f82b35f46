//! Joint representation of observed and recovered views, k-means on it, and
//! the evaluation metrics.

mod assignment;
mod kmeans;
mod metrics;

pub use assignment::{solve_assignment, Assignment};
pub use kmeans::{kmeans, ClusteringResult, DEFAULT_RESTARTS, MAX_ITERATIONS};
pub use metrics::{accuracy, ari, contingency, nmi, score, MetricScores};

use crate::data::{InstanceKind, MultiViewDataset};
use crate::error::{Error, Result};
use crate::model::{dual_attention, encode, impute, DualAttentionOutput, Model, RecoveryStrategy};
use crate::numerics::Matrix;

/// Encoded features and attention outputs of one view for the given
/// instances, in the order given.
#[derive(Clone, Debug)]
pub struct ViewForward {
    pub encoded: Matrix,
    pub output: DualAttentionOutput,
}

pub fn view_forward(model: &Model, ds: &MultiViewDataset, view: usize, indices: &[usize]) -> Result<ViewForward> {
    let raw = ds.view(view).select_rows(indices)?;
    let encoded = encode(&raw, &model.views[view].encoder)?;
    let output = dual_attention(&encoded, &model.views[view])?;
    Ok(ViewForward { encoded, output })
}

/// Concatenated `[view 1 | view 2]` representation of every instance, with
/// the missing half of incomplete instances rebuilt by `strategy`. Rows
/// follow the dataset order.
pub fn assemble_representation(model: &Model, ds: &MultiViewDataset, strategy: RecoveryStrategy) -> Result<Matrix> {
    let d = model.config.feature_dim;
    if ds.view(0).cols() != model.config.input_dims[0] || ds.view(1).cols() != model.config.input_dims[1] {
        return Err(Error::Shape {
            op: "assemble_representation",
            left: (ds.view(0).cols(), ds.view(1).cols()),
            right: (model.config.input_dims[0], model.config.input_dims[1]),
        });
    }
    let mut out = Matrix::zeros(ds.len(), 2 * d);

    for view in 0..2 {
        let other = 1 - view;
        let observed = ds.observed_indices(view);
        if observed.is_empty() {
            continue;
        }
        let fwd = view_forward(model, ds, view, &observed)?;
        for (pos, &i) in observed.iter().enumerate() {
            out.row_mut(i)[view * d..(view + 1) * d].copy_from_slice(fwd.output.samples.row(pos));
        }

        let only: Vec<usize> = (0..observed.len())
            .filter(|&pos| ds.kind(observed[pos]) != InstanceKind::Complete)
            .collect();
        if only.is_empty() {
            continue;
        }
        let recovered = impute(
            &fwd.encoded.select_rows(&only)?,
            &fwd.output.attention.select_rows(&only)?,
            &model.views[other],
            strategy,
            &model.views[view],
        )?;
        for (r, &pos) in only.iter().enumerate() {
            let i = observed[pos];
            out.row_mut(i)[other * d..(other + 1) * d].copy_from_slice(recovered.row(r));
        }
    }
    Ok(out)
}

/// Mean cosine similarity between matched prototype representations of the
/// two views, computed on the complete instances as one batch.
pub fn prototype_similarity(model: &Model, ds: &MultiViewDataset) -> Result<f64> {
    let complete = ds.complete_indices();
    if complete.is_empty() {
        return Err(Error::Contract("no complete instance to compare prototypes on".into()));
    }
    let u1 = view_forward(model, ds, 0, &complete)?.output.prototypes;
    let u2 = view_forward(model, ds, 1, &complete)?.output.prototypes;
    let k = u1.rows();
    let mut total = 0.0;
    for i in 0..k {
        total += crate::numerics::cosine_similarity(u1.row(i), u2.row(i))?;
    }
    Ok(total / k as f64)
}
