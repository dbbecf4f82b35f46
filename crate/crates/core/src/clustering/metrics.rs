//! Clustering accuracy under the best label matching, NMI with
//! arithmetic-mean normalization, and the adjusted Rand index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn score(pred: &[usize], truth: &[usize]) -> Result<MetricScores> {
    Ok(MetricScores {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
    })
}

/// Contingency counts: `table[p][t]` instances with predicted cluster `p`
/// and true class `t`, after relabeling both sides densely in sorted order.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("cannot score an empty labeling".into()));
    }
    let dense = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let mut ids: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
        for (i, id) in ids.values_mut().enumerate() {
            *id = i;
        }
        ids
    };
    let (pi, ti) = (dense(pred), dense(truth));
    let mut table = vec![vec![0u64; ti.len()]; pi.len()];
    for (p, t) in pred.iter().zip(truth) {
        table[pi[p]][ti[t]] += 1;
    }
    Ok(table)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let cost = Matrix::from_rows(
        &table
            .iter()
            .map(|r| r.iter().map(|&c| -(c as f64)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )?;
    let matched = -solve_assignment(&cost)?.cost;
    Ok(matched / pred.len() as f64)
}

/// Sums in ascending order, so relabeling (which only reorders the terms)
/// leaves the result bit-identical.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    ordered_sum(
        counts
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

/// Mutual information over the mean of the two entropies. Two single-cluster
/// labelings score 1; a single-cluster labeling against anything else
/// scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let row: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let (hp, ht) = (entropy(row.iter().copied(), n), entropy(col.iter().copied(), n));
    if row.len() == 1 && col.len() == 1 {
        return Ok(1.0);
    }
    let mean = 0.5 * (hp + ht);
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let mut terms = Vec::new();
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                terms.push(c / n * (c * n / (row[i] as f64 * col[j] as f64)).ln());
            }
        }
    }
    let mi = ordered_sum(terms);
    Ok((mi / mean).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> i128 {
    let c = i128::from(c);
    c * (c - 1) / 2
}

/// Adjusted Rand index, computed on exact integer pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as u64;
    let index: i128 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_rows: i128 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sum_cols: i128 = (0..table[0].len())
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n);
    // (index - expected) / (max - expected), scaled by 2 * total
    let num = 2 * (index * total - sum_rows * sum_cols);
    let den = (sum_rows + sum_cols) * total - 2 * sum_rows * sum_cols;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}
