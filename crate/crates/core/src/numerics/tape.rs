//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::gradient`] on a `1x1` output walks the record backwards and
//! returns one gradient matrix per requested parameter, each with the
//! parameter's shape. Parameters that the output does not depend on get an
//! all-zero gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{softmax_in_place, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowBroadcast(usize, usize),
    MulConst(usize, Matrix),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    XLogX(usize),
    L2NormalizeRows(usize, f64),
    SoftmaxRows(usize),
    LogSumExpRows(usize, Option<Matrix>),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    Diag(usize),
    DiagEmbed(usize),
    SelectRows(usize, Vec<usize>),
    HConcat(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.transpose();
        Ok(self.push(value, Op::Transpose(ia)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.hadamard(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.scale(s);
        Ok(self.push(value, Op::Scale(ia, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v + s);
        Ok(self.push(value, Op::AddScalar(ia)))
    }

    /// Adds a `1 x cols` row to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Result<Var> {
        let (im, ir) = (self.idx(m)?, self.idx(row)?);
        let (mv, rv) = (&self.nodes[im].value, &self.nodes[ir].value);
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: mv.shape(),
                right: rv.shape(),
            });
        }
        let mut value = mv.clone();
        let bias = rv.row(0).to_vec();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast(im, ir)))
    }

    /// Elementwise product with a constant matrix (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.hadamard(&c)?;
        Ok(self.push(value, Op::MulConst(ia, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu(ia)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(f64::exp);
        if !value.is_finite() {
            return Err(Error::Degenerate("exp overflowed".into()));
        }
        Ok(self.push(value, Op::Exp(ia)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::Degenerate("logarithm of a non-positive entry".into()));
        }
        let value = x.map(f64::ln);
        Ok(self.push(value, Op::Ln(ia)))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(f64::abs);
        Ok(self.push(value, Op::Abs(ia)))
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`. Negative entries are rejected.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("x ln x of a negative entry".into()));
        }
        let value = x.map(xlogx);
        Ok(self.push(value, Op::XLogX(ia)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.l2_normalize_rows(eps);
        Ok(self.push(value, Op::L2NormalizeRows(ia, eps)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.softmax_rows();
        Ok(self.push(value, Op::SoftmaxRows(ia)))
    }

    /// Row-wise `ln sum exp`, producing an `rows x 1` column. With a mask,
    /// only entries where the mask is nonzero take part; every row must keep
    /// at least one entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Matrix>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if let Some(m) = &mask {
            if m.shape() != x.shape() {
                return Err(Error::Shape {
                    op: "logsumexp_rows",
                    left: x.shape(),
                    right: m.shape(),
                });
            }
            if m.row_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
                return Err(Error::Contract("logsumexp mask removes a whole row".into()));
            }
        }
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m.get(r, c) != 0.0);
            let row = x.row(r);
            let max = (0..row.len())
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..row.len())
                .filter(|&c| keep(c))
                .map(|c| (row[c] - max).exp())
                .sum();
            out.push(max + total.ln());
        }
        let value = Matrix::from_parts(x.rows(), 1, out);
        Ok(self.push(value, Op::LogSumExpRows(ia, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Matrix::from_parts(1, 1, vec![self.nodes[ia].value.sum()]);
        Ok(self.push(value, Op::Sum(ia)))
    }

    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let value = Matrix::from_parts(x.rows(), 1, x.row_sums());
        Ok(self.push(value, Op::RowSums(ia)))
    }

    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let value = Matrix::from_parts(1, x.cols(), x.col_sums());
        Ok(self.push(value, Op::ColSums(ia)))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rows() != x.cols() {
            return Err(Error::Shape {
                op: "diag",
                left: x.shape(),
                right: x.shape(),
            });
        }
        let value = Matrix::from_parts(x.rows(), 1, (0..x.rows()).map(|i| x.get(i, i)).collect());
        Ok(self.push(value, Op::Diag(ia)))
    }

    /// Square matrix with the given column on its diagonal.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.cols() != 1 {
            return Err(Error::Shape {
                op: "diag_embed",
                left: x.shape(),
                right: (x.rows(), 1),
            });
        }
        let n = x.rows();
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            value.set(i, i, x.get(i, 0));
        }
        Ok(self.push(value, Op::DiagEmbed(ia)))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(ia, indices.to_vec())))
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.hconcat(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::HConcat(ia, ib)))
    }

    /// Gradient of the `1x1` output `loss` with respect to each of `params`.
    pub fn gradient(&self, loss: Var, params: &[Var]) -> Result<Vec<Matrix>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "gradient",
                left: self.nodes[il].value.shape(),
                right: (1, 1),
            });
        }
        for &p in params {
            if p.tape != self.id
                || p.index >= self.nodes.len()
                || !matches!(self.nodes[p.index].op, Op::Param)
            {
                return Err(Error::UnknownParameter);
            }
        }

        let mut grads: Vec<Option<Matrix>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param | Op::Constant => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.nodes[*b].value)?;
                    let gb = g.hadamard(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::AddRowBroadcast(m, r) => {
                    let gr = Matrix::from_parts(1, g.cols(), g.col_sums());
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *m, g);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.hadamard(c)?),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.hadamard(&node.value)?),
                Op::Ln(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, "ln", |g, x| g / x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, "abs", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::XLogX(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, "xlogx", |g, x| {
                        if x > 0.0 {
                            g * (x.ln() + 1.0)
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= *eps {
                            continue;
                        }
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for (o, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for (o, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *o = yv * (*o - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a, mask) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let lse = node.value.get(r, 0);
                        let gr = g.get(r, 0);
                        for c in 0..x.cols() {
                            let keep = mask.as_ref().is_none_or(|m| m.get(r, c) != 0.0);
                            if keep {
                                ga.set(r, c, gr * (x.get(r, c) - lse).exp());
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::RowSums(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).fill(g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColSums(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(g.row(0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let n = g.rows();
                    let mut ga = Matrix::zeros(n, n);
                    for i in 0..n {
                        ga.set(i, i, g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::DiagEmbed(a) => {
                    let n = g.rows();
                    let ga = Matrix::from_parts(n, 1, (0..n).map(|i| g.get(i, i)).collect());
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, indices) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for (k, &src) in indices.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::HConcat(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let mut left = Vec::with_capacity(g.rows() * ca);
                    let mut right = Vec::with_capacity(g.rows() * cb);
                    for r in g.row_iter() {
                        left.extend_from_slice(&r[..ca]);
                        right.extend_from_slice(&r[ca..]);
                    }
                    accumulate(&mut grads, *a, Matrix::from_parts(g.rows(), ca, left));
                    accumulate(&mut grads, *b, Matrix::from_parts(g.rows(), cb, right));
                }
            }
        }

        Ok(params
            .iter()
            .map(|p| {
                grads
                    .get_mut(p.index)
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = self.nodes[p.index].value.shape();
                        Matrix::zeros(r, c)
                    })
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Softmax over a single slice, exposed for callers that work row by row.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Central differences of `f` at every entry of `x`.
    fn finite_diff(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn sum_and_half_square_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        let mut tape = Tape::new();
        let p = tape.param(m.clone());
        let s = tape.sum(p).unwrap();
        assert_eq!(tape.gradient(s, &[p]).unwrap()[0], Matrix::filled(3, 4, 1.0));

        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.gradient(half, &[p]).unwrap();
        assert!(g[0].max_abs_diff(&m).unwrap() < 1e-15);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::filled(2, 2, 3.0));
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.gradient(s, &[p]).unwrap()[0], Matrix::zeros(2, 2));
    }

    #[test]
    fn unknown_parameters_are_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let p = tape.param(Matrix::filled(1, 1, 1.0));
        let c = tape.constant(Matrix::filled(1, 1, 1.0));
        let q = other.param(Matrix::filled(1, 1, 1.0));
        let s = tape.sum(p).unwrap();
        assert!(matches!(tape.gradient(s, &[q]), Err(Error::UnknownParameter)));
        assert!(matches!(tape.gradient(s, &[c]), Err(Error::UnknownParameter)));
        assert!(tape.add(p, q).is_err());
    }

    #[test]
    fn gradient_requires_scalar_output() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::filled(2, 1, 1.0));
        assert!(tape.gradient(p, &[p]).is_err());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(4, 3, &mut rng);
        let b = random(3, 4, &mut rng);
        let bias = random(1, 4, &mut rng);
        let mask = Matrix::from_rows(&[
            [1.0, 0.0, 1.0, 1.0],
            [1.0, 1.0, 0.0, 1.0],
            [0.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let weights = random(4, 4, &mut rng);

        // one composite expression that exercises every recorded op
        let build = |tape: &mut Tape, a: Var, b: Var, bias: Var| -> Var {
            let ab = tape.matmul(a, b).unwrap();
            let ab = tape.add_row_broadcast(ab, bias).unwrap();
            let r = tape.relu(ab).unwrap();
            let n = tape.l2_normalize_rows(ab, 1e-12).unwrap();
            let sm = tape.softmax_rows(n).unwrap();
            let t = tape.transpose(sm).unwrap();
            let tt = tape.transpose(t).unwrap();
            let prod = tape.mul(tt, r).unwrap();
            let lse = tape.logsumexp_rows(n, Some(mask.clone())).unwrap();
            let lse_full = tape.logsumexp_rows(ab, None).unwrap();
            let diag = tape.diag(ab).unwrap();
            let emb = tape.diag_embed(diag).unwrap();
            let sel = tape.select_rows(emb, &[0, 2, 2, 3]).unwrap();
            let ex = tape.exp(sel).unwrap();
            let pos = tape.add_scalar(ex, 0.5).unwrap();
            let lg = tape.ln(pos).unwrap();
            let shifted = tape.add_scalar(n, -0.1).unwrap();
            let ab2 = tape.abs(shifted).unwrap();
            let xl = tape.xlogx(sm).unwrap();
            let cs = tape.col_sums(sm).unwrap();
            let csl = tape.xlogx(cs).unwrap();
            let rs = tape.row_sums(prod).unwrap();
            let cat = tape.hconcat(lse, rs).unwrap();
            let cat2 = tape.hconcat(cat, lse_full).unwrap();
            let w = tape.mul_const(lg, weights.clone()).unwrap();
            let d = tape.sub(w, ab2).unwrap();
            let mut total = tape.sum(d).unwrap();
            for v in [xl, csl, cat2] {
                let s = tape.sum(v).unwrap();
                total = tape.add(total, s).unwrap();
            }
            tape.scale(total, 0.7).unwrap()
        };

        let mut tape = Tape::new();
        let (pa, pb, pbias) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(bias.clone()));
        let loss = build(&mut tape, pa, pb, pbias);
        let grads = tape.gradient(loss, &[pa, pb, pbias]).unwrap();

        let eval = |a: &Matrix, b: &Matrix, bias: &Matrix| {
            let mut t = Tape::new();
            let (x, y, z) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(bias.clone()));
            let l = build(&mut t, x, y, z);
            t.scalar(l)
        };
        assert_close(&grads[0], &finite_diff(&a, &|m| eval(m, &b, &bias)), 1e-5);
        assert_close(&grads[1], &finite_diff(&b, &|m| eval(&a, m, &bias)), 1e-5);
        assert_close(&grads[2], &finite_diff(&bias, &|m| eval(&a, &b, m)), 1e-5);
    }

    #[test]
    fn abs_subgradient_at_kink_is_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::filled(1, 2, 0.0));
        let a = tape.abs(p).unwrap();
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.gradient(s, &[p]).unwrap()[0], Matrix::zeros(1, 2));
    }

    #[test]
    fn rejects_invalid_domains() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::from_rows(&[[1.0, -1.0]]).unwrap());
        assert!(matches!(tape.ln(p), Err(Error::Degenerate(_))));
        assert!(matches!(tape.xlogx(p), Err(Error::Contract(_))));
        let mask = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(tape.logsumexp_rows(p, Some(mask)).is_err());
    }
}
