use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Adam optimizer state for an ordered list of parameter matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new<'a>(learning_rate: f64, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first_moment: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Reorders the rows of both moments of parameter `index`, so that row
    /// `i` takes the old row `order[i]`. Used when the parameter itself is
    /// row-permuted between steps.
    pub fn permute_rows(&mut self, index: usize, order: &[usize]) -> Result<()> {
        let m = self
            .first_moment
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no adam parameter {index}")))?;
        if order.len() != m.rows() {
            return Err(Error::Contract(format!(
                "row order of length {} for a parameter with {} rows",
                order.len(),
                m.rows()
            )));
        }
        self.first_moment[index] = self.first_moment[index].select_rows(order)?;
        self.second_moment[index] = self.second_moment[index].select_rows(order)?;
        Ok(())
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
