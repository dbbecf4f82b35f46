//! Exact linear assignment by shortest augmenting paths with potentials
//! (Kuhn-Munkres), `O(n^2 m)` for an `n x m` cost matrix.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; `None` for unassigned rows of a tall
    /// matrix.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

impl Assignment {
    /// Row-to-column permutation of a square problem.
    pub fn permutation(&self) -> Option<Vec<usize>> {
        self.row_to_col.iter().copied().collect()
    }
}

/// Minimum-cost assignment of rows to distinct columns. Every row is
/// assigned when `rows <= cols`, otherwise every column is.
pub fn solve_assignment(cost: &Matrix) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(Error::Contract("assignment costs must be finite".into()));
    }
    let (rows, cols) = cost.shape();
    if rows > cols {
        let t = solve_assignment(&cost.transpose())?;
        let mut row_to_col = vec![None; rows];
        for (c, r) in t.row_to_col.iter().enumerate() {
            if let Some(r) = r {
                row_to_col[*r] = Some(c);
            }
        }
        return Ok(Assignment {
            row_to_col,
            cost: t.cost,
        });
    }

    let (n, m) = (rows, cols);
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is a virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = Some(j - 1);
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(r, c)| c.map_or(0.0, |c| cost.get(r, c)))
        .sum();
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}
