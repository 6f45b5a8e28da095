//! Optimal linear assignment (Hungarian algorithm) used to match particle
//! indices across shapes during initialization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Minimum-cost perfect matching of rows to columns of a square cost matrix
/// in O(n³) (shortest augmenting paths with potentials). Returns `perm` with
/// `perm[row] = column`. Entries must be finite and non-negative.
pub fn hungarian_match(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "assignment needs a non-empty square matrix, got {}×{}",
            n,
            cost.ncols()
        )));
    }
    for row in 0..n {
        for col in 0..n {
            let value = cost[(row, col)];
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidCost { row, col, value });
            }
        }
    }

    // 1-based arrays; p[j] is the row matched to column j, column 0 is the
    // virtual unmatched column that hosts the row being inserted.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![usize::MAX; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Total cost of an assignment returned by [`hungarian_match`].
pub fn assignment_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(row, &col)| cost[(row, col)])
        .sum()
}
