//! Minimum-cost square assignment via shortest augmenting paths (O(n³)),
//! with a lexicographic refinement pass so tied optima resolve to the
//! smallest permutation.

use crate::error::{Error, Result};

const TIE_TOL: f64 = 1e-9;

fn validate(cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::shape("hungarian: empty cost matrix"));
    }
    for row in cost {
        if row.len() != n {
            return Err(Error::shape(format!(
                "hungarian: non-square matrix ({n} rows, row of {} columns)",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hungarian: non-finite cost entry".into()));
        }
    }
    Ok(n)
}

/// Core solver; `cost` must be square and finite. Returns (permutation,
/// total cost) where `perm[row] = column`.
fn solve(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    // 1-indexed potentials/matching, column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // row matched to column (1-based; 0 = free)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            perm[matched_row[j] - 1] = j - 1;
        }
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (perm, total)
}

/// Minimum-cost assignment of rows to columns.
///
/// Returns the permutation (`perm[i]` is the column assigned to row `i`)
/// and its total cost. Among cost-equal optima the lexicographically
/// smallest permutation is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = validate(cost)?;
    let (_, best) = solve(cost);
    let scale = 1.0 + cost.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = TIE_TOL * scale;

    // Fix rows greedily: the smallest column whose choice still completes
    // to the optimal total.
    let mut perm = vec![0usize; n];
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let free: Vec<usize> = (0..n).filter(|&j| !used[j]).collect();
        let mut chosen = None;
        for &j in &free {
            let sub_rows: Vec<usize> = ((i + 1)..n).collect();
            let sub_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let sub_total = if sub_rows.is_empty() {
                0.0
            } else {
                let sub: Vec<Vec<f64>> = sub_rows
                    .iter()
                    .map(|&r| sub_cols.iter().map(|&c| cost[r][c]).collect())
                    .collect();
                solve(&sub).1
            };
            if (fixed_cost + cost[i][j] + sub_total - best).abs() <= tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal column always exists");
        perm[i] = j;
        used[j] = true;
        fixed_cost += cost[i][j];
    }
    Ok((perm, fixed_cost))
}
