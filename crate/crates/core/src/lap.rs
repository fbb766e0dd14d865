//! Exact linear sum assignment.
//!
//! Shortest augmenting path Hungarian method, O(n^3) per solve, followed by
//! a refinement pass that moves to the lexicographically smallest optimal
//! assignment so results do not depend on solver internals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of similarity (or cost) scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SimilarityMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged similarity matrix".into()));
        }
        Ok(SimilarityMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        SimilarityMatrix {
            rows,
            cols,
            data: (0..rows * cols).map(|k| f(k / cols, k % cols)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `sum_j self[assignment[j], j]`, accumulated in column order.
    pub fn objective(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(j, &r)| self.get(r, j)).sum()
    }
}

/// Row assigned to each column of the optimal assignment; maximizes
/// `sum_j S[p[j], j]` when `maximize`, minimizes it otherwise. Among optimal
/// assignments the lexicographically smallest `p` is returned.
pub fn linear_sum_assignment(s: &SimilarityMatrix, maximize: bool) -> Result<Vec<usize>> {
    if s.rows != s.cols {
        return Err(Error::Shape(format!(
            "assignment needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    if s.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("assignment matrix has non-finite entries".into()));
    }
    let n = s.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = if maximize {
        SimilarityMatrix {
            data: s.data.iter().map(|v| -v).collect(),
            ..s.clone()
        }
    } else {
        s.clone()
    };

    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let (mut assignment, duals) = hungarian_with_duals(&cost, &all_rows, &all_cols);
    let best = cost.objective(&assignment);
    let scale = cost.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 8.0 * n as f64 * f64::EPSILON * scale;
    // Every optimal assignment only uses edges of zero reduced cost, so edges
    // with clearly positive reduced cost need no re-solve.
    let slack_tol = 1e-9 * n as f64 * scale.max(1.0);
    let tight = |r: usize, j: usize| cost.get(r, j) - duals.0[r] - duals.1[j] <= slack_tol;

    // Lexicographic refinement: fix columns left to right, trying every
    // smaller free row that still admits an optimal completion.
    let mut used = vec![false; n];
    for j in 0..n {
        let current = assignment[j];
        let rest_cols: Vec<usize> = (j + 1..n).collect();
        for r in (0..current).filter(|&r| !used[r] && tight(r, j)) {
            let rest_rows: Vec<usize> = (0..n).filter(|&x| !used[x] && x != r).collect();
            let sub = hungarian(&cost, &rest_rows, &rest_cols);
            let mut candidate = assignment[..j].to_vec();
            candidate.push(r);
            candidate.extend(sub);
            if cost.objective(&candidate) <= best + tol {
                assignment = candidate;
                break;
            }
        }
        used[assignment[j]] = true;
    }
    Ok(assignment)
}

/// Minimum-cost assignment of `rows` to `cols` (equal lengths) within `cost`.
/// Returns, for each entry of `cols`, the assigned row index of `cost`.
fn hungarian(cost: &SimilarityMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    hungarian_with_duals(cost, rows, cols).0
}

/// As [`hungarian`], also returning the row and column potentials (indexed
/// like `rows` and `cols`).
fn hungarian_with_duals(cost: &SimilarityMatrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, (Vec<f64>, Vec<f64>)) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (Vec::new(), (Vec::new(), Vec::new()));
    }
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let assignment = (1..=n).map(|j| rows[row_of_col[j] - 1]).collect();
    (assignment, (u[1..].to_vec(), v[1..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn identity_and_swap() {
        assert_eq!(
            linear_sum_assignment(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), true).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            linear_sum_assignment(&m(&[&[0.0, 1.0], &[1.0, 0.0]]), true).unwrap(),
            vec![1, 0]
        );
        assert_eq!(
            linear_sum_assignment(&m(&[&[0.0, 1.0], &[1.0, 0.0]]), false).unwrap(),
            vec![0, 1]
        );
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = SimilarityMatrix::from_fn(5, 5, |_, _| 3.0);
        assert_eq!(linear_sum_assignment(&flat, true).unwrap(), vec![0, 1, 2, 3, 4]);
        // rows 0 and 1 are identical, both optimal pairings tie
        let s = m(&[&[2.0, 5.0, 0.0], &[2.0, 5.0, 0.0], &[0.0, 0.0, 9.0]]);
        assert_eq!(linear_sum_assignment(&s, true).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        let rect = SimilarityMatrix::zeros(2, 3);
        assert!(linear_sum_assignment(&rect, true).is_err());
        let nan = m(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        assert!(linear_sum_assignment(&nan, true).is_err());
        assert!(SimilarityMatrix::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn empty_and_single() {
        assert!(linear_sum_assignment(&SimilarityMatrix::zeros(0, 0), true)
            .unwrap()
            .is_empty());
        assert_eq!(linear_sum_assignment(&m(&[&[-4.0]]), true).unwrap(), vec![0]);
    }

    #[test]
    fn known_minimum() {
        let s = m(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0], &[3.0, 2.0, 2.0]]);
        let p = linear_sum_assignment(&s, false).unwrap();
        assert_eq!(s.objective(&p), 5.0);
    }
}
