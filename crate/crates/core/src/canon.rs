//! Canonical form of boundary coupling matrices.
//!
//! Every `Q ∈ R^{k×l}` admits `L·Q·U = Q⁰` with `L` invertible lower
//! triangular, `U` unit upper triangular and `Q⁰` having at most one nonzero
//! entry per row and column, equal to 1. `Q⁰` is unique; `L` and `U` are not.
//!
//! The factors are computed by a single top-to-bottom row sweep: the pivot of
//! a row is its leftmost nonzero entry, the row is scaled to a unit pivot,
//! entries to the right of the pivot are cleared by column operations and
//! entries below it by row operations.

use nalgebra::DMatrix;

/// Relative threshold (against the largest entry of the input) below which an
/// entry counts as zero during the sweep.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalDecomposition {
    pub l: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub canonical: DMatrix<f64>,
    /// 0-based `(row, column)` positions of the unit entries, rows strictly increasing.
    pub pivots: Vec<(usize, usize)>,
}

impl CanonicalDecomposition {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    /// Pivot column `c_α` for each pivot row, 0-based.
    pub fn pivot_columns(&self) -> Vec<usize> {
        self.pivots.iter().map(|&(_, c)| c).collect()
    }
}

/// Computes `Q⁰`, `L`, `U` and the pivot positions of `q`.
pub fn canonical_form(q: &DMatrix<f64>) -> CanonicalDecomposition {
    let (k, l) = q.shape();
    let scale = q.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let tol = ZERO_THRESHOLD * scale;

    let mut w = q.clone();
    let mut lf = DMatrix::<f64>::identity(k, k);
    let mut uf = DMatrix::<f64>::identity(l, l);
    let mut pivots = Vec::new();

    if scale == 0.0 {
        return CanonicalDecomposition {
            l: lf,
            u: uf,
            canonical: DMatrix::zeros(k, l),
            pivots,
        };
    }

    for r in 0..k {
        let Some(c) = (0..l).find(|&j| w[(r, j)].abs() > tol) else {
            continue;
        };

        let s = 1.0 / w[(r, c)];
        w.row_mut(r).scale_mut(s);
        lf.row_mut(r).scale_mut(s);
        w[(r, c)] = 1.0;

        // col_j -= w[r, j] * col_c for j > c
        for j in c + 1..l {
            let f = w[(r, j)];
            if f == 0.0 {
                continue;
            }
            for i in 0..k {
                let v = w[(i, c)];
                w[(i, j)] -= f * v;
            }
            for i in 0..l {
                let v = uf[(i, c)];
                uf[(i, j)] -= f * v;
            }
            w[(r, j)] = 0.0;
        }

        // row_i -= w[i, c] * row_r for i > r
        for i in r + 1..k {
            let f = w[(i, c)];
            if f == 0.0 {
                continue;
            }
            for j in 0..l {
                let v = w[(r, j)];
                w[(i, j)] -= f * v;
            }
            for j in 0..k {
                let v = lf[(r, j)];
                lf[(i, j)] -= f * v;
            }
            w[(i, c)] = 0.0;
        }

        pivots.push((r, c));
    }

    let mut canonical = DMatrix::zeros(k, l);
    for &(r, c) in &pivots {
        canonical[(r, c)] = 1.0;
    }
    CanonicalDecomposition {
        l: lf,
        u: uf,
        canonical,
        pivots,
    }
}

/// `Q̌₀[i, j] = Q1[m-1-i, p-1-j]` (0-based): the coupling seen after
/// reflecting `x ↦ 1-x` and relabelling the components backwards.
pub fn reversed_for_q1(q1: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, p) = q1.shape();
    DMatrix::from_fn(m, p, |i, j| q1[(m - 1 - i, p - 1 - j)])
}

/// Rank as the number of canonical pivots.
pub fn rank(q: &DMatrix<f64>) -> usize {
    canonical_form(q).rank()
}

/// A unit vector spanning part of the null space of `a` (`a·v = 0`), or
/// `None` if `a` has full column rank. Uses reduced row echelon form with
/// partial pivoting.
pub fn null_vector(a: &DMatrix<f64>) -> Option<nalgebra::DVector<f64>> {
    let (rows, cols) = a.shape();
    let scale = a.iter().fold(0.0_f64, |acc, b| acc.max(b.abs()));
    if scale == 0.0 {
        let mut v = nalgebra::DVector::zeros(cols);
        v[0] = 1.0;
        return Some(v);
    }
    let tol = ZERO_THRESHOLD * scale * (rows.max(cols) as f64);
    let mut w = a.clone();
    let mut pivot_cols = Vec::new();
    let mut row = 0;
    for c in 0..cols {
        if row == rows {
            break;
        }
        let (best, val) = (row..rows)
            .map(|i| (i, w[(i, c)].abs()))
            .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= tol {
            continue;
        }
        w.swap_rows(row, best);
        let s = 1.0 / w[(row, c)];
        w.row_mut(row).scale_mut(s);
        for i in 0..rows {
            if i != row {
                let f = w[(i, c)];
                if f != 0.0 {
                    for j in 0..cols {
                        let v = w[(row, j)];
                        w[(i, j)] -= f * v;
                    }
                }
            }
        }
        pivot_cols.push(c);
        row += 1;
    }
    let free = (0..cols).find(|c| !pivot_cols.contains(c))?;
    let mut v = nalgebra::DVector::zeros(cols);
    v[free] = 1.0;
    for (r, &pc) in pivot_cols.iter().enumerate() {
        v[pc] = -w[(r, free)];
    }
    let norm = v.norm();
    Some(v / norm)
}
