//! Dense linear-algebra helpers: determinant, linear solve, matrix
//! exponential, numerical rank.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn determinant(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(dim_err("square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("determinant input".into()));
    }
    if a.nrows() == 0 {
        return Ok(1.0);
    }
    Ok(a.clone().lu().determinant())
}

/// Solves `a x = b` by partially pivoted LU.
///
/// Fails with [`Error::Singular`] when a pivot falls below
/// `n * eps * max|a|`.
pub fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(dim_err(
            format!("{n}x{n} system with length-{n} rhs", n = a.nrows()),
            format!("{}x{} with length {}", a.nrows(), a.ncols(), b.len()),
        ));
    }
    let n = a.nrows();
    let scale = max_abs(a);
    if scale == 0.0 {
        return Err(Error::Singular);
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let threshold = n as f64 * f64::EPSILON * scale;
    if (0..n).any(|k| u[(k, k)].abs() <= threshold) {
        return Err(Error::Singular);
    }
    lu.solve(b).ok_or(Error::Singular)
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &solve_linear(a, &e)?);
    }
    Ok(out)
}

/// Matrix exponential (Pade scaling and squaring).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(dim_err("square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm input".into()));
    }
    Ok(a.exp())
}

/// Rank of the row set by Gaussian elimination with full row pivoting.
///
/// A pivot counts when its magnitude exceeds `rel_tol` times the largest
/// absolute entry of the input.
pub fn numerical_rank(rows: &[Vec<f64>], rel_tol: f64) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let scale = m.iter().flat_map(|r| r.iter()).fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let threshold = rel_tol * scale;
    let cols = m[0].len();
    let mut rank = 0;
    for c in 0..cols {
        if rank == m.len() {
            break;
        }
        let (p, pv) = (rank..m.len())
            .map(|r| (r, m[r][c].abs()))
            .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pv <= threshold {
            continue;
        }
        m.swap(rank, p);
        let pivot = m[rank].clone();
        for row in m.iter_mut().skip(rank + 1) {
            let f = row[c] / pivot[c];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(&pivot).skip(c) {
                    *x -= f * y;
                }
            }
        }
        rank += 1;
    }
    rank
}

pub fn matrix_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let rows: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    numerical_rank(&rows, rel_tol)
}
