//! Dense helpers on top of nalgebra: least squares and row-major serde.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot size below which a least-squares system counts as
/// rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// Solves `min ||A x - b||` through Householder QR of the column-equilibrated
/// design matrix. Never forms `AᵀA`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    if b.len() != rows {
        return Err(Error::shape(rows, b.len()));
    }
    if rows < cols {
        return Err(Error::RankDeficient { rows, cols });
    }
    let scale: Vec<f64> = (0..cols)
        .map(|j| {
            let n = a.column(j).norm();
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::RankDeficient { rows, cols });
    }
    let mut scaled = a.clone();
    for (j, s) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if r.diagonal().iter().any(|d| d.abs() <= RANK_TOL * diag_max) {
        return Err(Error::RankDeficient { rows, cols });
    }
    let qtb = qr.q().transpose() * b;
    let y = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { rows, cols })?;
    Ok(DVector::from_iterator(cols, y.iter().zip(&scale).map(|(v, s)| v * s)))
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` non-increasing; returns `(U, s, Vᵀ)`.
///
/// nalgebra's bidiagonal iteration occasionally converges to a wrong
/// factorization on matrices with repeated entries, so its result is checked
/// against `A` and replaced by a one-sided Jacobi SVD when the residual is off.
pub fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut us = u.clone();
    for (j, sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sj);
    }
    let residual = (&us * &v_t - a).norm();
    if residual <= SVD_CHECK_TOL * a.norm().max(f64::MIN_POSITIVE) {
        return (u, s, v_t);
    }
    jacobi_svd(a)
}

const SVD_CHECK_TOL: f64 = 1e-11;

/// One-sided (Hestenes) Jacobi on the columns of `A` or `Aᵀ`, whichever is
/// taller. Slow but accurate to working precision.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let wide = a.nrows() < a.ncols();
    let mut b = if wide { a.transpose() } else { a.clone() };
    let p = b.ncols();
    let mut v = DMatrix::<f64>::identity(p, p);
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = b.column(i).norm_squared();
                let beta = b.column(j).norm_squared();
                let gamma = b.column(i).dot(&b.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut b, &mut v] {
                    for r in 0..m.nrows() {
                        let (x, y) = (m[(r, i)], m[(r, j)]);
                        m[(r, i)] = c * x - s * y;
                        m[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..p).map(|j| b.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    // Columns with a zero singular value stay zero; they never contribute.
    let left = DMatrix::from_fn(b.nrows(), p, |r, k| {
        let j = order[k];
        if norms[j] > 0.0 {
            b[(r, j)] / norms[j]
        } else {
            0.0
        }
    });
    let right = DMatrix::from_fn(p, p, |r, k| v[(r, order[k])]);
    if wide {
        (right, s, left.transpose())
    } else {
        (left, s, right.transpose())
    }
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
        return Err(Error::shape(
            format!("{n_cols} columns"),
            format!("{} columns", bad.len()),
        ));
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Serde adapter writing a matrix as nested row arrays.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Flips the sign of `v` so that its largest-magnitude entry is positive.
/// Returns whether a flip happened.
pub fn canonical_sign(v: &mut [f64]) -> bool {
    let pivot = v
        .iter()
        .copied()
        .enumerate()
        .fold(
            (0, 0.0f64),
            |(bi, bv), (i, x)| {
                if x.abs() > bv.abs() {
                    (i, x)
                } else {
                    (bi, bv)
                }
            },
        )
        .1;
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}
