//! Output and input dimension reduction.
//!
//! Snapshot matrices (runs × flattened outputs) are compressed by a truncated
//! SVD into uncorrelated features `F = U_k Σ_k`. For every feature an active
//! subspace of the normalized inputs is found from the eigendecomposition of
//! the averaged gradient outer product; gradients come from one global
//! quadratic fit of the feature over the training inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{canonical_sign, lstsq, serde_rows};

/// Number of model inputs `[v, P, T0, Y, E, rho]`.
pub const N_INPUTS: usize = 6;
/// Largest admissible active dimension.
pub const MAX_ACTIVE_DIM: usize = 3;
/// Coefficients of a full quadratic in [`N_INPUTS`] variables.
pub const QUADRATIC_TERMS: usize = 1 + N_INPUTS + N_INPUTS * (N_INPUTS + 1) / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotKind {
    Temperature,
    Stress,
}

/// Runs × outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMatrix {
    #[serde(with = "serde_rows")]
    pub data: DMatrix<f64>,
    pub kind: SnapshotKind,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, kind: SnapshotKind) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::invalid("snapshot matrix needs at least 2 rows"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { data, kind })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: SnapshotKind) -> Result<Self> {
        Self::new(crate::linalg::from_rows(rows)?, kind)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// Truncated SVD in feature form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecomposition {
    pub k: usize,
    /// M × k, `U_k Σ_k`.
    #[serde(with = "serde_rows")]
    pub features: DMatrix<f64>,
    /// N × k, orthonormal columns.
    #[serde(with = "serde_rows")]
    pub right_vectors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

/// Closed interval used to map one input coordinate onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Bounds of `[v, P, T0, Y, E, rho]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds(pub [Bound; N_INPUTS]);

impl Default for InputBounds {
    fn default() -> Self {
        Self([
            Bound::new(100.0, 1000.0),
            Bound::new(20.0, 200.0),
            Bound::new(585.0, 715.0),
            Bound::new(742.5, 907.5),
            Bound::new(100.0, 120.0),
            Bound::new(550.8, 673.2),
        ])
    }
}

impl InputBounds {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.0.iter().enumerate() {
            if !(b.lower < b.upper) || !b.lower.is_finite() || !b.upper.is_finite() {
                return Err(Error::invalid(format!(
                    "bound {i} must satisfy lower < upper, got [{}, {}]",
                    b.lower, b.upper
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> [f64; N_INPUTS] {
        std::array::from_fn(|i| self.0[i].mid())
    }
}

/// Dominant eigenspace of the gradient covariance of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSubspace {
    /// n × r.
    #[serde(with = "serde_rows")]
    pub w1: DMatrix<f64>,
    /// All n eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub r: usize,
    pub input_bounds: InputBounds,
}

/// Thin SVD truncated to `k` terms, with each right singular vector's
/// largest-magnitude entry made positive.
pub fn decompose(m: &SnapshotMatrix, k: usize) -> Result<FeatureDecomposition> {
    let (rows, cols) = m.data.shape();
    let p = rows.min(cols);
    if k == 0 || k > p {
        return Err(Error::invalid(format!("k must lie in 1..={p}, got {k}")));
    }
    if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (u, sv, v_t) = crate::linalg::thin_svd(&m.data);
    let mut features = DMatrix::zeros(rows, k);
    let mut right_vectors = DMatrix::zeros(cols, k);
    for j in 0..k {
        let mut v: Vec<f64> = v_t.row(j).iter().copied().collect();
        let flip = if canonical_sign(&mut v) { -1.0 } else { 1.0 };
        right_vectors.set_column(j, &DVector::from_vec(v));
        let f = u.column(j) * (sv[j] * flip);
        features.set_column(j, &f);
    }
    Ok(FeatureDecomposition {
        k,
        features,
        right_vectors,
        singular_values: sv.iter().take(k).copied().collect(),
    })
}

/// `F V_kᵀ`.
pub fn reconstruct(f: &FeatureDecomposition) -> Result<DMatrix<f64>> {
    if f.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if f.features.ncols() != f.k || f.right_vectors.ncols() != f.k {
        return Err(Error::shape(
            format!("{} columns", f.k),
            format!("{} / {}", f.features.ncols(), f.right_vectors.ncols()),
        ));
    }
    Ok(&f.features * f.right_vectors.transpose())
}

fn mean_relative_row_error(original: &DMatrix<f64>, approx: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, (row, est)) in original.row_iter().zip(approx.row_iter()).enumerate() {
        let norm = row.norm();
        if norm == 0.0 {
            return Err(Error::invalid(format!("row {i} has zero norm")));
        }
        total += (row - est).norm() / norm;
    }
    Ok(total / original.nrows() as f64)
}

/// Mean over rows of `||row - row_k|| / ||row||`.
pub fn truncation_error(m: &SnapshotMatrix, k: usize) -> Result<f64> {
    let f = decompose(m, k)?;
    mean_relative_row_error(&m.data, &reconstruct(&f)?)
}

/// [`truncation_error`] for `k = 1..=k_max` from a single factorization.
pub fn truncation_error_curve(m: &SnapshotMatrix, k_max: usize) -> Result<Vec<f64>> {
    let k_max = k_max.min(m.rows().min(m.cols()));
    let full = decompose(m, k_max)?;
    let mut approx = DMatrix::zeros(m.rows(), m.cols());
    let mut curve = Vec::with_capacity(k_max);
    for j in 0..k_max {
        approx += full.features.column(j) * full.right_vectors.column(j).transpose();
        curve.push(mean_relative_row_error(&m.data, &approx)?);
    }
    Ok(curve)
}

/// Picks the feature count from an error curve (`errs[0]` belongs to k = 1).
///
/// The smallest k whose error is at or below `threshold` wins. When no k
/// gets there, the result is the smallest k from which every further feature
/// improves the error by less than `min_gain`.
pub fn select_feature_count(errs: &[f64], threshold: f64, min_gain: f64) -> Result<usize> {
    if errs.is_empty() {
        return Err(Error::EmptySamples);
    }
    if let Some(i) = errs.iter().position(|&e| e <= threshold) {
        return Ok(i + 1);
    }
    let gains: Vec<f64> = errs.windows(2).map(|w| w[0] - w[1]).collect();
    let mut k = errs.len();
    for i in (0..gains.len()).rev() {
        if gains[i] < min_gain {
            k = i + 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// Affine map of every coordinate onto `[-1, 1]`.
///
/// Values outside a bound by more than a relative 1e-9 of its width are an
/// error; smaller excursions are clamped.
pub fn normalize_inputs(xi: &[f64; N_INPUTS], bounds: &InputBounds) -> Result<[f64; N_INPUTS]> {
    let mut out = [0.0; N_INPUTS];
    for (i, (x, b)) in xi.iter().zip(&bounds.0).enumerate() {
        if !(b.lower < b.upper) {
            return Err(Error::invalid(format!("bound {i} is empty")));
        }
        let tol = 1e-9 * b.width();
        if !(*x >= b.lower - tol && *x <= b.upper + tol) {
            return Err(Error::invalid(format!(
                "input {i} = {x} outside [{}, {}]",
                b.lower, b.upper
            )));
        }
        out[i] = (2.0 * (x - b.lower) / b.width() - 1.0).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Inverse of [`normalize_inputs`].
pub fn denormalize_inputs(xi: &[f64; N_INPUTS], bounds: &InputBounds) -> [f64; N_INPUTS] {
    std::array::from_fn(|i| bounds.0[i].lower + 0.5 * (xi[i] + 1.0) * bounds.0[i].width())
}

/// Full quadratic in six variables: constant, linear, then `x_a x_b` for
/// `a <= b` in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFit {
    pub coefficients: Vec<f64>,
}

fn quadratic_basis(x: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(QUADRATIC_TERMS);
    row.push(1.0);
    row.extend_from_slice(x);
    for a in 0..N_INPUTS {
        for b in a..N_INPUTS {
            row.push(x[a] * x[b]);
        }
    }
    row
}

impl QuadraticFit {
    pub fn fit(inputs: &DMatrix<f64>, values: &[f64]) -> Result<Self> {
        let m = inputs.nrows();
        if inputs.ncols() != N_INPUTS {
            return Err(Error::shape(N_INPUTS, inputs.ncols()));
        }
        if values.len() != m {
            return Err(Error::shape(m, values.len()));
        }
        if m < QUADRATIC_TERMS {
            return Err(Error::invalid(format!(
                "quadratic gradient fit needs at least {QUADRATIC_TERMS} runs, got {m}"
            )));
        }
        let mut design = DMatrix::zeros(m, QUADRATIC_TERMS);
        for i in 0..m {
            let x: Vec<f64> = inputs.row(i).iter().copied().collect();
            for (j, b) in quadratic_basis(&x).into_iter().enumerate() {
                design[(i, j)] = b;
            }
        }
        let coef = lstsq(&design, &DVector::from_column_slice(values))?;
        Ok(Self {
            coefficients: coef.iter().copied().collect(),
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        quadratic_basis(x)
            .iter()
            .zip(&self.coefficients)
            .map(|(b, c)| b * c)
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> [f64; N_INPUTS] {
        let c = &self.coefficients;
        let mut g: [f64; N_INPUTS] = std::array::from_fn(|i| c[1 + i]);
        let mut idx = 1 + N_INPUTS;
        for a in 0..N_INPUTS {
            for b in a..N_INPUTS {
                if a == b {
                    g[a] += 2.0 * c[idx] * x[a];
                } else {
                    g[a] += c[idx] * x[b];
                    g[b] += c[idx] * x[a];
                }
                idx += 1;
            }
        }
        g
    }
}

/// Gradients of a global least-squares quadratic, evaluated at every input row.
pub fn estimate_gradients(inputs: &DMatrix<f64>, values: &[f64]) -> Result<DMatrix<f64>> {
    let fit = QuadraticFit::fit(inputs, values)?;
    let m = inputs.nrows();
    let mut grads = DMatrix::zeros(m, N_INPUTS);
    for i in 0..m {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        for (j, g) in fit.gradient(&x).into_iter().enumerate() {
            grads[(i, j)] = g;
        }
    }
    Ok(grads)
}

/// Active subspace from sampled gradients (rows).
///
/// The active dimension is the `r` in `1..=3` maximizing `λ_r / λ_{r+1}`;
/// a vanishing trailing eigenvalue counts as an infinite gap.
pub fn discover(gradients: &DMatrix<f64>, bounds: &InputBounds) -> Result<ActiveSubspace> {
    let (m, n) = gradients.shape();
    if m < 2 {
        return Err(Error::invalid("active subspace discovery needs at least 2 gradients"));
    }
    if n < 2 {
        return Err(Error::shape("at least 2 input dimensions", n));
    }
    if let Some(i) = gradients.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let cov = gradients.transpose() * gradients / m as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let lead = eigenvalues[0].max(0.0);
    let negligible = |l: f64| l <= 1e-12 * lead;
    let r_cap = MAX_ACTIVE_DIM.min(n - 1);
    let mut r = 1;
    let mut best_gap = f64::NEG_INFINITY;
    if lead > 0.0 {
        for cand in 1..=r_cap {
            let (num, den) = (eigenvalues[cand - 1], eigenvalues[cand]);
            if negligible(num) {
                break;
            }
            let gap = if negligible(den) { f64::INFINITY } else { num / den };
            if gap > best_gap {
                best_gap = gap;
                r = cand;
            }
            if gap.is_infinite() {
                break;
            }
        }
    }

    let mut w1 = DMatrix::zeros(n, r);
    for (col, &src) in order.iter().take(r).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        canonical_sign(&mut v);
        w1.set_column(col, &DVector::from_vec(v));
    }
    Ok(ActiveSubspace {
        w1,
        eigenvalues,
        r,
        input_bounds: *bounds,
    })
}

/// `η = W₁ᵀ ξ` for a normalized input.
pub fn active_vars(s: &ActiveSubspace, xi: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != s.w1.nrows() {
        return Err(Error::shape(s.w1.nrows(), xi.len()));
    }
    Ok((0..s.r)
        .map(|c| s.w1.column(c).iter().zip(xi).map(|(w, x)| w * x).sum())
        .collect())
}
