//! Polynomial response surfaces over active variables, and the bundle that
//! turns raw inputs back into full temperature histories and stress fields.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, serde_rows};
use crate::reduction::{
    active_vars, discover, estimate_gradients, normalize_inputs, ActiveSubspace, InputBounds, SnapshotKind, N_INPUTS,
};

pub const MAX_DEGREE: usize = 6;
/// Degrees whose r2 is within this margin of the best one are considered
/// equally good; the smallest such degree is kept.
pub const DEGREE_R2_MARGIN: f64 = 0.01;

/// Exponent tuples of all monomials of total degree `<= degree` in `n_vars`
/// variables, graded (by total degree) then lexicographically descending.
pub fn monomial_exponents(n_vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=total).rev() {
            prefix.push(e);
            rec(n - 1, total - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n_vars == 0 {
        out.push(vec![]);
        return out;
    }
    for total in 0..=degree {
        rec(n_vars, total, &mut Vec::with_capacity(n_vars), &mut out);
    }
    out
}

/// `C(n + d, d)`.
pub fn coefficient_count(n_vars: usize, degree: usize) -> usize {
    (1..=degree).fold(1usize, |acc, i| acc * (n_vars + i) / i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySurrogate {
    pub n_vars: usize,
    pub degree: usize,
    /// Ordered as [`monomial_exponents`].
    pub coefficients: Vec<f64>,
    /// Coefficient of determination on the training data.
    pub r2: f64,
    #[serde(skip)]
    exponents: Vec<Vec<usize>>,
}

impl PolySurrogate {
    pub fn new(n_vars: usize, degree: usize, coefficients: Vec<f64>, r2: f64) -> Result<Self> {
        let expected = coefficient_count(n_vars, degree);
        if coefficients.len() != expected {
            return Err(Error::shape(expected, coefficients.len()));
        }
        Ok(Self {
            n_vars,
            degree,
            coefficients,
            r2,
            exponents: monomial_exponents(n_vars, degree),
        })
    }

    fn exponents(&self) -> std::borrow::Cow<'_, [Vec<usize>]> {
        if self.exponents.len() == self.coefficients.len() {
            std::borrow::Cow::Borrowed(&self.exponents)
        } else {
            std::borrow::Cow::Owned(monomial_exponents(self.n_vars, self.degree))
        }
    }

    /// Allocation-free evaluation for up to three variables; `eta` must have
    /// `n_vars` entries.
    pub fn eval(&self, eta: &[f64]) -> f64 {
        debug_assert_eq!(eta.len(), self.n_vars);
        if self.n_vars > 3 || self.exponents.len() != self.coefficients.len() {
            return predict(self, eta).unwrap_or(f64::NAN);
        }
        let mut powers = [[1.0f64; MAX_DEGREE + 1]; 3];
        for (v, &x) in eta.iter().enumerate() {
            for p in 1..=self.degree {
                powers[v][p] = powers[v][p - 1] * x;
            }
        }
        let mut acc = 0.0;
        for (c, e) in self.coefficients.iter().zip(&self.exponents) {
            let mut term = *c;
            for (v, &k) in e.iter().enumerate() {
                term *= powers[v][k];
            }
            acc += term;
        }
        acc
    }

    /// Rebuilds cached exponents after deserialization.
    pub(crate) fn restore(&mut self) {
        self.exponents = monomial_exponents(self.n_vars, self.degree);
    }
}

fn design_row(eta: &[f64], degree: usize, exps: &[Vec<usize>], out: &mut [f64]) {
    // powers[v][p] = eta[v]^p
    let powers: Vec<Vec<f64>> = eta
        .iter()
        .map(|&x| {
            let mut p = Vec::with_capacity(degree + 1);
            let mut acc = 1.0;
            for _ in 0..=degree {
                p.push(acc);
                acc *= x;
            }
            p
        })
        .collect();
    for (slot, e) in out.iter_mut().zip(exps) {
        *slot = e.iter().enumerate().map(|(v, &k)| powers[v][k]).product();
    }
}

/// `1 - SS_res / SS_tot`; constant targets give 1 for a perfect fit, else 0.
pub fn r_squared(values: &[f64], fitted: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss_tot: f64 = values.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = values.iter().zip(fitted).map(|(y, f)| (y - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Least-squares fit over the full monomial basis of the given degree.
pub fn fit(etas: &DMatrix<f64>, values: &[f64], degree: usize) -> Result<PolySurrogate> {
    let (m, n_vars) = etas.shape();
    if values.len() != m {
        return Err(Error::shape(m, values.len()));
    }
    if degree > MAX_DEGREE {
        return Err(Error::invalid(format!(
            "degree must be at most {MAX_DEGREE}, got {degree}"
        )));
    }
    let count = coefficient_count(n_vars, degree);
    if m <= count {
        return Err(Error::invalid(format!(
            "degree-{degree} fit in {n_vars} variables needs more than {count} samples, got {m}"
        )));
    }
    let exps = monomial_exponents(n_vars, degree);
    let mut design = DMatrix::zeros(m, count);
    let mut row = vec![0.0; count];
    for i in 0..m {
        let eta: Vec<f64> = etas.row(i).iter().copied().collect();
        design_row(&eta, degree, &exps, &mut row);
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let coef = lstsq(&design, &DVector::from_column_slice(values))?;
    let fitted = &design * &coef;
    let r2 = r_squared(values, fitted.as_slice());
    Ok(PolySurrogate {
        n_vars,
        degree,
        coefficients: coef.iter().copied().collect(),
        r2,
        exponents: exps,
    })
}

/// Fits degrees `1..=MAX_DEGREE` (as far as the data allows) and keeps the
/// smallest degree whose r2 is within `margin` of the best.
pub fn fit_best_degree(etas: &DMatrix<f64>, values: &[f64], margin: f64) -> Result<PolySurrogate> {
    let mut fits = Vec::new();
    let mut last_err = None;
    for degree in 1..=MAX_DEGREE {
        if etas.nrows() <= coefficient_count(etas.ncols(), degree) {
            break;
        }
        match fit(etas, values, degree) {
            Ok(f) => fits.push(f),
            Err(e @ Error::RankDeficient { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let best = fits.iter().map(|f| f.r2).fold(f64::NEG_INFINITY, f64::max);
    fits.into_iter().find(|f| f.r2 >= best - margin).ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::invalid(format!("too few samples ({}) for a linear fit", etas.nrows())))
    })
}

pub fn predict(s: &PolySurrogate, eta: &[f64]) -> Result<f64> {
    if eta.len() != s.n_vars {
        return Err(Error::shape(s.n_vars, eta.len()));
    }
    let exps = s.exponents();
    let mut row = vec![0.0; s.coefficients.len()];
    design_row(eta, s.degree, &exps, &mut row);
    Ok(row.iter().zip(&s.coefficients).map(|(a, b)| a * b).sum())
}

/// Active subspace and response surface of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub subspace: ActiveSubspace,
    pub surrogate: PolySurrogate,
}

impl FeatureModel {
    /// Gradient estimation, subspace discovery and degree-selected fit for
    /// one feature column over normalized inputs. `degree_margin` is passed
    /// to [`fit_best_degree`].
    pub fn train(inputs: &DMatrix<f64>, values: &[f64], bounds: &InputBounds, degree_margin: f64) -> Result<Self> {
        let grads = estimate_gradients(inputs, values)?;
        let subspace = discover(&grads, bounds)?;
        let m = inputs.nrows();
        let mut etas = DMatrix::zeros(m, subspace.r);
        for i in 0..m {
            let xi: Vec<f64> = inputs.row(i).iter().copied().collect();
            for (j, e) in active_vars(&subspace, &xi)?.into_iter().enumerate() {
                etas[(i, j)] = e;
            }
        }
        let surrogate = fit_best_degree(&etas, values, degree_margin)?;
        Ok(Self { subspace, surrogate })
    }

    pub fn predict_normalized(&self, xi: &[f64]) -> Result<f64> {
        predict(&self.surrogate, &active_vars(&self.subspace, xi)?)
    }
}

/// Surrogates for one output kind: `K` feature models plus the `N × K` basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputModel {
    pub kind: SnapshotKind,
    #[serde(with = "serde_rows")]
    pub right_vectors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub features: Vec<FeatureModel>,
}

impl OutputModel {
    pub fn k(&self) -> usize {
        self.features.len()
    }

    pub fn feature_values(&self, xi_normalized: &[f64]) -> Result<Vec<f64>> {
        self.features
            .iter()
            .map(|f| f.predict_normalized(xi_normalized))
            .collect()
    }

    /// `[G_1 .. G_K] V_kᵀ`.
    pub fn expand(&self, feature_values: &[f64]) -> Result<Vec<f64>> {
        if feature_values.len() != self.right_vectors.ncols() {
            return Err(Error::shape(self.right_vectors.ncols(), feature_values.len()));
        }
        let n = self.right_vectors.nrows();
        Ok((0..n)
            .map(|i| {
                feature_values
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * self.right_vectors[(i, j)])
                    .sum()
            })
            .collect())
    }

    /// Maximum entry of [`expand`](Self::expand) without materializing it.
    pub fn expand_max(&self, feature_values: &[f64]) -> f64 {
        let k = feature_values.len();
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.right_vectors.nrows() {
            let mut acc = 0.0;
            for j in 0..k {
                acc += feature_values[j] * self.right_vectors[(i, j)];
            }
            best = best.max(acc);
        }
        best
    }

    fn validate(&self, expected_len: Option<usize>) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::invalid("output model needs at least one feature"));
        }
        if self.right_vectors.ncols() != self.features.len() {
            return Err(Error::shape(self.features.len(), self.right_vectors.ncols()));
        }
        if let Some(n) = expected_len {
            if self.right_vectors.nrows() != n {
                return Err(Error::shape(n, self.right_vectors.nrows()));
            }
        }
        for f in &self.features {
            if f.subspace.w1.nrows() != N_INPUTS
                || f.subspace.w1.ncols() != f.subspace.r
                || f.surrogate.n_vars != f.subspace.r
            {
                return Err(Error::shape("consistent subspace/surrogate", "mismatch"));
            }
        }
        Ok(())
    }
}

/// Where a bundle came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub runs: usize,
    pub config_hash: String,
}

/// Everything needed to map raw inputs to predicted outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateBundle {
    pub temperature: OutputModel,
    pub stress: OutputModel,
    pub input_bounds: InputBounds,
    pub provenance: Provenance,
}

impl SurrogateBundle {
    pub fn validate(&self) -> Result<()> {
        self.input_bounds.validate()?;
        if self.temperature.kind != SnapshotKind::Temperature || self.stress.kind != SnapshotKind::Stress {
            return Err(Error::invalid("bundle output kinds are swapped"));
        }
        self.temperature.validate(Some(crate::thermal::SNAPSHOT_LEN))?;
        self.stress.validate(None)?;
        Ok(())
    }

    pub(crate) fn restore(&mut self) {
        for f in self
            .temperature
            .features
            .iter_mut()
            .chain(self.stress.features.iter_mut())
        {
            f.surrogate.restore();
        }
    }
}

/// Predicted 31-point probe history for raw inputs `[v, P, T0, Y, E, rho]`.
pub fn predict_snapshot(b: &SurrogateBundle, xi: &[f64; N_INPUTS]) -> Result<Vec<f64>> {
    let x = normalize_inputs(xi, &b.input_bounds)?;
    b.temperature.expand(&b.temperature.feature_values(&x)?)
}

/// Predicted stress field and its maximum.
pub fn predict_stress_field(b: &SurrogateBundle, xi: &[f64; N_INPUTS]) -> Result<(Vec<f64>, f64)> {
    let x = normalize_inputs(xi, &b.input_bounds)?;
    let field = b.stress.expand(&b.stress.feature_values(&x)?)?;
    let max = crate::stress::max_stress(&field)?;
    Ok((field, max))
}
