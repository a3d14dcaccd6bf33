//! Sampling-based risk measures for a scalar limit state.
//!
//! All estimators work on an empirical distribution: quantile (value-at-risk),
//! superquantile (conditional value-at-risk), probability of failure and the
//! buffered probability of failure, the last one both through its
//! minimization form and through the descending-tail scan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Realizations of a limit-state function. Never empty, always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Ascending copy of the input.
    sorted: Vec<f64>,
    mean: f64,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySamples);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut sorted = values;
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted, mean })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    /// Values in ascending order.
    pub fn ascending(&self) -> &[f64] {
        &self.sorted
    }

    /// The `k`-th largest value, 1-based.
    fn kth_largest(&self, k: usize) -> f64 {
        self.sorted[self.sorted.len() - k]
    }
}

/// All risk quantities of one sample set at one `(alpha, tau)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub alpha: f64,
    pub quantile: f64,
    pub superquantile: f64,
    pub pof: f64,
    pub bpof: f64,
    pub zeta: f64,
    pub tau: f64,
}

/// Minimizer of the expectation form of the buffered probability of failure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpofMin {
    pub bpof: f64,
    pub zeta: f64,
}

/// Output of the descending-tail scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBpof {
    pub bpof: f64,
    pub tau: f64,
}

/// Buffered probability split into near-failure buffer plus failure mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpofDecomposition {
    pub buffer: f64,
    pub pof: f64,
}

fn tail_index(m: usize, alpha: f64) -> usize {
    let k = (m as f64 * (1.0 - alpha)).round() as usize;
    k.clamp(1, m)
}

/// `k`-th largest sample with `k = max(1, round(m (1 - alpha)))`.
pub fn estimate_quantile(s: &SampleSet, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(s.kth_largest(tail_index(s.len(), alpha)))
}

/// `zeta + E[(g - zeta)^+] / (1 - alpha)`, with `zeta` supplied by the caller.
///
/// With `zeta` the alpha-quantile this is the superquantile; any other value
/// gives an upper bound on it.
pub fn superquantile_at(s: &SampleSet, alpha: f64, zeta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0,1), got {alpha}")));
    }
    let excess = s.sorted.iter().map(|&g| (g - zeta).max(0.0)).sum::<f64>() / s.len() as f64;
    Ok(zeta + excess / (1.0 - alpha))
}

/// Superquantile (CVaR) at level `alpha` in `[0, 1)`; the sample mean at 0.
pub fn estimate_superquantile(s: &SampleSet, alpha: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(s.mean);
    }
    let q = estimate_quantile(s, alpha)?;
    superquantile_at(s, alpha, q)
}

/// Fraction of samples strictly above `tau`.
pub fn estimate_pof(s: &SampleSet, tau: f64) -> f64 {
    let at_or_below = s.sorted.partition_point(|&g| g <= tau);
    (s.len() - at_or_below) as f64 / s.len() as f64
}

/// `min_{zeta < tau} E[(g - zeta)^+] / (tau - zeta)`, clamped to `[0, 1]`.
///
/// On an empirical distribution the ratio is monotone between consecutive
/// sample values, so scanning the distinct samples below `tau` (plus a point
/// far below the minimum standing in for `zeta -> -inf`) finds the exact
/// minimum. Among equal minima the largest `zeta` is reported.
pub fn estimate_bpof_minform(s: &SampleSet, tau: f64) -> BpofMin {
    let (min, max) = (s.min(), s.max());
    let range = max - min;
    let far_below = if range > 0.0 {
        min - range
    } else {
        min - min.abs().max(1.0)
    };
    if tau <= s.mean {
        return BpofMin {
            bpof: 1.0,
            zeta: far_below.min(tau - 1.0),
        };
    }
    if tau >= max {
        return BpofMin { bpof: 0.0, zeta: max };
    }

    let m = s.len();
    let inv_m = 1.0 / m as f64;
    // suffix[i] = sum of sorted[i..]
    let mut suffix = vec![0.0; m + 1];
    for i in (0..m).rev() {
        suffix[i] = suffix[i + 1] + s.sorted[i];
    }
    let ratio_at = |zeta: f64, above_from: usize| {
        let count = (m - above_from) as f64;
        let excess = (suffix[above_from] - count * zeta) * inv_m;
        excess / (tau - zeta)
    };

    let mut best = BpofMin {
        bpof: ratio_at(far_below, 0),
        zeta: far_below,
    };
    let mut i = 0;
    while i < m && s.sorted[i] < tau {
        let zeta = s.sorted[i];
        let above = s.sorted.partition_point(|&g| g <= zeta);
        let r = ratio_at(zeta, above);
        if r <= best.bpof * (1.0 + 1e-12) {
            best.bpof = best.bpof.min(r);
            best.zeta = zeta;
        }
        i = above;
    }
    best.bpof = best.bpof.clamp(0.0, 1.0);
    best
}

/// Descending-tail scan: grows the top-`k` set until its mean drops below
/// the alpha-superquantile.
///
/// Returns `bpof = (k - 1) / m` together with the threshold it belongs to,
/// the mean of the top `k - 1` samples (the last running mean that was still
/// at or above the superquantile). When even the full-sample mean stays at or
/// above the superquantile the result is `(1, mean)`.
pub fn estimate_bpof_tail(s: &SampleSet, alpha: f64) -> Result<TailBpof> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let target = estimate_superquantile(s, alpha)?;
    let m = s.len();
    let mut k = 1;
    let mut sum = s.kth_largest(1);
    let mut c = sum;
    let mut prev = c;
    while c >= target {
        if k == m {
            return Ok(TailBpof { bpof: 1.0, tau: c });
        }
        k += 1;
        sum += s.kth_largest(k);
        prev = c;
        c = sum / k as f64;
    }
    Ok(TailBpof {
        bpof: (k - 1) as f64 / m as f64,
        tau: prev,
    })
}

/// Splits the minimization-form BPOF into `P[g in [zeta*, tau]]` and
/// `P[g > tau]`.
///
/// The atom sitting exactly at `zeta*` is counted fractionally so that
/// `buffer + pof` reproduces [`estimate_bpof_minform`].
pub fn bpof_decomposition(s: &SampleSet, tau: f64) -> BpofDecomposition {
    let pof = estimate_pof(s, tau);
    let opt = estimate_bpof_minform(s, tau);
    if opt.bpof >= 1.0 {
        return BpofDecomposition { buffer: 1.0 - pof, pof };
    }
    if opt.bpof <= 0.0 {
        return BpofDecomposition { buffer: 0.0, pof };
    }
    let m = s.len() as f64;
    let below_or_at = s.sorted.partition_point(|&g| g <= opt.zeta);
    let below = s.sorted.partition_point(|&g| g < opt.zeta);
    let p_gt = (s.len() - below_or_at) as f64 / m;
    let p_eq = (below_or_at - below) as f64 / m;
    let theta = if p_eq > 0.0 {
        ((opt.bpof - p_gt) / p_eq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    BpofDecomposition {
        buffer: (p_gt - pof).max(0.0) + theta * p_eq,
        pof,
    }
}

/// Evaluates every measure at once.
pub fn assess(s: &SampleSet, alpha: f64, tau: f64) -> Result<RiskEstimate> {
    let quantile = estimate_quantile(s, alpha)?;
    let superquantile = estimate_superquantile(s, alpha)?;
    let min = estimate_bpof_minform(s, tau);
    Ok(RiskEstimate {
        alpha,
        quantile,
        superquantile,
        pof: estimate_pof(s, tau),
        bpof: min.bpof,
        zeta: min.zeta,
        tau,
    })
}
