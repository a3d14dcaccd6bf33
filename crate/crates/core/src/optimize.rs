//! Energy minimization under a buffered-probability constraint on residual
//! stress and a melting window on the mean peak temperature.
//!
//! The uncertain inputs are drawn once per solve and frozen, so every
//! constraint evaluation is a deterministic function of `(v, P, zeta)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::reduction::{Bound, InputBounds};
use crate::risk::{estimate_bpof_minform, estimate_quantile, SampleSet};
use crate::surrogate::{OutputModel, SurrogateBundle};
use crate::thermal::{DesignPoint, RandomInputs};

/// Feature count ceiling for the allocation-free evaluation path.
pub const MAX_FEATURES: usize = 32;

/// Relative inward margin the penalty aims for, so that converged points sit
/// strictly inside the feasible set rather than on its boundary.
const PENALTY_MARGIN: f64 = 1e-3;
const INITIAL_PENALTY: f64 = 100.0;
const MAX_PENALTY: f64 = 1e12;
const SIMPLEX_TOL: f64 = 1e-4;
const INITIAL_STEP: f64 = 0.1;
const RESTART_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    PenaltyNelderMead,
    CobylaLike,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::PenaltyNelderMead => "penalty-nelder-mead",
            Solver::CobylaLike => "cobyla-like",
        })
    }
}

/// Which reliability measure the stress constraint bounds by `1 - alpha_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskConstraint {
    /// `E[sigma - zeta]^+ / (tau - zeta)`.
    #[default]
    Buffered,
    /// Fraction of samples with `sigma > tau`; `zeta` is ignored.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub alpha_t: f64,
    /// Failure threshold on the maximum residual stress, MPa.
    pub tau: f64,
    pub n_mc: usize,
    /// Scanning speed bounds, mm/s.
    pub v_bounds: Bound,
    /// Beam power bounds, W.
    pub p_bounds: Bound,
    /// Open interval for the mean peak temperature, °C.
    pub temp_window: Bound,
    /// Scan length entering the energy objective, mm.
    pub length: f64,
    pub seed: u64,
    pub solver: Solver,
    pub risk_constraint: RiskConstraint,
    /// Iteration cap of each solver run.
    pub max_iters: usize,
    /// Nelder–Mead restarts after the first run.
    pub restarts: usize,
    pub constraint_tol: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            alpha_t: 0.95,
            tau: 825.0,
            n_mc: 20_000,
            v_bounds: Bound::new(100.0, 1000.0),
            p_bounds: Bound::new(20.0, 200.0),
            temp_window: Bound::new(1650.0, 1815.0),
            length: 2.0,
            seed: 2024,
            solver: Solver::default(),
            risk_constraint: RiskConstraint::default(),
            max_iters: 500,
            restarts: 8,
            constraint_tol: 1e-4,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            return Err(Error::invalid(format!(
                "alpha_t must lie in (0,1), got {}",
                self.alpha_t
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_mc < 100 {
            return Err(Error::invalid(format!("n_mc must be at least 100, got {}", self.n_mc)));
        }
        let box_default = Self::default();
        for (name, b, outer) in [
            ("v", self.v_bounds, box_default.v_bounds),
            ("P", self.p_bounds, box_default.p_bounds),
        ] {
            if !(b.lower < b.upper && b.lower >= outer.lower && b.upper <= outer.upper) {
                return Err(Error::invalid(format!(
                    "{name} bounds [{}, {}] must be a non-empty subset of [{}, {}]",
                    b.lower, b.upper, outer.lower, outer.upper
                )));
            }
        }
        if !(self.temp_window.lower < self.temp_window.upper) {
            return Err(Error::Infeasible(format!(
                "temperature window ({}, {}) is empty",
                self.temp_window.lower, self.temp_window.upper
            )));
        }
        if !(self.length > 0.0) {
            return Err(Error::invalid("scan length must be positive"));
        }
        if !(self.constraint_tol >= 0.0) {
            return Err(Error::invalid("constraint_tol must be non-negative"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        Ok(())
    }

    fn temp_scale(&self) -> f64 {
        let w = self.temp_window.width();
        if w.is_finite() {
            w
        } else {
            1.0
        }
    }

    /// Search interval for `zeta`, kept strictly below `tau`.
    fn zeta_range(&self) -> (f64, f64) {
        if self.tau.is_finite() {
            (0.0, self.tau * (1.0 - 1e-6))
        } else {
            (0.0, 1000.0)
        }
    }
}

/// Beam energy `P l / v`, J.
pub fn energy(d: &DesignPoint, length: f64) -> Result<f64> {
    if d.v == 0.0 {
        return Err(Error::invalid("scanning speed must be non-zero"));
    }
    if !(d.v > 0.0) {
        return Err(Error::invalid(format!("scanning speed must be positive, got {}", d.v)));
    }
    Ok(d.p * length / d.v)
}

/// Draws `n` uncertain-input realizations uniformly over the last four
/// coordinates of `bounds`.
pub fn draw_samples(bounds: &InputBounds, n: usize, seed: u64) -> Vec<RandomInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &bounds.0;
    (0..n)
        .map(|_| RandomInputs {
            t0: rng.random_range(b[2].lower..b[2].upper),
            y: rng.random_range(b[3].lower..b[3].upper),
            e: rng.random_range(b[4].lower..b[4].upper),
            rho: rng.random_range(b[5].lower..b[5].upper),
        })
        .collect()
}

/// `mean[(sigma - zeta)^+] / (tau - zeta)`.
pub fn bpof_lhs(sigma: &[f64], zeta: f64, tau: f64) -> Result<f64> {
    if sigma.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(zeta < tau) {
        return Err(Error::invalid(format!("zeta ({zeta}) must be below tau ({tau})")));
    }
    let excess: f64 = sigma.iter().map(|s| (s - zeta).max(0.0)).sum::<f64>() / sigma.len() as f64;
    if tau.is_infinite() {
        return Ok(0.0);
    }
    Ok(excess / (tau - zeta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintValues {
    /// Left-hand side of the stress constraint (BPOF or POF, per config).
    pub bpof_lhs: f64,
    /// Mean over samples of the predicted peak probe temperature, °C.
    pub t_max_hat: f64,
}

/// Per-sample surrogate responses at one design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignResponse {
    pub sigma_max: Vec<f64>,
    pub t_max: Vec<f64>,
}

impl DesignResponse {
    pub fn t_max_hat(&self) -> f64 {
        self.t_max.iter().sum::<f64>() / self.t_max.len() as f64
    }

    pub fn constraint(&self, zeta: f64, cfg: &OptimizeConfig) -> Result<f64> {
        match cfg.risk_constraint {
            RiskConstraint::Buffered => bpof_lhs(&self.sigma_max, zeta, cfg.tau),
            RiskConstraint::Plain => {
                if self.sigma_max.is_empty() {
                    return Err(Error::EmptySamples);
                }
                let n = self.sigma_max.iter().filter(|&&s| s > cfg.tau).count();
                Ok(n as f64 / self.sigma_max.len() as f64)
            }
        }
    }
}

/// One feature's active-variable map split into the design part and the
/// precomputed contribution of every frozen sample.
struct FeatureCache {
    r: usize,
    /// `design_w[c] = (W1[0][c], W1[1][c])`.
    design_w: Vec<[f64; 2]>,
    /// `offsets[s * r + c] = sum_{i >= 2} W1[i][c] xi_s[i]`.
    offsets: Vec<f64>,
}

impl FeatureCache {
    fn new(w1: &nalgebra::DMatrix<f64>, r: usize, xi_random: &[[f64; 4]]) -> Self {
        let design_w = (0..r).map(|c| [w1[(0, c)], w1[(1, c)]]).collect();
        let mut offsets = Vec::with_capacity(xi_random.len() * r);
        for xi in xi_random {
            for c in 0..r {
                offsets.push((0..4).map(|i| w1[(i + 2, c)] * xi[i]).sum());
            }
        }
        Self { r, design_w, offsets }
    }
}

/// Surrogate evaluator bound to a frozen sample set.
pub struct Evaluator<'a> {
    bundle: &'a SurrogateBundle,
    n: usize,
    temp: Vec<FeatureCache>,
    stress: Vec<FeatureCache>,
    /// Row-major copies of the right singular vectors, for contiguous dot products.
    temp_rows: Vec<f64>,
    stress_rows: Vec<f64>,
}

fn row_major(m: &OutputModel) -> Vec<f64> {
    let v = &m.right_vectors;
    let mut out = Vec::with_capacity(v.nrows() * v.ncols());
    for i in 0..v.nrows() {
        out.extend(v.row(i).iter());
    }
    out
}

impl<'a> Evaluator<'a> {
    pub fn new(bundle: &'a SurrogateBundle, samples: &[RandomInputs]) -> Result<Self> {
        bundle.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        for m in [&bundle.temperature, &bundle.stress] {
            if m.k() > MAX_FEATURES {
                return Err(Error::invalid(format!(
                    "at most {MAX_FEATURES} features are supported, bundle has {}",
                    m.k()
                )));
            }
        }
        let b = &bundle.input_bounds.0;
        let norm = |x: f64, bound: &Bound| 2.0 * (x - bound.lower) / bound.width() - 1.0;
        let xi_random: Vec<[f64; 4]> = samples
            .iter()
            .map(|z| {
                [
                    norm(z.t0, &b[2]),
                    norm(z.y, &b[3]),
                    norm(z.e, &b[4]),
                    norm(z.rho, &b[5]),
                ]
            })
            .collect();
        let caches = |m: &OutputModel| -> Vec<FeatureCache> {
            m.features
                .iter()
                .map(|f| FeatureCache::new(&f.subspace.w1, f.subspace.r, &xi_random))
                .collect()
        };
        Ok(Self {
            bundle,
            n: samples.len(),
            temp: caches(&bundle.temperature),
            stress: caches(&bundle.stress),
            temp_rows: row_major(&bundle.temperature),
            stress_rows: row_major(&bundle.stress),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn features(caches: &[FeatureCache], model: &OutputModel, s: usize, xv: f64, xp: f64, g: &mut [f64]) {
        let mut eta = [0.0f64; 3];
        for (j, (f, c)) in model.features.iter().zip(caches).enumerate() {
            let off = &c.offsets[s * c.r..(s + 1) * c.r];
            for k in 0..c.r {
                eta[k] = off[k] + c.design_w[k][0] * xv + c.design_w[k][1] * xp;
            }
            g[j] = f.surrogate.eval(&eta[..c.r]);
        }
    }

    /// Max of `V g` for every sample. Rows that cannot win anywhere inside the
    /// bounding box of the feature vectors are dropped first; the survivors
    /// give exactly the same maximum.
    fn output_max(&self, model: &OutputModel, caches: &[FeatureCache], rows: &[f64], xv: f64, xp: f64) -> Vec<f64> {
        let k = model.k();
        let g: Vec<f64> = par::map_range(self.n, |s| {
            let mut g = [0.0f64; MAX_FEATURES];
            Self::features(caches, model, s, xv, xp, &mut g);
            g
        })
        .into_iter()
        .flat_map(|g| g.into_iter().take(k))
        .collect();
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for gs in g.chunks_exact(k) {
            for j in 0..k {
                lo[j] = lo[j].min(gs[j]);
                hi[j] = hi[j].max(gs[j]);
            }
        }
        let bounds = |row: &[f64]| {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..k {
                let (x, y) = (lo[j] * row[j], hi[j] * row[j]);
                a += x.min(y);
                b += x.max(y);
            }
            (a, b)
        };
        let floor = rows
            .chunks_exact(k)
            .map(|r| bounds(r).0)
            .fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-9 * (1.0 + floor.abs());
        let kept: Vec<f64> = if floor.is_finite() {
            rows.chunks_exact(k)
                .filter(|r| bounds(r).1 >= floor - slack)
                .flatten()
                .copied()
                .collect()
        } else {
            rows.to_vec()
        };
        par::map_range(self.n, |s| {
            let gs = &g[s * k..(s + 1) * k];
            if gs.iter().any(|x| !x.is_finite()) {
                return f64::NAN;
            }
            kept.chunks_exact(k)
                .map(|row| row.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Predicted `sigma_max` and peak probe temperature for every sample.
    pub fn respond(&self, d: &DesignPoint) -> Result<DesignResponse> {
        let mut probe = self.bundle.input_bounds.midpoint();
        probe[0] = d.v;
        probe[1] = d.p;
        let xi = crate::reduction::normalize_inputs(&probe, &self.bundle.input_bounds)?;
        let (xv, xp) = (xi[0], xi[1]);
        let sigma_max = self.output_max(&self.bundle.stress, &self.stress, &self.stress_rows, xv, xp);
        let t_max = self.output_max(&self.bundle.temperature, &self.temp, &self.temp_rows, xv, xp);
        if let Some(i) = sigma_max
            .iter()
            .zip(&t_max)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(Error::NonFinite(i));
        }
        Ok(DesignResponse { sigma_max, t_max })
    }
}

/// Constraint values at `(d, zeta)` over the given frozen samples.
pub fn evaluate_constraints(
    d: &DesignPoint,
    zeta: f64,
    b: &SurrogateBundle,
    samples: &[RandomInputs],
    cfg: &OptimizeConfig,
) -> Result<ConstraintValues> {
    if !(zeta < cfg.tau) {
        return Err(Error::invalid(format!("zeta ({zeta}) must be below tau ({})", cfg.tau)));
    }
    let r = Evaluator::new(b, samples)?.respond(d)?;
    Ok(ConstraintValues {
        bpof_lhs: r.constraint(zeta, cfg)?,
        t_max_hat: r.t_max_hat(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub v: f64,
    pub p: f64,
    pub zeta: f64,
    pub energy: f64,
    pub bpof_lhs: f64,
    pub t_max_hat: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub d0: DesignPoint,
    pub d_star: DesignPoint,
    pub zeta_star: f64,
    pub energy: f64,
    pub bpof_lhs: f64,
    pub t_max_hat: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub feasible: bool,
    /// Whether any solver run stopped on the iteration cap.
    pub hit_iteration_limit: bool,
    pub solver: Solver,
    pub history: Vec<HistoryEntry>,
}

/// A fully evaluated point of the search space.
#[derive(Debug, Clone, Copy)]
struct Point {
    u: [f64; 3],
    d: DesignPoint,
    zeta: f64,
    energy: f64,
    lhs: f64,
    t_hat: f64,
    /// Scaled constraint values, feasible when `<= 0`.
    g: [f64; 3],
}

impl Point {
    fn violation(&self) -> f64 {
        self.g.iter().map(|g| g.max(0.0)).sum()
    }
}

struct Problem<'a> {
    ev: Evaluator<'a>,
    cfg: &'a OptimizeConfig,
    zeta_range: (f64, f64),
    mu: f64,
    /// Ignore the third coordinate and use the exact minimizing `zeta` of
    /// the stress constraint at every design.
    profile_zeta: bool,
    cache: Option<(DesignPoint, DesignResponse)>,
    evaluations: usize,
    best_feasible: Option<Point>,
    least_infeasible: Option<Point>,
}

impl<'a> Problem<'a> {
    fn new(ev: Evaluator<'a>, cfg: &'a OptimizeConfig) -> Self {
        Self {
            ev,
            cfg,
            zeta_range: cfg.zeta_range(),
            mu: INITIAL_PENALTY,
            profile_zeta: false,
            cache: None,
            evaluations: 0,
            best_feasible: None,
            least_infeasible: None,
        }
    }

    fn to_design(&self, u: &[f64; 3]) -> (DesignPoint, f64) {
        let c = self.cfg;
        let (zl, zh) = self.zeta_range;
        (
            DesignPoint::new(
                c.v_bounds.lower + u[0] * c.v_bounds.width(),
                c.p_bounds.lower + u[1] * c.p_bounds.width(),
            ),
            zl + u[2] * (zh - zl),
        )
    }

    fn to_unit(&self, d: &DesignPoint, zeta: f64) -> [f64; 3] {
        let c = self.cfg;
        let (zl, zh) = self.zeta_range;
        [
            (d.v - c.v_bounds.lower) / c.v_bounds.width(),
            (d.p - c.p_bounds.lower) / c.p_bounds.width(),
            ((zeta - zl) / (zh - zl)).clamp(0.0, 1.0),
        ]
    }

    fn response(&mut self, d: &DesignPoint) -> Result<&DesignResponse> {
        let hit = matches!(&self.cache, Some((cd, _)) if cd == d);
        if !hit {
            let r = self.ev.respond(d)?;
            self.cache = Some((*d, r));
        }
        Ok(&self.cache.as_ref().expect("cache filled above").1)
    }

    fn feasible(&self, p: &Point) -> bool {
        let c = self.cfg;
        let ts = c.temp_scale() * c.constraint_tol;
        p.lhs <= (1.0 - c.alpha_t) + c.constraint_tol
            && p.t_hat > c.temp_window.lower - ts
            && p.t_hat < c.temp_window.upper + ts
    }

    fn eval(&mut self, u: [f64; 3]) -> Result<Point> {
        let u = u.map(|x| x.clamp(0.0, 1.0));
        let (d, mut zeta) = self.to_design(&u);
        let cfg = self.cfg;
        let profile = self.profile_zeta && cfg.risk_constraint == RiskConstraint::Buffered && cfg.tau.is_finite();
        let (zl, zh) = self.zeta_range;
        let resp = self.response(&d)?;
        if profile {
            let set = SampleSet::from_slice(&resp.sigma_max)?;
            zeta = estimate_bpof_minform(&set, cfg.tau).zeta.clamp(zl, zh);
        }
        let lhs = resp.constraint(zeta, cfg)?;
        let t_hat = resp.t_max_hat();
        self.evaluations += 1;
        let budget = 1.0 - cfg.alpha_t;
        let ts = cfg.temp_scale();
        let p = Point {
            u,
            d,
            zeta,
            energy: energy(&d, cfg.length)?,
            lhs,
            t_hat,
            g: [
                (lhs - budget) / budget,
                (cfg.temp_window.lower - t_hat) / ts,
                (t_hat - cfg.temp_window.upper) / ts,
            ],
        };
        if self.feasible(&p) {
            if self.best_feasible.is_none_or(|b| p.energy < b.energy) {
                self.best_feasible = Some(p);
            }
        } else if self.least_infeasible.is_none_or(|b| p.violation() < b.violation()) {
            self.least_infeasible = Some(p);
        }
        Ok(p)
    }

    /// Exterior quadratic penalty aiming slightly inside the feasible set.
    fn penalized(&self, p: &Point) -> f64 {
        let pen: f64 =
            p.g.iter()
                .filter(|g| g.is_finite())
                .map(|g| (g + PENALTY_MARGIN).max(0.0).powi(2))
                .sum();
        p.energy + self.mu * pen
    }

    fn record(&self, history: &mut Vec<HistoryEntry>, p: &Point) {
        history.push(HistoryEntry {
            iteration: history.len(),
            v: p.d.v,
            p: p.d.p,
            zeta: p.zeta,
            energy: p.energy,
            bpof_lhs: p.lhs,
            t_max_hat: p.t_hat,
            feasible: self.feasible(p),
        });
    }
}

struct RunOutcome {
    best: Point,
    iterations: usize,
    hit_limit: bool,
}

fn simplex_diameter(xs: &[[f64; 3]]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let s: f64 = (0..3).map(|k| (xs[i][k] - xs[j][k]).powi(2)).sum();
            d = d.max(s.sqrt());
        }
    }
    d
}

fn lerp(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| (a[k] + t * (b[k] - a[k])).clamp(0.0, 1.0))
}

fn nelder_mead(prob: &mut Problem<'_>, x0: [f64; 3], history: &mut Vec<HistoryEntry>) -> Result<RunOutcome> {
    let mut simplex: Vec<(Point, f64)> = Vec::with_capacity(4);
    let start = prob.eval(x0)?;
    simplex.push((start, prob.penalized(&start)));
    for k in 0..3 {
        let mut x = start.u;
        x[k] += if x[k] + INITIAL_STEP <= 1.0 {
            INITIAL_STEP
        } else {
            -INITIAL_STEP
        };
        let p = prob.eval(x)?;
        simplex.push((p, prob.penalized(&p)));
    }
    let mut iterations = 0;
    let mut hit_limit = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        prob.record(history, &simplex[0].0);
        let xs: Vec<[f64; 3]> = simplex.iter().map(|s| s.0.u).collect();
        if simplex_diameter(&xs) < SIMPLEX_TOL {
            break;
        }
        if iterations >= prob.cfg.max_iters {
            hit_limit = true;
            break;
        }
        iterations += 1;
        let centroid: [f64; 3] = std::array::from_fn(|k| xs[..3].iter().map(|x| x[k]).sum::<f64>() / 3.0);
        let worst = xs[3];
        let (f_best, f_second_worst, f_worst) = (simplex[0].1, simplex[2].1, simplex[3].1);

        let pr = prob.eval(lerp(&centroid, &worst, -1.0))?;
        let fr = prob.penalized(&pr);
        if fr < f_best {
            let pe = prob.eval(lerp(&centroid, &worst, -2.0))?;
            let fe = prob.penalized(&pe);
            simplex[3] = if fe < fr { (pe, fe) } else { (pr, fr) };
            continue;
        }
        if fr < f_second_worst {
            simplex[3] = (pr, fr);
            continue;
        }
        let (pc, fc, accept) = if fr < f_worst {
            let pc = prob.eval(lerp(&centroid, &pr.u, 0.5))?;
            let fc = prob.penalized(&pc);
            (pc, fc, fc <= fr)
        } else {
            let pc = prob.eval(lerp(&centroid, &worst, 0.5))?;
            let fc = prob.penalized(&pc);
            (pc, fc, fc < f_worst)
        };
        if accept {
            simplex[3] = (pc, fc);
            continue;
        }
        let best = simplex[0].0.u;
        for s in simplex.iter_mut().skip(1) {
            let p = prob.eval(lerp(&best, &s.0.u, 0.5))?;
            *s = (p, prob.penalized(&p));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(RunOutcome {
        best: simplex[0].0,
        iterations,
        hit_limit,
    })
}

/// Solves `A x = b` for small dense systems by partial-pivot elimination.
fn solve_small<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Minimizes `c·x` subject to `a_i·x <= b_i` by enumerating vertices. The
/// constraint set must describe a bounded polytope.
fn lp_vertices<const N: usize>(c: &[f64; N], cons: &[([f64; N], f64)]) -> Option<[f64; N]> {
    let m = cons.len();
    let mut best: Option<([f64; N], f64)> = None;
    let mut idx = [0usize; N];
    fn next_combo<const N: usize>(idx: &mut [usize; N], m: usize) -> bool {
        let mut i = N;
        while i > 0 {
            i -= 1;
            if idx[i] < m - N + i {
                idx[i] += 1;
                for j in i + 1..N {
                    idx[j] = idx[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    if m < N {
        return None;
    }
    for (i, slot) in idx.iter_mut().enumerate() {
        *slot = i;
    }
    loop {
        let a: [[f64; N]; N] = std::array::from_fn(|r| cons[idx[r]].0);
        let b: [f64; N] = std::array::from_fn(|r| cons[idx[r]].1);
        if let Some(x) = solve_small(a, b) {
            let ok = cons.iter().all(|(ai, bi)| {
                let lhs: f64 = ai.iter().zip(&x).map(|(p, q)| p * q).sum();
                lhs <= bi + 1e-9 * (1.0 + bi.abs())
            });
            if ok {
                let val: f64 = c.iter().zip(&x).map(|(p, q)| p * q).sum();
                if best.is_none_or(|(_, v)| val < v - 1e-15) {
                    best = Some((x, val));
                }
            }
        }
        if !next_combo(&mut idx, m) {
            break;
        }
    }
    best.map(|(x, _)| x)
}

/// Linear-approximation trust-region method in the spirit of COBYLA: linear
/// models of the objective and constraints interpolated on a simplex, a
/// box-constrained linear program for each step, and an l1 merit function.
fn cobyla_like(prob: &mut Problem<'_>, x0: [f64; 3], history: &mut Vec<HistoryEntry>) -> Result<RunOutcome> {
    let rho_end = SIMPLEX_TOL;
    let mut rho = INITIAL_STEP;
    // Near tau the constraint is far too curved in zeta for linear models,
    // so zeta is profiled out and the third coordinate stays put.
    prob.profile_zeta = true;
    let mut mu = 1.0f64;
    // Constraints in g <= 0 form, shifted inward by the margin.
    let cons_of = |p: &Point| p.g.map(|g| if g.is_finite() { g + PENALTY_MARGIN } else { -1.0 });
    let merit = |p: &Point, mu: f64| p.energy + mu * cons_of(p).iter().map(|g| g.max(0.0)).sum::<f64>();

    let build = |prob: &mut Problem<'_>, center: Point, rho: f64| -> Result<Vec<Point>> {
        let mut pts = vec![center];
        for k in 0..3 {
            let mut x = center.u;
            x[k] += if x[k] + rho <= 1.0 { rho } else { -rho };
            pts.push(prob.eval(x)?);
        }
        Ok(pts)
    };
    let start = prob.eval(x0)?;
    let mut pts = build(prob, start, rho)?;
    let mut iterations = 0;
    let mut hit_limit = false;
    loop {
        let best_i = (0..pts.len())
            .min_by(|&a, &b| merit(&pts[a], mu).total_cmp(&merit(&pts[b], mu)))
            .expect("simplex is non-empty");
        pts.swap(0, best_i);
        let best = pts[0];
        prob.record(history, &best);
        if rho < rho_end {
            break;
        }
        if iterations >= prob.cfg.max_iters {
            hit_limit = true;
            break;
        }
        iterations += 1;

        // Linear models through the 4 points: value = a0 + grad·(x - x_best).
        let rows: [[f64; 3]; 3] = std::array::from_fn(|j| std::array::from_fn(|k| pts[j + 1].u[k] - best.u[k]));
        let grad_of =
            |vals: [f64; 4]| -> Option<[f64; 3]> { solve_small(rows, std::array::from_fn(|j| vals[j + 1] - vals[0])) };
        let f_vals: [f64; 4] = std::array::from_fn(|j| pts[j].energy);
        let c_vals: [[f64; 4]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| cons_of(&pts[j])[i]));
        let gf = grad_of(f_vals);
        let gcs: Option<Vec<[f64; 3]>> = c_vals.iter().map(|v| grad_of(*v)).collect();
        let (gf, gcs) = match (gf, gcs) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                pts = build(prob, best, rho)?;
                continue;
            }
        };
        let c0 = cons_of(&best);

        let mut box_cons: Vec<([f64; 3], f64)> = Vec::new();
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let (hi, lo) = if k == 2 {
                (0.0, 0.0)
            } else {
                (rho.min(1.0 - best.u[k]), rho.min(best.u[k]))
            };
            box_cons.push((e, hi));
            box_cons.push((e.map(|x| -x), lo));
        }
        let mut cons = box_cons.clone();
        for (g, c) in gcs.iter().zip(&c0) {
            cons.push((*g, -c));
        }
        let step = match lp_vertices(&gf, &cons) {
            Some(s) => s,
            None => {
                // Least-violation step: min t s.t. c + g·s <= t, t >= 0.
                let mut cons4: Vec<([f64; 4], f64)> =
                    box_cons.iter().map(|(a, b)| ([a[0], a[1], a[2], 0.0], *b)).collect();
                for (g, c) in gcs.iter().zip(&c0) {
                    cons4.push(([g[0], g[1], g[2], -1.0], -c));
                }
                cons4.push(([0.0, 0.0, 0.0, -1.0], 0.0));
                let t_cap = c0.iter().fold(0.0f64, |m, c| m.max(c.abs())) + 1.0 + rho * 1e3;
                cons4.push(([0.0, 0.0, 0.0, 1.0], t_cap));
                match lp_vertices(&[0.0, 0.0, 0.0, 1.0], &cons4) {
                    Some(s) => [s[0], s[1], s[2]],
                    None => [0.0; 3],
                }
            }
        };
        let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        if step_norm < 0.1 * rho {
            rho *= 0.5;
            pts = build(prob, best, rho)?;
            continue;
        }
        // Raise the penalty until the model predicts a merit decrease.
        let model_viol = |s: &[f64; 3]| -> f64 {
            gcs.iter()
                .zip(&c0)
                .map(|(g, c)| (c + g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>()).max(0.0))
                .sum()
        };
        let df: f64 = gf.iter().zip(&step).map(|(a, b)| a * b).sum();
        let dv = model_viol(&step) - model_viol(&[0.0; 3]);
        if dv < 0.0 {
            mu = mu.max(2.0 * df.max(0.0) / -dv).min(MAX_PENALTY);
        }
        let trial = prob.eval(std::array::from_fn(|k| best.u[k] + step[k]))?;
        if merit(&trial, mu) < merit(&best, mu) {
            // Replace the vertex farthest from the new point.
            let far = (1..4)
                .max_by(|&a, &b| {
                    let da: f64 = (0..3).map(|k| (pts[a].u[k] - trial.u[k]).powi(2)).sum();
                    let db: f64 = (0..3).map(|k| (pts[b].u[k] - trial.u[k]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("three non-best vertices");
            pts[far] = trial;
            let too_far = pts
                .iter()
                .skip(1)
                .any(|p| (0..3).map(|k| (p.u[k] - trial.u[k]).powi(2)).sum::<f64>().sqrt() > 2.5 * rho);
            if too_far {
                pts = build(prob, trial, rho)?;
            }
        } else {
            rho *= 0.5;
            pts = build(prob, best, rho)?;
        }
    }
    Ok(RunOutcome {
        best: pts[0],
        iterations,
        hit_limit,
    })
}

/// Minimizes energy over `(v, P, zeta)` from `d0` with the frozen samples
/// drawn from `cfg.seed`.
pub fn solve(b: &SurrogateBundle, cfg: &OptimizeConfig, d0: DesignPoint) -> Result<OptimizationResult> {
    let samples = draw_samples(&b.input_bounds, cfg.n_mc, cfg.seed);
    solve_with_samples(b, cfg, d0, &samples)
}

/// [`solve`] with caller-provided frozen samples.
pub fn solve_with_samples(
    b: &SurrogateBundle,
    cfg: &OptimizeConfig,
    d0: DesignPoint,
    samples: &[RandomInputs],
) -> Result<OptimizationResult> {
    cfg.validate()?;
    let inside = |x: f64, bd: &Bound| x >= bd.lower && x <= bd.upper;
    if !(inside(d0.v, &cfg.v_bounds) && inside(d0.p, &cfg.p_bounds)) {
        return Err(Error::invalid(format!(
            "initial design (v={}, P={}) lies outside the bounds",
            d0.v, d0.p
        )));
    }
    let ev = Evaluator::new(b, samples)?;
    let mut prob = Problem::new(ev, cfg);

    // Start zeta at the exact minimizer of the stress constraint at d0.
    let zeta0 = {
        let resp = prob.response(&d0)?;
        let set = SampleSet::from_slice(&resp.sigma_max)?;
        let (zl, zh) = prob.zeta_range;
        if cfg.tau.is_finite() {
            estimate_bpof_minform(&set, cfg.tau).zeta.clamp(zl, zh)
        } else {
            0.5 * (zl + zh)
        }
    };
    let x0 = prob.to_unit(&d0, zeta0);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut hit_limit = false;

    match cfg.solver {
        Solver::PenaltyNelderMead => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut x = x0;
            for _ in 0..=cfg.restarts {
                let before = prob.best_feasible.map(|p| p.energy);
                let run = nelder_mead(&mut prob, x, &mut history)?;
                iterations += run.iterations;
                hit_limit |= run.hit_limit;
                let improved = match (before, prob.best_feasible) {
                    (None, Some(_)) => true,
                    (Some(e0), Some(p)) => p.energy < e0 - 1e-12,
                    _ => false,
                };
                if !prob.feasible(&run.best) || !improved {
                    prob.mu = (prob.mu * 2.0).min(MAX_PENALTY);
                }
                let anchor = prob.best_feasible.or(prob.least_infeasible).unwrap_or(run.best);
                x = std::array::from_fn(|k| {
                    (anchor.u[k] + rng.random_range(-RESTART_SPREAD..RESTART_SPREAD)).clamp(0.0, 1.0)
                });
            }
        }
        Solver::CobylaLike => {
            // Restart with a fresh radius from the best point until a run
            // stops improving it.
            let mut x = x0;
            for _ in 0..=cfg.restarts {
                let before = prob.best_feasible.map(|p| p.energy);
                let run = cobyla_like(&mut prob, x, &mut history)?;
                iterations += run.iterations;
                hit_limit |= run.hit_limit;
                match (before, prob.best_feasible) {
                    (Some(e0), Some(p)) if p.energy < e0 - 1e-9 * e0.abs().max(1.0) => x = p.u,
                    (None, Some(p)) => x = p.u,
                    _ => break,
                }
            }
        }
    }

    let chosen = prob
        .best_feasible
        .or(prob.least_infeasible)
        .ok_or_else(|| Error::invalid("solver produced no evaluations"))?;
    // zeta enters only the constraint, so it is re-chosen at d*. The
    // alpha_t-quantile of the predicted stress certifies the constraint
    // whenever the superquantile stays below tau, and it is the minimizer of
    // the constraint when that is active; otherwise fall back to the exact
    // minimizer if it improves on the iterate.
    let mut zeta_star = chosen.zeta;
    let mut lhs = chosen.lhs;
    if cfg.risk_constraint == RiskConstraint::Buffered && cfg.tau.is_finite() {
        let resp = prob.response(&chosen.d)?;
        let set = SampleSet::from_slice(&resp.sigma_max)?;
        let budget = 1.0 - cfg.alpha_t + cfg.constraint_tol;
        let q = estimate_quantile(&set, cfg.alpha_t)?;
        let at_q = if q < cfg.tau {
            Some(resp.constraint(q, cfg)?)
        } else {
            None
        };
        match at_q {
            Some(v) if v <= budget => {
                lhs = v;
                zeta_star = q;
            }
            _ => {
                let polished = estimate_bpof_minform(&set, cfg.tau).zeta;
                if polished < cfg.tau {
                    let v = resp.constraint(polished, cfg)?;
                    if v < lhs {
                        lhs = v;
                        zeta_star = polished;
                    }
                }
            }
        }
    }
    let final_point = Point {
        zeta: zeta_star,
        lhs,
        ..chosen
    };
    Ok(OptimizationResult {
        d0,
        d_star: chosen.d,
        zeta_star,
        energy: chosen.energy,
        bpof_lhs: lhs,
        t_max_hat: chosen.t_hat,
        iterations,
        evaluations: prob.evaluations,
        feasible: prob.feasible(&final_point),
        hit_iteration_limit: hit_limit,
        solver: cfg.solver,
        history,
    })
}
