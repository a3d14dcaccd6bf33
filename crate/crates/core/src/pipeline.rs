//! Sampling, training, optimization and validation glued together, plus the
//! artifact layout in the output directory.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{self, artifact};
use crate::error::{Error, Result};
use crate::optimize::{self, Evaluator, OptimizationResult, OptimizeConfig};
use crate::par;
use crate::reduction::{
    decompose, normalize_inputs, select_feature_count, truncation_error_curve, InputBounds, SnapshotKind,
    SnapshotMatrix, N_INPUTS, QUADRATIC_TERMS,
};
use crate::stress::{residual_stress, StressConfig};
use crate::surrogate::{FeatureModel, OutputModel, Provenance, SurrogateBundle, DEGREE_R2_MARGIN};
use crate::thermal::{simulate, DesignPoint, ModelParams, RandomInputs, SimGridConfig, GRID_LEN, SNAPSHOT_LEN};

/// Maximin restarts of the symmetric Latin hypercube.
pub const LHS_RESTARTS: usize = 50;
/// On a symmetric design the 22 even terms of the quadratic gradient fit
/// agree on each reflected pair, so the fit needs at least 22 pairs.
pub const MIN_RUNS: usize = 44;
pub const MIN_VALIDATION_RUNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionConfig {
    /// Largest acceptable mean relative reconstruction error.
    pub err_threshold: f64,
    /// Error decrease below which extra features are not worth keeping.
    pub min_gain: f64,
    pub k_max: usize,
    /// Polynomial degrees whose r2 is within this margin of the best count
    /// as equally good; the smallest one is kept.
    pub degree_margin: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            err_threshold: 0.05,
            min_gain: 0.02,
            k_max: 10,
            degree_margin: DEGREE_R2_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub doe: u64,
    /// Frozen Monte Carlo samples of the optimizer and the surrogate side of
    /// validation.
    pub mc: u64,
    pub validation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            doe: 17,
            mc: 2024,
            validation: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Training run count.
    pub runs: usize,
    /// Simulator runs used to validate the optimum.
    pub n_val: usize,
    pub input_bounds: InputBounds,
    pub model: ModelParams,
    pub grid: SimGridConfig,
    pub stress: StressConfig,
    pub reduction: ReductionConfig,
    pub optimize: OptimizeConfig,
    pub seeds: Seeds,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    /// Replace the simulators by a planted rank-2 analytic response.
    pub synthetic: bool,
    /// Validate the simulator against fresh simulator runs instead of the
    /// surrogate.
    pub self_validation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            runs: 120,
            n_val: 50,
            input_bounds: InputBounds::default(),
            model: ModelParams::default(),
            grid: SimGridConfig::default(),
            stress: StressConfig::default(),
            reduction: ReductionConfig::default(),
            optimize: OptimizeConfig::default(),
            seeds: Seeds::default(),
            workers: None,
            output_dir: PathBuf::from("out"),
            synthetic: false,
            self_validation: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    hint: "config file not found".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            what: format!("config {}", path.display()),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < MIN_RUNS {
            return Err(Error::invalid(format!(
                "at least {MIN_RUNS} training runs are needed for the {QUADRATIC_TERMS}-term \
                 gradient fit on a symmetric design, got {}",
                self.runs
            )));
        }
        if self.n_val < MIN_VALIDATION_RUNS {
            return Err(Error::invalid(format!(
                "at least {MIN_VALIDATION_RUNS} validation runs are needed, got {}",
                self.n_val
            )));
        }
        self.input_bounds.validate()?;
        self.model.validate()?;
        if !(self.grid.cfl_factor > 0.0 && self.grid.cfl_factor <= 1.0) {
            return Err(Error::invalid("cfl_factor must lie in (0, 1]"));
        }
        let r = &self.reduction;
        if r.k_max == 0 || !(r.err_threshold > 0.0) || !(r.min_gain >= 0.0) || !(r.degree_margin >= 0.0) {
            return Err(Error::invalid(
                "reduction needs k_max >= 1, err_threshold > 0, min_gain >= 0 and degree_margin >= 0",
            ));
        }
        self.optimize.validate()?;
        let b = &self.input_bounds.0;
        let o = &self.optimize;
        if o.v_bounds.lower < b[0].lower
            || o.v_bounds.upper > b[0].upper
            || o.p_bounds.lower < b[1].lower
            || o.p_bounds.upper > b[1].upper
        {
            return Err(Error::invalid(
                "optimizer bounds must lie inside the training bounds for v and P",
            ));
        }
        Ok(())
    }

    /// Optimizer settings with the pipeline's Monte Carlo seed applied.
    pub fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            seed: self.seeds.mc,
            ..self.optimize.clone()
        }
    }

    /// SHA-256 of the settings that determine training results.
    pub fn training_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            runs: usize,
            input_bounds: &'a InputBounds,
            model: &'a ModelParams,
            grid: &'a SimGridConfig,
            stress: &'a StressConfig,
            reduction: &'a ReductionConfig,
            doe_seed: u64,
            synthetic: bool,
        }
        let key = Key {
            runs: self.runs,
            input_bounds: &self.input_bounds,
            model: &self.model,
            grid: &self.grid,
            stress: &self.stress,
            reduction: &self.reduction,
            doe_seed: self.seeds.doe,
            synthetic: self.synthetic,
        };
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        artifact(&self.output_dir, name)
    }
}

/// One symmetric Latin hypercube on `[0, 1]^n`.
fn symmetric_lhs(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; n]; m];
    let half = m / 2;
    for col in 0..n {
        let mut strata: Vec<usize> = (0..half).collect();
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            let s = if rng.random_bool(0.5) { s } else { m - 1 - s };
            let u: f64 = rng.random();
            pts[i][col] = (s as f64 + u) / m as f64;
            pts[m - 1 - i][col] = ((m - 1 - s) as f64 + 1.0 - u) / m as f64;
        }
        if m % 2 == 1 {
            pts[half][col] = 0.5;
        }
    }
    pts
}

fn min_pairwise_sq(pts: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d);
        }
    }
    best
}

/// Symmetric Latin hypercube design of `m` raw input vectors, the best of
/// [`LHS_RESTARTS`] by minimum pairwise distance.
///
/// Point `i` and point `m - 1 - i` are reflections through the box midpoint.
pub fn generate_doe(m: usize, bounds: &InputBounds, seed: u64) -> Result<Vec<[f64; N_INPUTS]>> {
    if m == 0 {
        return Err(Error::invalid("design size must be at least 1"));
    }
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..LHS_RESTARTS {
        let pts = symmetric_lhs(m, N_INPUTS, &mut rng);
        let score = min_pairwise_sq(&pts);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, pts));
        }
    }
    let (_, unit) = best.expect("at least one restart");
    Ok(unit
        .iter()
        .map(|u| std::array::from_fn(|j| bounds.0[j].lower + u[j] * bounds.0[j].width()))
        .collect())
}

/// Splits a raw input vector into design and uncertain parts.
pub fn split_inputs(xi: &[f64; N_INPUTS]) -> (DesignPoint, RandomInputs) {
    (
        DesignPoint::new(xi[0], xi[1]),
        RandomInputs {
            t0: xi[2],
            y: xi[3],
            e: xi[4],
            rho: xi[5],
        },
    )
}

/// Response of one run: 31 probe temperatures and the 448-cell stress grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub temps: Vec<f64>,
    pub stress: Vec<f64>,
    pub sigma_max: f64,
}

/// Direction of the planted synthetic response in normalized input space.
const SYNTHETIC_DIRECTION: [f64; N_INPUTS] = [0.6, 0.5, -0.3, 0.2, 0.4, -0.3];

fn synthetic_run(xi: &[f64; N_INPUTS], bounds: &InputBounds) -> Result<RunOutput> {
    let x = normalize_inputs(xi, bounds)?;
    let norm = SYNTHETIC_DIRECTION.iter().map(|w| w * w).sum::<f64>().sqrt();
    let s: f64 = SYNTHETIC_DIRECTION.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() / norm;
    // Two fixed output profiles weighted by a linear and a quadratic ridge.
    let (a, b) = (1.0 + 0.2 * s, 0.5 * (s * s - 0.4));
    let profile = |n: usize, i: usize, k: f64| {
        let t = i as f64 / (n - 1) as f64;
        (std::f64::consts::PI * k * t).sin()
    };
    let temps = (0..SNAPSHOT_LEN)
        .map(|i| 1000.0 * (a * (0.5 + profile(SNAPSHOT_LEN, i, 1.0)) + b * profile(SNAPSHOT_LEN, i, 2.0)))
        .collect();
    let stress: Vec<f64> = (0..GRID_LEN)
        .map(|i| 600.0 * (a * (0.5 + profile(GRID_LEN, i, 1.0)) + b * profile(GRID_LEN, i, 3.0)))
        .collect();
    let sigma_max = crate::stress::max_stress(&stress)?;
    Ok(RunOutput {
        temps,
        stress,
        sigma_max,
    })
}

/// Thermal run followed by the stress proxy, or the synthetic response.
pub fn run_model(xi: &[f64; N_INPUTS], cfg: &PipelineConfig) -> Result<RunOutput> {
    if cfg.synthetic {
        return synthetic_run(xi, &cfg.input_bounds);
    }
    let (d, z) = split_inputs(xi);
    let snap = simulate(&d, &z, &cfg.model, &cfg.grid)?;
    let field = residual_stress(&snap, &z, &cfg.model, &cfg.stress)?;
    Ok(RunOutput {
        temps: snap.temps,
        stress: field.grid,
        sigma_max: field.sigma_max,
    })
}

/// Runs every input vector in parallel; results follow input order.
pub fn run_batch(inputs: &[[f64; N_INPUTS]], cfg: &PipelineConfig) -> Result<Vec<RunOutput>> {
    par::try_map_range(inputs.len(), |i| {
        run_model(&inputs[i], cfg).map_err(|e| Error::RunFailed {
            index: i,
            inputs: inputs[i],
            source: Box::new(e),
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub doe: Vec<[f64; N_INPUTS]>,
    /// M × 31.
    pub temps: DMatrix<f64>,
    /// M × 448.
    pub stress: DMatrix<f64>,
}

impl TrainingData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let rows = |m: &DMatrix<f64>| crate::linalg::to_rows(m);
        artifacts::write_csv(&artifact(dir, artifacts::DOE_FILE), &self.doe)?;
        artifacts::write_csv(&artifact(dir, artifacts::TEMPERATURE_FILE), &rows(&self.temps))?;
        artifacts::write_csv(&artifact(dir, artifacts::STRESS_FILE), &rows(&self.stress))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hint = "run `simulate` first";
        let doe_rows = artifacts::read_csv(&artifact(dir, artifacts::DOE_FILE), hint)?;
        let t_rows = artifacts::read_csv(&artifact(dir, artifacts::TEMPERATURE_FILE), hint)?;
        let s_rows = artifacts::read_csv(&artifact(dir, artifacts::STRESS_FILE), hint)?;
        let doe = doe_rows
            .iter()
            .map(|r| {
                <[f64; N_INPUTS]>::try_from(r.as_slice())
                    .map_err(|_| Error::shape(format!("{N_INPUTS} doe columns"), r.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = Self {
            doe,
            temps: crate::linalg::from_rows(&t_rows)?,
            stress: crate::linalg::from_rows(&s_rows)?,
        };
        data.check()?;
        Ok(data)
    }

    fn check(&self) -> Result<()> {
        let m = self.doe.len();
        if self.temps.nrows() != m || self.stress.nrows() != m {
            return Err(Error::shape(
                format!("{m} rows in T and S"),
                format!("{} and {}", self.temps.nrows(), self.stress.nrows()),
            ));
        }
        if self.temps.ncols() != SNAPSHOT_LEN {
            return Err(Error::shape(SNAPSHOT_LEN, self.temps.ncols()));
        }
        if self.stress.ncols() != GRID_LEN {
            return Err(Error::shape(GRID_LEN, self.stress.ncols()));
        }
        Ok(())
    }
}

/// Generates the design and runs every training simulation.
pub fn run_simulations(cfg: &PipelineConfig) -> Result<TrainingData> {
    cfg.validate()?;
    let doe = generate_doe(cfg.runs, &cfg.input_bounds, cfg.seeds.doe)?;
    let outs = run_batch(&doe, cfg)?;
    let m = doe.len();
    let temps = DMatrix::from_fn(m, SNAPSHOT_LEN, |i, j| outs[i].temps[j]);
    let stress = DMatrix::from_fn(m, GRID_LEN, |i, j| outs[i].stress[j]);
    Ok(TrainingData { doe, temps, stress })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub active_dim: usize,
    pub degree: usize,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub k: usize,
    pub err_curve: Vec<f64>,
    pub features: Vec<FeatureSummary>,
}

/// Feature counts, error curves and fit quality of a trained bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub runs: usize,
    pub config_hash: String,
    pub temperature: OutputSummary,
    pub stress: OutputSummary,
}

fn train_output(
    kind: SnapshotKind,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    cfg: &PipelineConfig,
) -> Result<(OutputModel, Vec<f64>)> {
    let snapshots = SnapshotMatrix::new(data.clone(), kind)?;
    let r = &cfg.reduction;
    // An identically zero output (no thermal strain anywhere) is reproduced
    // exactly by one zero feature.
    let curve = if data.iter().all(|&v| v == 0.0) {
        vec![0.0]
    } else {
        truncation_error_curve(&snapshots, r.k_max)?
    };
    let k = select_feature_count(&curve, r.err_threshold, r.min_gain)?;
    let dec = decompose(&snapshots, k)?;
    let features = par::try_map_range(k, |j| {
        let col: Vec<f64> = dec.features.column(j).iter().copied().collect();
        FeatureModel::train(inputs, &col, &cfg.input_bounds, r.degree_margin)
    })?;
    Ok((
        OutputModel {
            kind,
            right_vectors: dec.right_vectors,
            singular_values: dec.singular_values,
            features,
        },
        curve,
    ))
}

fn summarize(m: &OutputModel, curve: Vec<f64>) -> OutputSummary {
    OutputSummary {
        k: m.k(),
        err_curve: curve,
        features: m
            .features
            .iter()
            .map(|f| FeatureSummary {
                active_dim: f.subspace.r,
                degree: f.surrogate.degree,
                r2: f.surrogate.r2,
            })
            .collect(),
    }
}

/// Feature extraction, active subspaces and surrogate fits on simulated data.
pub fn train(data: &TrainingData, cfg: &PipelineConfig) -> Result<(SurrogateBundle, TrainingReport)> {
    data.check()?;
    let m = data.doe.len();
    if m <= QUADRATIC_TERMS {
        return Err(Error::invalid(format!(
            "training needs more than {QUADRATIC_TERMS} runs, got {m}"
        )));
    }
    let mut inputs = DMatrix::zeros(m, N_INPUTS);
    for (i, xi) in data.doe.iter().enumerate() {
        for (j, v) in normalize_inputs(xi, &cfg.input_bounds)?.into_iter().enumerate() {
            inputs[(i, j)] = v;
        }
    }
    let (temperature, t_curve) = train_output(SnapshotKind::Temperature, &data.temps, &inputs, cfg)?;
    let (stress, s_curve) = train_output(SnapshotKind::Stress, &data.stress, &inputs, cfg)?;
    let config_hash = cfg.training_hash()?;
    let report = TrainingReport {
        runs: m,
        config_hash: config_hash.clone(),
        temperature: summarize(&temperature, t_curve),
        stress: summarize(&stress, s_curve),
    };
    let bundle = SurrogateBundle {
        temperature,
        stress,
        input_bounds: cfg.input_bounds,
        provenance: Provenance {
            seed: cfg.seeds.doe,
            runs: m,
            config_hash,
        },
    };
    bundle.validate()?;
    Ok((bundle, report))
}

/// Simulations, training and persistence of every training artifact.
pub fn run_training(cfg: &PipelineConfig) -> Result<(SurrogateBundle, TrainingReport)> {
    let data = run_simulations(cfg)?;
    data.save(&cfg.output_dir)?;
    let (bundle, report) = train(&data, cfg)?;
    save_training(cfg, &bundle, &report)?;
    Ok((bundle, report))
}

pub fn save_training(cfg: &PipelineConfig, b: &SurrogateBundle, r: &TrainingReport) -> Result<()> {
    artifacts::save_bundle(&cfg.path(artifacts::BUNDLE_FILE), b)?;
    artifacts::write_json(&cfg.path(artifacts::TRAINING_REPORT_FILE), "training-report", r)
}

/// Results of one optimization campaign from several starting designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub tau: f64,
    pub alpha_t: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub runs: Vec<OptimizationResult>,
    /// Index into `runs` of the lowest-energy feasible result.
    pub best: Option<usize>,
}

impl OptimizeReport {
    pub fn best_run(&self) -> Option<&OptimizationResult> {
        self.best.map(|i| &self.runs[i])
    }
}

/// Solves from every start with one shared frozen sample set.
pub fn run_optimization(b: &SurrogateBundle, cfg: &PipelineConfig, starts: &[DesignPoint]) -> Result<OptimizeReport> {
    if starts.is_empty() {
        return Err(Error::invalid("at least one initial design is needed"));
    }
    let ocfg = cfg.optimize_config();
    ocfg.validate()?;
    let samples = optimize::draw_samples(&b.input_bounds, ocfg.n_mc, ocfg.seed);
    let runs = starts
        .iter()
        .map(|d0| optimize::solve_with_samples(b, &ocfg, *d0, &samples))
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.feasible)
        .min_by(|a, b| a.1.energy.total_cmp(&b.1.energy))
        .map(|(i, _)| i);
    Ok(OptimizeReport {
        tau: ocfg.tau,
        alpha_t: ocfg.alpha_t,
        n_mc: ocfg.n_mc,
        seed: ocfg.seed,
        runs,
        best,
    })
}

pub fn save_optimization(cfg: &PipelineConfig, r: &OptimizeReport) -> Result<()> {
    artifacts::write_json(&cfg.path(artifacts::OPTIMIZE_FILE), "optimize-report", r)?;
    let rows: Vec<Vec<f64>> = r
        .runs
        .iter()
        .enumerate()
        .flat_map(|(run, res)| {
            res.history.iter().map(move |h| {
                vec![
                    run as f64,
                    h.iteration as f64,
                    h.v,
                    h.p,
                    h.zeta,
                    h.energy,
                    h.bpof_lhs,
                    h.t_max_hat,
                    if h.feasible { 1.0 } else { 0.0 },
                ]
            })
        })
        .collect();
    artifacts::write_csv(&cfg.path(artifacts::HISTORY_FILE), &rows)
}

pub fn load_optimization(dir: &Path) -> Result<OptimizeReport> {
    artifacts::read_json(
        &artifact(dir, artifacts::OPTIMIZE_FILE),
        "optimize-report",
        "run `optimize` first",
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub d_star: DesignPoint,
    pub zeta_star: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Superquantile from fresh simulator runs, MPa.
    pub q_sim: f64,
    /// Superquantile from surrogate evaluations (or a second simulator batch
    /// in self-validation mode), MPa.
    pub q_surr: f64,
    /// `(q_sim - q_surr) / q_sim`.
    pub rel_diff: f64,
    /// Monte Carlo standard error of `rel_diff`.
    pub std_error: f64,
    pub n_sim: usize,
    pub n_surr: usize,
    pub self_validation: bool,
}

/// `zeta + mean[(g - zeta)^+] / (1 - alpha)` and its standard error.
pub fn superquantile_with_zeta(samples: &[f64], zeta: f64, alpha: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(alpha >= 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in [0,1), got {alpha}")));
    }
    let n = samples.len() as f64;
    let ex: Vec<f64> = samples.iter().map(|g| (g - zeta).max(0.0)).collect();
    let mean = ex.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        ex.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let scale = 1.0 / (1.0 - alpha);
    Ok((zeta + scale * mean, scale * (var / n).sqrt()))
}

/// Compares simulator-based and surrogate-based superquantiles of the
/// maximum residual stress at the optimum, using `zeta_star` as the
/// quantile proxy.
pub fn validate(
    d_star: DesignPoint,
    zeta_star: f64,
    b: &SurrogateBundle,
    cfg: &PipelineConfig,
) -> Result<ValidationReport> {
    cfg.validate()?;
    if b.input_bounds != cfg.input_bounds {
        return Err(Error::invalid("bundle was trained on different input bounds"));
    }
    let bounds = &cfg.input_bounds.0;
    if !(d_star.v >= bounds[0].lower
        && d_star.v <= bounds[0].upper
        && d_star.p >= bounds[1].lower
        && d_star.p <= bounds[1].upper)
    {
        return Err(Error::invalid("d_star lies outside the training bounds"));
    }
    let alpha = cfg.optimize.alpha_t;
    let sim_sigma = |seed: u64, n: usize| -> Result<Vec<f64>> {
        let zs = optimize::draw_samples(&cfg.input_bounds, n, seed);
        let inputs: Vec<[f64; N_INPUTS]> = zs.iter().map(|z| [d_star.v, d_star.p, z.t0, z.y, z.e, z.rho]).collect();
        Ok(run_batch(&inputs, cfg)?.into_iter().map(|o| o.sigma_max).collect())
    };
    let sim = sim_sigma(cfg.seeds.validation, cfg.n_val)?;
    let other = if cfg.self_validation {
        sim_sigma(cfg.seeds.validation.wrapping_add(1), cfg.n_val)?
    } else {
        let n_mc = cfg.optimize.n_mc;
        let zs = optimize::draw_samples(&cfg.input_bounds, n_mc, cfg.seeds.validation.wrapping_add(1));
        Evaluator::new(b, &zs)?.respond(&d_star)?.sigma_max
    };
    let (q_sim, se_sim) = superquantile_with_zeta(&sim, zeta_star, alpha)?;
    let (q_surr, se_surr) = superquantile_with_zeta(&other, zeta_star, alpha)?;
    let rel_diff = (q_sim - q_surr) / q_sim;
    let std_error = (se_sim.powi(2) + se_surr.powi(2)).sqrt() / q_sim.abs();
    Ok(ValidationReport {
        d_star,
        zeta_star,
        alpha,
        tau: cfg.optimize.tau,
        q_sim,
        q_surr,
        rel_diff,
        std_error,
        n_sim: sim.len(),
        n_surr: other.len(),
        self_validation: cfg.self_validation,
    })
}

pub fn save_validation(cfg: &PipelineConfig, r: &ValidationReport) -> Result<()> {
    artifacts::write_json(&cfg.path(artifacts::VALIDATION_FILE), "validation-report", r)
}

/// Everything produced by [`run_all`].
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub bundle: SurrogateBundle,
    pub training: TrainingReport,
    pub optimization: OptimizeReport,
    pub validation: Option<ValidationReport>,
}

/// simulate → train → optimize → validate, persisting every artifact.
/// Validation is skipped when no start reached a feasible optimum.
pub fn run_all(cfg: &PipelineConfig, starts: &[DesignPoint]) -> Result<PipelineOutcome> {
    let (bundle, training) = run_training(cfg)?;
    let optimization = run_optimization(&bundle, cfg, starts)?;
    save_optimization(cfg, &optimization)?;
    let validation = match optimization.best_run() {
        Some(best) => {
            let r = validate(best.d_star, best.zeta_star, &bundle, cfg)?;
            save_validation(cfg, &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(PipelineOutcome {
        bundle,
        training,
        optimization,
        validation,
    })
}
