//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order. The
//! process fails when a criterion outside [`EXPECTED_RED`] fails, or when an
//! expected-red criterion starts passing (so the list never goes stale).

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use pbf_rbdo::artifacts::{self, artifact};
use pbf_rbdo::optimize::{draw_samples, energy, Evaluator};
use pbf_rbdo::pipeline::{generate_doe, run_all, validate, PipelineConfig};
use pbf_rbdo::reduction::{
    decompose, discover, estimate_gradients, normalize_inputs, reconstruct, select_feature_count,
    truncation_error_curve, InputBounds, QuadraticFit, SnapshotKind, SnapshotMatrix, N_INPUTS,
};
use pbf_rbdo::risk::{
    estimate_bpof_minform, estimate_bpof_tail, estimate_pof, estimate_quantile, estimate_superquantile, SampleSet,
};
use pbf_rbdo::thermal::{simulate, DesignPoint, ModelParams, RandomInputs, SimGridConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use tempfile::TempDir;

/// Criteria that cannot be met as specified; the analysis is in the README.
const EXPECTED_RED: [u32; 2] = [6, 9];

const REFERENCE_STARTS: [(f64, f64); 4] = [(500.0, 160.0), (400.0, 100.0), (400.0, 125.0), (600.0, 100.0)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let u = SampleSet::new((0..100_000).map(|_| r.random::<f64>()).collect()).unwrap();
    let e = SampleSet::new((0..100_000).map(|_| r.sample::<f64, _>(Exp1)).collect()).unwrap();
    let q = estimate_quantile(&u, 0.95).unwrap();
    let sq = estimate_superquantile(&u, 0.95).unwrap();
    let sq_exp = estimate_superquantile(&e, 0.95).unwrap();
    let exact_exp = -(0.05f64).ln() + 1.0;
    let elapsed = start.elapsed();
    let pass = (q - 0.95).abs() <= 0.01
        && (sq - 0.975).abs() <= 0.01
        && (sq_exp - exact_exp).abs() <= 0.05
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!("Q_0.95 {q:.4}, uniform superquantile {sq:.4}, exponential superquantile {sq_exp:.4} (exact {exact_exp:.4}), {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    // Integer samples with tau - min dividing 1000 keep every candidate zeta
    // on the oracle grid, so the 1e-6 comparison is not swamped by grid error.
    let spans = [1.0, 2.0, 4.0, 5.0, 8.0, 10.0, 20.0, 25.0, 40.0, 50.0, 100.0];
    let mut r = rng(2);
    let (mut worst_grid, mut tail_violations) = (0.0f64, 0);
    for _ in 0..200 {
        let n = r.random_range(1..=50);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(0..=100) as f64).collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let tau = min + spans[r.random_range(0..spans.len())];
        let s = SampleSet::from_slice(&values).unwrap();
        worst_grid = worst_grid.max((estimate_bpof_minform(&s, tau).bpof - common::grid_bpof(&values, tau)).abs());

        let alpha = r.random_range(0.05..0.95);
        let real: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let s = SampleSet::from_slice(&real).unwrap();
        let tail = estimate_bpof_tail(&s, alpha).unwrap();
        let min = estimate_bpof_minform(&s, tail.tau).bpof;
        if (tail.bpof - min).abs() > 1.0 / n as f64 + 1e-12 {
            tail_violations += 1;
        }
    }
    outcome(
        worst_grid <= 1e-6 && tail_violations == 0,
        format!("max |minform - grid| {worst_grid:.1e}, tail-vs-minform violations {tail_violations}/200"),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut violations = 0;
    for trial in 0..10_000 {
        let n = r.random_range(1..=100);
        let values: Vec<f64> = match trial % 3 {
            0 => (0..n).map(|_| r.random_range(-100.0..100.0)).collect(),
            1 => (0..n).map(|_| r.sample::<f64, _>(Exp1) * 50.0).collect(),
            _ => (0..n).map(|_| r.random_range(0..5) as f64).collect(),
        };
        let s = SampleSet::from_slice(&values).unwrap();
        let tau = r.random_range(-120.0..300.0);
        let alpha = r.random_range(0.0..0.999);
        let buffered = estimate_bpof_minform(&s, tau).bpof >= estimate_pof(&s, tau);
        let ordered = estimate_superquantile(&s, alpha).unwrap() >= estimate_quantile(&s, alpha).unwrap() - 1e-9;
        if !(buffered && ordered) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations in 10000 trials"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut worst_rel = 0.0f64;
    let mut monotone = true;
    for &(m, n) in &[(10, 6), (6, 10), (120, 31), (40, 448)] {
        let data = DMatrix::from_fn(m, n, |_, _| r.random_range(0.1..10.0));
        let snaps = SnapshotMatrix::new(data.clone(), SnapshotKind::Stress).unwrap();
        let f = decompose(&snaps, m.min(n)).unwrap();
        worst_rel = worst_rel.max((reconstruct(&f).unwrap() - &data).norm() / data.norm());
        let curve = truncation_error_curve(&snaps, m.min(n)).unwrap();
        monotone &= curve.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }
    let err_t = [
        0.10325313944291051,
        0.04530458923079103,
        0.008644761206775068,
        0.0032871406645308397,
        0.001943224380352817,
        0.0015067953784717004,
        0.0012720758890423156,
        0.0010631241969934668,
        0.0008968229291920379,
        0.0007490274357354919,
    ];
    let err_s = [
        0.39987282961628545,
        0.26315456388152675,
        0.15059725663747497,
        0.13418503344473287,
        0.10370120666329985,
        0.09284355897732577,
        0.08453758821970234,
        0.07918093976700538,
        0.07501744014285021,
        0.07074871407171848,
    ];
    let k_t = select_feature_count(&err_t, 0.05, 0.02).unwrap();
    let k_s = select_feature_count(&err_s, 0.05, 0.02).unwrap();
    let elapsed = start.elapsed();
    outcome(
        worst_rel <= 1e-10 && monotone && k_t == 2 && k_s == 5 && elapsed < Duration::from_secs(1),
        format!("reconstruction {worst_rel:.1e}, monotone curves {monotone}, K_T {k_t}, K_S {k_s}, {elapsed:.2?}"),
    )
}

fn normalized_doe(m: usize, seed: u64) -> DMatrix<f64> {
    let bounds = InputBounds::default();
    let doe = generate_doe(m, &bounds, seed).unwrap();
    let mut x = DMatrix::zeros(m, N_INPUTS);
    for (i, xi) in doe.iter().enumerate() {
        for (j, v) in normalize_inputs(xi, &bounds).unwrap().into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    x
}

fn criterion_5() -> Outcome {
    let profiles: [fn(f64) -> f64; 4] = [
        f64::sin,
        |s| (0.5 * s).exp(),
        |s| s + s * s * s / 3.0,
        |s| s * s + 0.5 * s,
    ];
    let mut hits = 0;
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut r = rng(500 + trial);
        let raw: Vec<f64> = (0..N_INPUTS).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let x = normalized_doe(120, trial);
        let g = profiles[trial as usize % profiles.len()];
        let values: Vec<f64> = (0..120)
            .map(|i| g((0..N_INPUTS).map(|j| w[j] * x[(i, j)]).sum()))
            .collect();
        let grads = estimate_gradients(&x, &values).unwrap();
        let sub = discover(&grads, &InputBounds::default()).unwrap();
        let cos: f64 = (0..N_INPUTS).map(|j| sub.w1[(j, 0)] * w[j]).sum::<f64>().abs().min(1.0);
        let angle = cos.acos().to_degrees();
        worst = worst.max(angle);
        if sub.r == 1 && angle <= 5.0 {
            hits += 1;
        }
    }
    outcome(
        hits >= 95,
        format!("{hits}/100 trials with r = 1 and angle <= 5 deg, worst angle {worst:.2} deg"),
    )
}

fn criterion_6() -> Outcome {
    let x = normalized_doe(120, 6);
    let mut r = rng(6);
    let coef: Vec<f64> = (0..28).map(|_| r.random_range(-2.0..2.0)).collect();
    let quad = |p: &[f64]| {
        let mut v = coef[0];
        let mut c = 1;
        for i in 0..N_INPUTS {
            v += coef[c] * p[i];
            c += 1;
        }
        for i in 0..N_INPUTS {
            for j in i..N_INPUTS {
                v += coef[c] * p[i] * p[j];
                c += 1;
            }
        }
        v
    };
    let row = |i: usize| -> Vec<f64> { x.row(i).iter().copied().collect() };

    // Finite differences of the fitted polynomial.
    let sine: Vec<f64> = (0..120).map(|i| x[(i, 0)].sin()).collect();
    let mut fd_worst = 0.0f64;
    for values in [(0..120).map(|i| quad(&row(i))).collect::<Vec<_>>(), sine.clone()] {
        let fit = QuadraticFit::fit(&x, &values).unwrap();
        for i in 0..120 {
            let p = row(i);
            let g = fit.gradient(&p);
            for k in 0..N_INPUTS {
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[k] += 1e-4;
                dn[k] -= 1e-4;
                let fd = (fit.eval(&up) - fit.eval(&dn)) / 2e-4;
                fd_worst = fd_worst.max((g[k] - fd).abs() / (1.0 + fd.abs()));
            }
        }
    }

    // Analytic derivative of the smooth planted function sin(x_1).
    let grads = estimate_gradients(&x, &sine).unwrap();
    let mut analytic_worst = 0.0f64;
    for i in 0..120 {
        let exact = [x[(i, 0)].cos(), 0.0, 0.0, 0.0, 0.0, 0.0];
        for (k, e) in exact.iter().enumerate() {
            analytic_worst = analytic_worst.max((grads[(i, k)] - e).abs());
        }
    }
    // No quadratic can do better: its derivative in x_1 is linear, and the
    // best uniform linear fit to cos on [-1, 1] is the constant (1 + cos 1) / 2.
    let floor = (1.0 - 1.0f64.cos()) / 2.0;
    outcome(
        fd_worst <= 1e-8 && analytic_worst <= 0.08,
        format!(
            "finite differences {fd_worst:.1e}; sin(x_1) gradient error {analytic_worst:.3} vs 0.08 \
             (any quadratic fit errs by at least {floor:.3})"
        ),
    )
}

fn criterion_7() -> Outcome {
    let p = ModelParams::default();
    let z = RandomInputs::nominal();
    let grid = SimGridConfig::default();
    let cold = simulate(
        &DesignPoint::new(1000.0, 0.0),
        &RandomInputs {
            t0: p.chamber_temp,
            ..z
        },
        &p,
        &grid,
    )
    .unwrap();
    let drift = cold
        .temps
        .iter()
        .chain(&cold.peak_field)
        .map(|t| (t - p.chamber_temp).abs())
        .fold(0.0, f64::max);

    let peak =
        |v: f64, power: f64, g: &SimGridConfig| simulate(&DesignPoint::new(v, power), &z, &p, g).unwrap().max_temp();
    let p_sweep: Vec<f64> = [20.0, 65.0, 110.0, 155.0, 200.0]
        .iter()
        .map(|&w| peak(600.0, w, &grid))
        .collect();
    let v_sweep: Vec<f64> = [100.0, 325.0, 550.0, 775.0, 1000.0]
        .iter()
        .map(|&v| peak(v, 120.0, &grid))
        .collect();
    let monotone = p_sweep.windows(2).all(|w| w[1] >= w[0]) && v_sweep.windows(2).all(|w| w[1] <= w[0]);

    let fine = SimGridConfig {
        cells_x: 2 * grid.cells_x,
        cells_z: 2 * grid.cells_z,
        ..grid
    };
    let coarse_peak = peak(550.0, 110.0, &grid);
    let fine_peak = peak(550.0, 110.0, &fine);
    let change = (fine_peak - coarse_peak).abs() / coarse_peak;

    // The slowest scan at full power takes the most time steps.
    let start = Instant::now();
    peak(100.0, 200.0, &grid);
    let slowest = start.elapsed();
    outcome(
        drift < 1e-6 && monotone && change < 0.02 && slowest < Duration::from_secs(2),
        format!(
            "zero-source drift {drift:.1e} C, sweeps monotone {monotone}, grid halving {:.2}%, slowest run {slowest:.2?}",
            100.0 * change
        ),
    )
}

fn start_is_feasible(out: &pbf_rbdo::pipeline::PipelineOutcome, cfg: &PipelineConfig, d0: DesignPoint) -> bool {
    let o = cfg.optimize_config();
    let samples = draw_samples(&out.bundle.input_bounds, o.n_mc, o.seed);
    let resp = Evaluator::new(&out.bundle, &samples).unwrap().respond(&d0).unwrap();
    let set = SampleSet::from_slice(&resp.sigma_max).unwrap();
    let t_hat = resp.t_max.iter().sum::<f64>() / resp.t_max.len() as f64;
    estimate_bpof_minform(&set, o.tau).bpof <= 1.0 - o.alpha_t + o.constraint_tol
        && o.temp_window.lower < t_hat
        && t_hat < o.temp_window.upper
}

fn criterion_8(out: &pbf_rbdo::pipeline::PipelineOutcome, cfg: &PipelineConfig, elapsed: Duration) -> Outcome {
    let runs = &out.optimization.runs;
    let feasible: Vec<_> = runs.iter().filter(|r| r.feasible).collect();
    let energies: Vec<f64> = feasible.iter().map(|r| r.energy).collect();
    let (lo, hi) = energies
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let agree = feasible.len() == runs.len() && hi <= 1.1 * lo;
    let mut beats_starts = true;
    let mut feasible_starts = 0;
    for &(v, p) in &REFERENCE_STARTS {
        let d0 = DesignPoint::new(v, p);
        if start_is_feasible(out, cfg, d0) {
            feasible_starts += 1;
            beats_starts &= lo <= energy(&d0, cfg.optimize.length).unwrap() + 1e-9;
        }
    }
    let summary: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "({:.0},{:.0})->{:.4} J{}",
                r.d0.v,
                r.d0.p,
                r.energy,
                if r.feasible { "" } else { " infeasible" }
            )
        })
        .collect();
    outcome(
        elapsed < Duration::from_secs(600) && feasible.len() >= 3 && beats_starts && agree,
        format!(
            "{}/4 feasible [{}], spread {:.2}%, {feasible_starts} feasible starts all beaten {beats_starts}, {elapsed:.1?}",
            feasible.len(),
            summary.join(", "),
            100.0 * (hi / lo - 1.0)
        ),
    )
}

fn criterion_9(out: &pbf_rbdo::pipeline::PipelineOutcome, cfg: &PipelineConfig) -> Outcome {
    let Some(v) = &out.validation else {
        return outcome(false, "no feasible optimum to validate".into());
    };
    let best = out.optimization.best_run().unwrap();
    let self_cfg = PipelineConfig {
        self_validation: true,
        ..cfg.clone()
    };
    let s = validate(best.d_star, best.zeta_star, &out.bundle, &self_cfg).unwrap();
    let surrogate_ok = v.rel_diff.abs() <= 0.05 && v.n_sim == 50;
    let self_ok = s.rel_diff.abs() <= 2.0 * s.std_error;
    outcome(
        surrogate_ok && self_ok,
        format!(
            "surrogate rel_diff {:+.2}% (q_sim {:.1}, q_surr {:.1} MPa, limit 5%); self-validation rel_diff {:+.2}% \
             vs 2 SE {:.2}%",
            100.0 * v.rel_diff,
            v.q_sim,
            v.q_surr,
            100.0 * s.rel_diff,
            200.0 * s.std_error
        ),
    )
}

fn criterion_10(first: &Path, cfg: &PipelineConfig) -> Outcome {
    let dir = TempDir::new().unwrap();
    let again = PipelineConfig {
        output_dir: dir.path().to_path_buf(),
        ..cfg.clone()
    };
    let starts: Vec<DesignPoint> = REFERENCE_STARTS.iter().map(|&(v, p)| DesignPoint::new(v, p)).collect();
    run_all(&again, &starts).unwrap();
    let names = [
        artifacts::DOE_FILE,
        artifacts::TEMPERATURE_FILE,
        artifacts::STRESS_FILE,
        artifacts::BUNDLE_FILE,
        artifacts::TRAINING_REPORT_FILE,
        artifacts::OPTIMIZE_FILE,
        artifacts::HISTORY_FILE,
        artifacts::VALIDATION_FILE,
    ];
    let differing: Vec<&str> = names
        .iter()
        .copied()
        .filter(|n| std::fs::read(artifact(first, n)).ok() != std::fs::read(artifact(dir.path(), n)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", names.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn main() {
    // `cargo test -- --list` and filters come through as arguments; this
    // target has no individually addressable tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());

    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig {
        output_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let starts: Vec<DesignPoint> = REFERENCE_STARTS.iter().map(|&(v, p)| DesignPoint::new(v, p)).collect();
    let start = Instant::now();
    let out = run_all(&cfg, &starts).unwrap();
    let elapsed = start.elapsed();
    report(8, criterion_8(&out, &cfg, elapsed));
    report(9, criterion_9(&out, &cfg));
    report(10, criterion_10(dir.path(), &cfg));

    let unexpected: Vec<String> = results
        .iter()
        .filter(|(n, o)| o.pass == EXPECTED_RED.contains(n))
        .map(|(n, o)| {
            format!(
                "{n} ({})",
                if o.pass {
                    "now passes; update EXPECTED_RED"
                } else {
                    "failed"
                }
            )
        })
        .collect();
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!(
        "{passed}/{} criteria pass; expected red: {EXPECTED_RED:?}",
        results.len()
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected results: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
