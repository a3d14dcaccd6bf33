use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbf_rbdo::artifacts;
use pbf_rbdo::optimize::Solver;
use pbf_rbdo::pipeline::{self, OptimizeReport, PipelineConfig, TrainingData, TrainingReport};
use pbf_rbdo::risk::{assess, SampleSet};
use pbf_rbdo::thermal::DesignPoint;
use pbf_rbdo::{par, Error, Result};

/// Starting designs used when `optimize` gets no `--d0`.
const DEFAULT_STARTS: [(f64, f64); 4] = [(500.0, 160.0), (400.0, 100.0), (400.0, 125.0), (600.0, 100.0)];

#[derive(Parser)]
#[command(
    name = "pbf-rbdo",
    version,
    about = "Risk-based design optimization of a powder-bed-fusion scan"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory (overrides `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the design of experiments and run the simulators.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Training run count.
        #[arg(long)]
        runs: Option<usize>,
        /// Seed of the design of experiments.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the planted analytic response instead of the simulators.
        #[arg(long)]
        synthetic: bool,
    },
    /// Reduce the simulated outputs and fit the surrogates.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write err-vs-k curves as CSV.
        #[arg(long)]
        plot_data: bool,
    },
    /// Minimize beam energy under the risk and melt-window constraints.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Initial design `v,P`; repeat for several starts.
        #[arg(long = "d0", value_parser = parse_design)]
        d0: Vec<DesignPoint>,
        /// Reliability level of the stress constraint.
        #[arg(long)]
        alpha: Option<f64>,
        /// Failure threshold on the maximum residual stress, MPa.
        #[arg(long)]
        tau: Option<f64>,
        /// Monte Carlo sample count.
        #[arg(long)]
        n_mc: Option<usize>,
        /// Seed of the frozen Monte Carlo samples.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
        /// Also write the iteration history with a header row.
        #[arg(long)]
        plot_data: bool,
    },
    /// Compare simulator and surrogate superquantiles at the optimum.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Compare the simulator against a second simulator batch.
        #[arg(long)]
        self_validation: bool,
        /// Simulator runs at the optimum.
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Risk measures of a sample file (one value per line).
    Risk {
        #[command(flatten)]
        common: Common,
        /// Sample file, one value per line.
        file: PathBuf,
        /// Level of the quantile and superquantile.
        #[arg(long)]
        alpha: Option<f64>,
        /// Failure threshold of the probabilities.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Inspect the trained surrogate bundle.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print feature counts, degrees, fit quality and provenance.
    Info {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SolverArg {
    PenaltyNelderMead,
    CobylaLike,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::PenaltyNelderMead => Solver::PenaltyNelderMead,
            SolverArg::CobylaLike => Solver::CobylaLike,
        }
    }
}

fn parse_design(s: &str) -> std::result::Result<DesignPoint, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [v, p] = parts.as_slice() else {
        return Err(format!("expected `v,P`, got {s:?}"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok(DesignPoint { v: num(v)?, p: num(p)? })
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &common.output {
        cfg.output_dir = dir.clone();
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

/// Validates the final config and sizes the worker pool.
fn ready(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    par::init_workers(cfg.workers);
    Ok(())
}

fn write_plot_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut text = format!("{header}\n");
    for row in rows {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_training(r: &TrainingReport) {
    println!("runs: {}", r.runs);
    for (name, s) in [("temperature", &r.temperature), ("stress", &r.stress)] {
        println!("{name}: K = {}", s.k);
        for (j, f) in s.features.iter().enumerate() {
            println!(
                "  feature {}: active dim {}, degree {}, r2 {:.6}",
                j + 1,
                f.active_dim,
                f.degree,
                f.r2
            );
        }
    }
}

fn print_optimization(r: &OptimizeReport) {
    for (i, run) in r.runs.iter().enumerate() {
        println!(
            "run {}: d0 = ({}, {}) -> d* = ({:.3}, {:.3}), zeta* = {:.3}, E = {:.6} J, \
             bpof lhs = {:.5}, T = {:.2}, feasible = {}",
            i + 1,
            run.d0.v,
            run.d0.p,
            run.d_star.v,
            run.d_star.p,
            run.zeta_star,
            run.energy,
            run.bpof_lhs,
            run.t_max_hat,
            run.feasible
        );
    }
    match r.best_run() {
        Some(b) => println!(
            "best: d* = ({:.3}, {:.3}), E = {:.6} J",
            b.d_star.v, b.d_star.p, b.energy
        ),
        None => println!("best: no feasible design found"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            runs,
            seed,
            synthetic,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = runs {
                cfg.runs = m;
            }
            if let Some(s) = seed {
                cfg.seeds.doe = s;
            }
            cfg.synthetic |= synthetic;
            ready(&cfg)?;
            let data = pipeline::run_simulations(&cfg)?;
            data.save(&cfg.output_dir)?;
            println!("wrote {} runs to {}", data.doe.len(), cfg.output_dir.display());
        }
        Command::Train { common, plot_data } => {
            let cfg = load_config(&common)?;
            ready(&cfg)?;
            let data = TrainingData::load(&cfg.output_dir)?;
            let (bundle, report) = pipeline::train(&data, &cfg)?;
            pipeline::save_training(&cfg, &bundle, &report)?;
            if plot_data {
                for (name, s) in [
                    ("err_curve_T.csv", &report.temperature),
                    ("err_curve_S.csv", &report.stress),
                ] {
                    let rows: Vec<Vec<f64>> = s
                        .err_curve
                        .iter()
                        .enumerate()
                        .map(|(k, e)| vec![(k + 1) as f64, *e])
                        .collect();
                    write_plot_csv(&cfg.path(name), "k,err", &rows)?;
                }
            }
            print_training(&report);
        }
        Command::Optimize {
            common,
            d0,
            alpha,
            tau,
            n_mc,
            seed,
            solver,
            plot_data,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = alpha {
                cfg.optimize.alpha_t = a;
            }
            if let Some(t) = tau {
                cfg.optimize.tau = t;
            }
            if let Some(n) = n_mc {
                cfg.optimize.n_mc = n;
            }
            if let Some(s) = seed {
                cfg.seeds.mc = s;
            }
            if let Some(s) = solver {
                cfg.optimize.solver = s.into();
            }
            ready(&cfg)?;
            let bundle = artifacts::load_bundle(&cfg.path(artifacts::BUNDLE_FILE))?;
            let starts = if d0.is_empty() {
                DEFAULT_STARTS.iter().map(|&(v, p)| DesignPoint { v, p }).collect()
            } else {
                d0
            };
            let report = pipeline::run_optimization(&bundle, &cfg, &starts)?;
            pipeline::save_optimization(&cfg, &report)?;
            if plot_data {
                let rows: Vec<Vec<f64>> = report
                    .runs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, r)| {
                        r.history.iter().map(move |h| {
                            vec![
                                i as f64,
                                h.iteration as f64,
                                h.v,
                                h.p,
                                h.zeta,
                                h.energy,
                                h.bpof_lhs,
                                h.t_max_hat,
                                f64::from(u8::from(h.feasible)),
                            ]
                        })
                    })
                    .collect();
                write_plot_csv(
                    &cfg.path("optimize_plot.csv"),
                    "run,iteration,v,P,zeta,energy,bpof_lhs,t_max_hat,feasible",
                    &rows,
                )?;
            }
            print_optimization(&report);
        }
        Command::Validate {
            common,
            self_validation,
            n_val,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.self_validation |= self_validation;
            if let Some(n) = n_val {
                cfg.n_val = n;
            }
            ready(&cfg)?;
            let bundle = artifacts::load_bundle(&cfg.path(artifacts::BUNDLE_FILE))?;
            let opt = pipeline::load_optimization(&cfg.output_dir)?;
            let best = opt
                .best_run()
                .ok_or_else(|| Error::Infeasible("no feasible optimum to validate".into()))?;
            let r = pipeline::validate(best.d_star, best.zeta_star, &bundle, &cfg)?;
            pipeline::save_validation(&cfg, &r)?;
            println!("d_star: ({}, {})", r.d_star.v, r.d_star.p);
            println!("zeta_star: {}", r.zeta_star);
            println!("q_sim: {}", r.q_sim);
            println!("q_surr: {}", r.q_surr);
            println!("rel_diff: {}", r.rel_diff);
            println!("std_error: {}", r.std_error);
        }
        Command::Risk {
            common,
            file,
            alpha,
            tau,
        } => {
            let cfg = load_config(&common)?;
            let alpha = alpha.unwrap_or(cfg.optimize.alpha_t);
            let tau = tau.unwrap_or(cfg.optimize.tau);
            let samples = SampleSet::new(artifacts::read_samples(&file)?)?;
            let r = assess(&samples, alpha, tau)?;
            println!("quantile: {}", r.quantile);
            println!("superquantile: {}", r.superquantile);
            println!("pof: {}", r.pof);
            println!("bpof: {}", r.bpof);
            println!("zeta: {}", r.zeta);
        }
        Command::Model {
            command: ModelCommand::Info { common },
        } => {
            let cfg = load_config(&common)?;
            let b = artifacts::load_bundle(&cfg.path(artifacts::BUNDLE_FILE))?;
            for (name, m) in [("temperature", &b.temperature), ("stress", &b.stress)] {
                println!("{name}: K = {}", m.k());
                for (j, f) in m.features.iter().enumerate() {
                    println!(
                        "  feature {}: active dim {}, degree {}, r2 {:.6}",
                        j + 1,
                        f.subspace.r,
                        f.surrogate.degree,
                        f.surrogate.r2
                    );
                }
            }
            println!(
                "provenance: {} runs, doe seed {}, config {}",
                b.provenance.runs, b.provenance.seed, b.provenance.config_hash
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
