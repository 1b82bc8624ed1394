//! Command-line driver: runs an experiment from a TOML configuration and
//! writes a JSON summary plus delimited-text field snapshots.
//!
//! Exit status: 0 when every check passes, 2 on a failed numerical check
//! or solver failure, 3 on a configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::coefficients::measure_bounds;
use crate::config::{
    DiffusionConfig, DriftConfig, ExperimentConfig, InitialConfig, NoiseConfig, NoisePreset,
    PotentialConfig,
};
use crate::error::{Error, Result};
use crate::field::{gaussian_pdf, l1_distance_values, test_dictionary, DensityField, Field};
use crate::mild::{weak_residual, MildSolver};
use crate::particles::{chaos_gap, log_log_slope, simulate, Record};
use crate::sensitivity::{
    build_propagator, fd_first_variation_errors, first_variation_bound, propagate_first_variation,
    solve_second_variation, symmetry_residual, taylor_remainders,
};
use crate::spde::{expectation_stability, sample_path, solve_path_multi, PathSolution, PathSolver};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mvlasov",
    version,
    about = "McKean-Vlasov equations with common noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Mild solver and weak residual.
    Solve(Flags),
    /// First and second variations with finite-difference checks.
    Sensitivity(Flags),
    /// Pathwise solves along sampled noise paths.
    Spde(Flags),
    /// Particle ensembles against the SPDE solution.
    Particles(Flags),
    /// Every check applicable to the configuration.
    Validate(Flags),
}

impl Command {
    pub fn flags(&self) -> &Flags {
        match self {
            Command::Solve(f)
            | Command::Sensitivity(f)
            | Command::Spde(f)
            | Command::Particles(f)
            | Command::Validate(f) => f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Sensitivity(_) => "sensitivity",
            Command::Spde(_) => "spde",
            Command::Particles(_) => "particles",
            Command::Validate(_) => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct Flags {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Iterate the measure argument of the dressed drift within each step.
    #[arg(long)]
    pub strict: bool,
}

/// One named check with its measured value and threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Default)]
struct Report {
    checks: Vec<Check>,
    data: serde_json::Map<String, Value>,
    warnings: Vec<String>,
}

impl Report {
    fn at_most(&mut self, name: &str, value: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        });
    }

    fn at_least(&mut self, name: &str, value: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        });
    }

    fn put(&mut self, key: &str, value: impl Serialize) {
        self.data.insert(
            key.into(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
    }

    fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Result of one command: the summary document and the overall verdict.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub pass: bool,
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_CONFIG,
            };
        }
    };
    let flags = cli.command.flags().clone();
    let work = || run(&cli.command);
    let result = match flags.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(work),
            Err(e) => Err(Error::Config(e.to_string())),
        },
        None => work(),
    };
    match result {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.summary).unwrap_or_default()
            );
            if outcome.pass {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            let kind = if matches!(e, Error::Config(_)) {
                "config"
            } else {
                "numerical"
            };
            let record = json!({
                "command": cli.command.name(),
                "pass": false,
                "error": { "kind": kind, "message": e.to_string() },
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&record).unwrap_or_default()
            );
            if let Ok(cfg) = ExperimentConfig::load(&flags.config) {
                let _ = write_summary(&output_dir(&flags, &cfg), &record);
            }
            if kind == "config" {
                EXIT_CONFIG
            } else {
                EXIT_CHECK_FAILED
            }
        }
    }
}

fn output_dir(flags: &Flags, cfg: &ExperimentConfig) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("mvlasov-out"))
}

fn write_summary(dir: &Path, summary: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text =
        serde_json::to_string_pretty(summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(())
}

/// Runs a command and writes its artifacts to the output directory.
pub fn run(command: &Command) -> Result<Outcome> {
    let flags = command.flags();
    let mut cfg = ExperimentConfig::load(&flags.config)?;
    if let Some(seed) = flags.seed {
        cfg.run.seed = seed;
    }
    if flags.strict {
        cfg.run.strict = true;
    }
    let dir = output_dir(flags, &cfg);
    fs::create_dir_all(&dir)?;
    let mut report = Report::default();
    match command {
        Command::Solve(_) => solve(&cfg, &dir, &mut report)?,
        Command::Sensitivity(_) => sensitivity(&cfg, &mut report)?,
        Command::Spde(_) => spde(&cfg, &dir, &mut report)?,
        Command::Particles(_) => particles(&cfg, &mut report)?,
        Command::Validate(_) => {
            solve(&cfg, &dir, &mut report)?;
            if !cfg.run.probes.is_empty() {
                sensitivity(&cfg, &mut report)?;
            }
            if cfg.has_noise() {
                spde(&cfg, &dir, &mut report)?;
            }
            if !cfg.run.particles.is_empty() {
                particles(&cfg, &mut report)?;
            }
        }
    }
    let pass = report.pass();
    let summary = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.run.seed,
        "config": cfg,
        "results": Value::Object(report.data),
        "checks": report.checks,
        "warnings": report.warnings,
        "pass": pass,
    });
    write_summary(&dir, &summary)?;
    Ok(Outcome { summary, pass })
}

fn write_fields(path: &Path, fields: &[&DensityField]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "t,x,value")?;
    for f in fields {
        for (i, v) in f.values().iter().enumerate() {
            writeln!(out, "{},{},{}", f.time(), f.grid().x(i), v)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn snapshot_indices(cfg: &ExperimentConfig) -> Vec<usize> {
    if cfg.run.snapshots.is_empty() {
        vec![0, cfg.time.steps]
    } else {
        cfg.run.snapshots.clone()
    }
}

fn solve(cfg: &ExperimentConfig, dir: &Path, report: &mut Report) -> Result<()> {
    let grid = cfg.grid()?;
    let time = cfg.time_grid()?;
    let coeffs = cfg.coefficients()?;
    let y = cfg.initial()?;
    let solver = MildSolver::new(grid, time, coeffs.clone())?;
    let phi = solver.solve(&y, cfg.run.tolerance)?;
    let masses = phi.masses();
    let min_value = phi
        .fields()
        .iter()
        .map(|f| f.min_value())
        .fold(f64::INFINITY, f64::min);
    let weak = weak_residual(&phi, &coeffs, &test_dictionary(&grid))?;
    report.put("iterations", phi.iterations());
    report.put("picard_residuals", phi.residuals());
    report.put("masses", &masses);
    report.put("min_value", min_value);
    report.put("weak_residual", weak);
    report.at_least("solve.min_value", min_value, -1e-12);
    let growth = masses
        .iter()
        .map(|m| m - y.mass())
        .fold(f64::NEG_INFINITY, f64::max);
    report.at_most("solve.norm_bound", growth, 1e-6);
    if coeffs.potential.is_zero() {
        let dev = masses
            .iter()
            .map(|m| (m - y.mass()).abs())
            .fold(0.0, f64::max);
        report.put("mass_deviation", dev);
        report.at_most("solve.mass_deviation", dev, 1e-6);
    }
    if let Some((mean, var, mass)) = cfg.heat_closed_form() {
        let exact: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|x| mass * gaussian_pdf(x - mean, var))
            .collect();
        let err = l1_distance_values(&grid, phi.terminal().values(), &exact);
        report.put("l1_error_vs_closed_form", err);
        report.at_most("solve.l1_error_vs_closed_form", err, 1e-4);
    }
    let fields: Vec<&DensityField> = snapshot_indices(cfg).iter().map(|k| phi.at(*k)).collect();
    write_fields(&dir.join("solve_fields.csv"), &fields)
}

fn sensitivity(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    if cfg.run.probes.is_empty() {
        return Err(Error::Config("sensitivity needs run.probes".into()));
    }
    let grid = cfg.grid()?;
    let time = cfg.time_grid()?;
    let coeffs = cfg.coefficients()?;
    let y = cfg.initial()?;
    let tol = cfg.run.tolerance.min(1e-12);
    let solver = MildSolver::new(grid, time, coeffs.clone())?;
    let phi = solver.solve(&y, tol)?;
    let prop = build_propagator(&solver, &phi)?;
    let xi = propagate_first_variation(&prop, &cfg.run.probes)?;
    let norms: Vec<Vec<f64>> = (0..xi.probes().len()).map(|p| xi.l1_norms(p)).collect();
    report.put("probes", xi.probes());
    report.put("xi_l1_norms", &norms);
    let fd = fd_first_variation_errors(&solver, &y, &phi, &xi, 0, &[1e-2, 1e-3], tol)?;
    report.put("fd_errors", &fd);
    report.at_most("sensitivity.fd_ratio", fd[1] / fd[0], 0.15);
    report.at_most("sensitivity.fd_error", fd[1], 5e-2);
    let bounds = measure_bounds(0.0, &coeffs.drift, &coeffs.potential, phi.fields())?;
    let bound = first_variation_bound(&xi, &bounds)?;
    report.put("first_variation_bound", bound);
    report.put("coefficient_bounds", bounds);
    if !cfg.run.pairs.is_empty() {
        let sym = symmetry_residual(&prop, &xi, &cfg.run.pairs)?;
        report.put("eta_symmetry", sym);
        report.at_most("sensitivity.eta_symmetry", sym, 1e-6);
        if coeffs.is_measure_independent() {
            let eta = solve_second_variation(&prop, &xi, &cfg.run.pairs)?;
            let worst = (0..cfg.run.pairs.len())
                .flat_map(|p| {
                    eta.path(p)
                        .iter()
                        .map(|f| f.values().iter().fold(0.0f64, |m, v| m.max(v.abs())))
                })
                .fold(0.0, f64::max);
            report.put("eta_sup", worst);
            report.at_most("sensitivity.eta_vanishes", worst, 1e-10);
        } else if coeffs.has_second_derivatives() {
            let eps = [10f64.powf(-1.5), 1e-2];
            let rem =
                taylor_remainders(&solver, &prop, &y, &phi, &xi, cfg.run.pairs[0], &eps, tol)?;
            report.put("taylor_remainders", &rem);
            report.at_most("sensitivity.taylor_ratio", rem[1] / rem[0], 0.2);
        }
    }
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Noise {
    Field(PathSolver),
    Matrix(Vec<f64>),
}

fn path_solution(
    cfg: &ExperimentConfig,
    noise: &Noise,
    y: &DensityField,
    seed: u64,
) -> Result<PathSolution> {
    let time = cfg.time_grid()?;
    match noise {
        Noise::Field(solver) => solver.solve(y, &sample_path(seed, time, 1)?),
        Noise::Matrix(sigma) => {
            let path = sample_path(seed, time, sigma.len())?;
            solve_path_multi(
                cfg.grid()?,
                time,
                cfg.coefficients()?,
                sigma,
                y,
                &path,
                cfg.path_options(),
            )
        }
    }
}

fn noise_model(cfg: &ExperimentConfig) -> Result<Noise> {
    match (cfg.flow()?, cfg.noise_matrix()) {
        (_, Some(sigma)) => Ok(Noise::Matrix(sigma.to_vec())),
        (Some(flow), None) => Ok(Noise::Field(
            PathSolver::new(cfg.grid()?, cfg.time_grid()?, cfg.coefficients()?, flow)?
                .with_options(cfg.path_options())?,
        )),
        (None, None) => unreachable!("flow() is None only for matrix noise"),
    }
}

// Mean shift per unit of the path, for noise with a translation flow.
fn translation_rate(cfg: &ExperimentConfig) -> Option<Vec<f64>> {
    match &cfg.noise {
        NoiseConfig::None => Some(vec![0.0]),
        NoiseConfig::State1d {
            preset: NoisePreset::Constant,
            amplitude,
            ..
        } => Some(vec![*amplitude]),
        NoiseConfig::ConstantMatrix { values } => Some(values.clone()),
        _ => None,
    }
}

// Conditional Gaussian law `(mean, variance)` at time t given the shift, when
// one is available in closed form.
fn conditional_gaussian(cfg: &ExperimentConfig, t: f64, shift: f64) -> Option<(f64, f64, f64)> {
    let c = &cfg.coefficients;
    let (a, mean, var0, mass) = match (&c.diffusion, &c.potential, &cfg.initial) {
        (
            DiffusionConfig::Constant { value },
            PotentialConfig::None,
            InitialConfig::Gaussian { mean, std, mass },
        ) => (*value, *mean, std * std, *mass),
        _ => return None,
    };
    let var = match c.drift {
        DriftConfig::None => var0 + a * t,
        DriftConfig::MeanReversion { rate } => {
            let eq = a / (2.0 * rate);
            eq + (var0 - eq) * (-2.0 * rate * t).exp()
        }
        _ => return None,
    };
    Some((mean + shift, var, mass))
}

fn spde(cfg: &ExperimentConfig, dir: &Path, report: &mut Report) -> Result<()> {
    let grid = cfg.grid()?;
    let time = cfg.time_grid()?;
    let y = cfg.initial()?;
    let noise = noise_model(cfg)?;
    if let Noise::Field(s) = &noise {
        report.warnings.extend(s.warnings().iter().cloned());
    }
    let seeds: Vec<u64> = (0..cfg.run.n_paths.max(1) as u64)
        .map(|p| cfg.run.seed.wrapping_add(p))
        .collect();
    let rate = translation_rate(cfg);
    let snapshots = snapshot_indices(cfg);
    let per_path = seeds
        .par_iter()
        .map(|seed| {
            let sol = path_solution(cfg, &noise, &y, *seed)?;
            let mass_dev = sol
                .masses()
                .iter()
                .map(|m| (m - y.mass()).abs())
                .fold(0.0, f64::max);
            let mut oracle = None;
            if let Some(rate) = &rate {
                let shifts = sol
                    .path()
                    .combined(&rate[..sol.path().dims()])
                    .unwrap_or_default();
                let mut worst: f64 = 0.0;
                for k in 0..time.nodes() {
                    let Some((m, v, mass)) =
                        conditional_gaussian(cfg, time.t(k), shifts.get(k).copied().unwrap_or(0.0))
                    else {
                        break;
                    };
                    let exact: Vec<f64> = grid
                        .nodes()
                        .iter()
                        .map(|x| mass * gaussian_pdf(x - m, v))
                        .collect();
                    worst = worst.max(l1_distance_values(&grid, sol.at(k).values(), &exact));
                    oracle = Some(worst);
                }
            }
            if cfg.run.dump_paths {
                let mut f = std::io::BufWriter::new(fs::File::create(
                    dir.join(format!("path_{seed}.csv")),
                )?);
                sol.write_dump(&mut f, &snapshots)?;
                f.flush()?;
            }
            Ok((mass_dev, oracle))
        })
        .collect::<Result<Vec<_>>>()?;
    let mass_dev = per_path.iter().map(|p| p.0).fold(0.0, f64::max);
    report.put("path_seeds", &seeds);
    report.put("path_mass_deviation", mass_dev);
    report.at_most("spde.mass_deviation", mass_dev, 1e-5);
    let oracle: Vec<f64> = per_path.iter().filter_map(|p| p.1).collect();
    if oracle.len() == per_path.len() {
        let worst = oracle.iter().copied().fold(0.0, f64::max);
        report.put("path_l1_error_vs_closed_form", &oracle);
        // Pure transport of heat is exact up to discretization; the
        // mean-reverting case also carries the lagged moment.
        let tol = if matches!(cfg.coefficients.drift, DriftConfig::None) {
            1e-3
        } else {
            1e-2
        };
        report.at_most("spde.l1_error_vs_closed_form", worst, tol);
    }
    if let (Some(y2), Noise::Field(solver)) = (cfg.comparison()?, &noise) {
        if cfg.run.n_paths >= 10 {
            let es = expectation_stability(solver, &y, &y2, cfg.run.n_paths, cfg.run.seed)?;
            report.put("expectation_stability", es);
        }
    }
    Ok(())
}

fn particles(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let ns = cfg.run.particles.clone();
    if ns.is_empty() {
        return Err(Error::Config("particles needs run.particles".into()));
    }
    let Noise::Field(solver) = noise_model(cfg)? else {
        return Err(Error::Config(
            "particle runs take a scalar noise field".into(),
        ));
    };
    let time = cfg.time_grid()?;
    let coeffs = cfg.coefficients()?;
    let y = cfg.initial()?;
    let last = time.steps();
    let seeds: Vec<u64> = (0..cfg.run.n_paths.max(1) as u64)
        .map(|p| cfg.run.seed.wrapping_add(p))
        .collect();
    let mut gaps = vec![0.0; ns.len()];
    let mut reflections = 0usize;
    for seed in &seeds {
        let path = sample_path(*seed, time, 1)?;
        let sol = solver.solve(&y, &path)?;
        for (j, n) in ns.iter().enumerate() {
            let e = simulate(
                *n,
                &y,
                Some(&coeffs.diffusion),
                &coeffs.drift,
                solver.flow().noise(),
                &path,
                seed.wrapping_add(1 << 32),
                Record::Nodes(vec![last]),
            )?;
            reflections += e.reflections();
            report.warnings.extend(e.warnings().iter().cloned());
            gaps[j] += chaos_gap(&sol, &e, &[last])?[0] / seeds.len() as f64;
        }
    }
    report.put("particle_counts", &ns);
    report.put("chaos_gaps", &gaps);
    report.put("particle_seeds", &seeds);
    report.put("reflections", reflections);
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    report.at_least(
        "particles.gap_decreasing",
        if decreasing { 1.0 } else { 0.0 },
        1.0,
    );
    if ns.len() >= 2 {
        let slope = log_log_slope(&ns, &gaps);
        report.put("log_log_slope", slope);
        report.at_most("particles.slope_upper", slope, -0.2);
        report.at_least("particles.slope_lower", slope, -0.6);
    }
    Ok(())
}

/// Convenience for tests and examples: runs one command on a config file.
pub fn run_config(command: &str, config: &Path, out: &Path) -> Result<Outcome> {
    let flags = Flags {
        config: config.to_path_buf(),
        out: Some(out.to_path_buf()),
        seed: None,
        workers: None,
        strict: false,
    };
    let cmd = match command {
        "solve" => Command::Solve(flags),
        "sensitivity" => Command::Sensitivity(flags),
        "spde" => Command::Spde(flags),
        "particles" => Command::Particles(flags),
        "validate" => Command::Validate(flags),
        other => return Err(Error::Config(format!("unknown command {other}"))),
    };
    run(&cmd)
}
