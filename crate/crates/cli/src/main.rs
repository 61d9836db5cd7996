//! `sdpse` — state estimation for AC power networks, classical and relaxed.
//!
//! The binary is a thin front end: every numerical decision lives in
//! `sdpse-core`. Subcommands either estimate a single sampled instance
//! (`estimate`), batch Monte Carlo studies from a JSON config (`sweep`,
//! `pmu-sweep`, `noise-study`), compare explicit meter placements
//! (`placement-study`), or check a case file (`validate-case`).
//!
//! Output discipline: results go to stdout, notes and diagnostics to
//! stderr, floats always carry six significant digits, and identical
//! argv plus identical input files produce identical bytes.

mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sdpse_core::experiments::{
    run_fraction_sweep, run_noise_study, run_placement_study, run_pmu_sweep, ExperimentConfig,
};
use sdpse_core::measurement::{
    add_noise, add_pmu_angles, generate_true_measurements, sample_placement, Fractions,
    MeasurementSet, MeterKind, SigmaConfig,
};
use sdpse_core::network::{build_admittance, parse_case_file};
use sdpse_core::power_flow::{solve_newton, NewtonOptions};
use sdpse_core::relaxation::assemble;
use sdpse_core::solver::{solve, verify_certificate, SolveStatus, SolverOptions};
use sdpse_core::spectral::{recover_rank1, spectrum, DEFAULT_RANK_TOL};
use sdpse_core::wls::{solve_wls, StateVector, WlsOptions};

use report::{sig, state_table};

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  domain error: unreadable or invalid input files, unobservable meter
     placements, estimator or interior-point non-convergence, a failed
     solution certificate, or an I/O failure; diagnostic on stderr
  2  usage error: unknown subcommand or flag, missing or malformed argument

Flags that mirror an experiment-config field (--trials, --seed, --rank-tol,
--gap-tol, --output) override the value read from --config. Paths inside a
config file are resolved relative to the working directory.";

#[derive(Parser)]
#[command(
    name = "sdpse",
    version,
    about = "WLS and semidefinite-relaxation state estimation for AC power networks",
    after_help = AFTER_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the state of one sampled metering instance
    Estimate(EstimateArgs),
    /// Monte Carlo sweep over meter-retention fractions
    Sweep(SweepArgs),
    /// Monte Carlo sweep over exact-angle (PMU) coverage
    PmuSweep(SweepArgs),
    /// Rank statistics under repeated noise draws at a fixed placement
    NoiseStudy(StudyArgs),
    /// Side-by-side comparison of explicit meter placements
    PlacementStudy(PlacementArgs),
    /// Parse and check a case file, reporting its shape or the defect
    ValidateCase(ValidateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Damped Gauss-Newton weighted least squares only
    Wls,
    /// The semidefinite relaxation only, with rank-1 recovery
    Sdp,
    /// Both, plus a warm-started refinement of the recovered state
    Both,
}

#[derive(Args)]
struct EstimateArgs {
    /// Network case file (JSON or MATPOWER text)
    #[arg(long)]
    case: PathBuf,
    /// Fraction of the generated meters retained, uniform across kinds
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Fraction of magnitude-metered buses that also get exact angle meters
    #[arg(long, default_value_t = 0.0)]
    pmu_fraction: f64,
    /// Scale on the synthesized meter noise; 0 estimates from exact readings
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// Placement seed; noise uses seed+1, angle placement seed+2
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which estimator(s) to run
    #[arg(long, value_enum, default_value = "both")]
    method: Method,
    /// Eigenvalue threshold for the rank count, relative to the largest
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
    /// Relative duality-gap tolerance for the interior-point solve
    #[arg(long, default_value_t = SolverOptions::default().gap_tol)]
    gap_tol: f64,
}

/// Flags shared by the config-driven study commands. Each one overrides the
/// matching field of the `--config` file when given.
#[derive(Args)]
struct StudyArgs {
    /// Experiment config file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Monte Carlo repetitions per grid point (overrides the config)
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed of the per-trial seed derivation (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Rank threshold relative to the leading eigenvalue (overrides the config)
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Relative duality-gap tolerance (overrides the config)
    #[arg(long)]
    gap_tol: Option<f64>,
    /// Trial CSV destination (overrides the config; default: the config path
    /// with a .csv extension)
    #[arg(long)]
    output: Option<PathBuf>,
}

impl StudyArgs {
    /// The config with flag overrides applied, plus the resolved CSV path.
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("experiment config {}", self.config.display()))?;
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(r) = self.rank_tol {
            cfg.rank_tol = r;
        }
        if let Some(g) = self.gap_tol {
            cfg.solver.gap_tol = g;
        }
        if let Some(o) = &self.output {
            cfg.output = Some(o.clone());
        }
        cfg.validate()?;
        let out = cfg
            .output
            .clone()
            .unwrap_or_else(|| self.config.with_extension("csv"));
        Ok((cfg, out))
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Comma-separated grid of sweep points; defaults: 0.4,0.5,0.6,0.7 for
    /// sweep, 0,0.1,0.2,0.3,0.4 for pmu-sweep
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(true))]
struct PlacementArgs {
    /// Experiment config file (JSON) supplying the case and tolerances
    #[arg(long, group = "source")]
    config: Option<PathBuf>,
    /// Network case file; overrides the config's case when both are given
    #[arg(long, group = "source")]
    case: Option<PathBuf>,
    /// Measurement-set JSON files; each row is labeled by its file stem
    #[arg(long, required = true, num_args = 1..)]
    meters: Vec<PathBuf>,
    /// Rank threshold relative to the leading eigenvalue (overrides the config)
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Relative duality-gap tolerance (overrides the config)
    #[arg(long)]
    gap_tol: Option<f64>,
    /// Optional CSV destination for the comparison rows
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Case file to check (JSON or MATPOWER text)
    #[arg(long)]
    case: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(args) => run_estimate(&args),
        Command::Sweep(args) => run_sweep_cmd(&args, false),
        Command::PmuSweep(args) => run_sweep_cmd(&args, true),
        Command::NoiseStudy(args) => run_noise_cmd(&args),
        Command::PlacementStudy(args) => run_placement_cmd(&args),
        Command::ValidateCase(args) => run_validate_cmd(&args),
    }
}

/// Noise drawn at `scale` times the meter sigmas while the recorded weights
/// keep the unscaled values; 0 leaves the exact readings, 1 is plain noise.
fn with_scaled_noise(set: &MeasurementSet, scale: f64, seed: u64) -> Result<MeasurementSet> {
    ensure!(
        scale.is_finite() && scale >= 0.0,
        "--noise-scale must be a finite non-negative number, got {scale}"
    );
    if scale == 0.0 {
        return Ok(set.clone());
    }
    if scale == 1.0 {
        return Ok(add_noise(set, seed));
    }
    let mut widened = set.clone();
    for m in &mut widened.measurements {
        m.sigma *= scale;
    }
    let drawn = add_noise(&widened, seed);
    let mut out = set.clone();
    for (dst, src) in out.measurements.iter_mut().zip(&drawn.measurements) {
        dst.value = src.value;
    }
    out.noise_seed = Some(seed);
    Ok(out)
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    ensure!(
        args.gap_tol.is_finite() && args.gap_tol > 0.0,
        "--gap-tol must be positive, got {}",
        args.gap_tol
    );
    let case = parse_case_file(&args.case)
        .with_context(|| format!("case file {}", args.case.display()))?;
    let adm = build_admittance(&case)?;
    let pf = solve_newton(&case, &adm, NewtonOptions::default())?;
    let full = generate_true_measurements(&case, &adm, &pf, &SigmaConfig::default());
    let sampled = sample_placement(
        &full,
        &case,
        &adm,
        &Fractions::uniform(args.fraction),
        args.seed,
    )?;
    let noisy = with_scaled_noise(&sampled, args.noise_scale, args.seed.wrapping_add(1))?;
    let set = if args.pmu_fraction > 0.0 {
        add_pmu_angles(&noisy, args.pmu_fraction, args.seed.wrapping_add(2))?
    } else {
        noisy
    };

    println!(
        "case {}: {} buses, {} branches, slack bus {}",
        args.case.display(),
        case.n(),
        case.l(),
        case.buses[case.slack_index].id
    );
    let angle_meters = set.positions_of(MeterKind::VAngle).len();
    let mut meters_line = format!(
        "meters: {} of {} retained (fraction {}, seed {})",
        set.m() - angle_meters,
        full.m(),
        sig(args.fraction),
        args.seed
    );
    if angle_meters > 0 {
        meters_line.push_str(&format!(", plus {angle_meters} exact angle meters"));
    }
    println!("{meters_line}");

    let wls = match args.method {
        Method::Wls | Method::Both => {
            let r = solve_wls(&set, &case, &adm, &WlsOptions::default())?;
            if !r.converged {
                bail!(
                    "wls did not converge within {} iterations (gradient norm {})",
                    r.iterations,
                    sig(r.gradient_norm)
                );
            }
            println!(
                "wls: objective {} in {} iterations",
                sig(r.objective),
                r.iterations
            );
            Some(r)
        }
        Method::Sdp => None,
    };

    if args.method == Method::Wls {
        let r = wls.as_ref().expect("wls ran");
        println!("state (wls estimate):");
        print!("{}", state_table(&case, &r.state.voltages()));
        return Ok(());
    }

    let problem = assemble(&set, &case, &adm)?;
    let opts = SolverOptions {
        gap_tol: args.gap_tol,
        ..SolverOptions::default()
    };
    let sol = solve(&problem, &opts);
    if sol.status != SolveStatus::Optimal {
        bail!(
            "interior-point solve stopped at {:?} after {} iterations (relative gap {})",
            sol.status,
            sol.iterations,
            sig(sol.residuals.relative_gap)
        );
    }
    let cert = verify_certificate(&problem, &sol, &opts);
    println!(
        "sdp: objective {} in {} iterations, certificate {}",
        sig(sol.objective),
        sol.iterations,
        if cert.passed { "ok" } else { "FAILED" }
    );
    let spec = spectrum(&sol.w, args.rank_tol)?;
    println!(
        "spectrum: rank {} at tol {}, trailing ratio {}",
        spec.numerical_rank,
        sig(args.rank_tol),
        sig(spec.trailing_ratio)
    );
    if !cert.passed {
        bail!("solution certificate failed: {}", cert.failures.join("; "));
    }

    let recovered = recover_rank1(&sol.w, case.slack_index)?;
    match &wls {
        Some(flat) => {
            let scored = problem.objective_of_state(&flat.state.voltages());
            println!(
                "wls state in relaxation units: {} (bound slack {})",
                sig(scored),
                sig(scored - sol.objective)
            );
            let refined = solve_wls(
                &set,
                &case,
                &adm,
                &WlsOptions {
                    init: Some(StateVector::from_voltages(&recovered.v)),
                    ..WlsOptions::default()
                },
            )?;
            println!(
                "state (rank-1 recovery refined by warm-started wls, objective {}):",
                sig(refined.objective)
            );
            print!("{}", state_table(&case, &refined.state.voltages()));
        }
        None => {
            println!(
                "state (rank-1 recovery, relative residual {}):",
                sig(recovered.residual_norm)
            );
            print!("{}", state_table(&case, &recovered.v));
        }
    }
    Ok(())
}

fn run_sweep_cmd(args: &SweepArgs, pmu: bool) -> Result<()> {
    let (cfg, out) = args.study.load()?;
    let grid = match &args.grid {
        Some(g) => g.clone(),
        None if pmu => vec![0.0, 0.1, 0.2, 0.3, 0.4],
        None => vec![0.4, 0.5, 0.6, 0.7],
    };
    let result = if pmu {
        run_pmu_sweep(&cfg, &grid)?
    } else {
        run_fraction_sweep(&cfg, &grid)?
    };
    std::fs::write(&out, result.trials_csv())
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {}", out.display());
    print!("{}", result.summary_csv());
    Ok(())
}

fn run_noise_cmd(args: &StudyArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let study = run_noise_study(&cfg)?;
    std::fs::write(&out, study.sweep.trials_csv())
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {}", out.display());
    print!("{}", study.histogram_csv());
    println!();
    print!("{}", study.sweep.summary_csv());
    Ok(())
}

fn run_placement_cmd(args: &PlacementArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("experiment config {}", path.display()))?,
        None => {
            let case = args.case.clone().expect("clap guarantees a source");
            ExperimentConfig::new(case)
        }
    };
    if let Some(case) = &args.case {
        cfg.case = case.clone();
    }
    if let Some(r) = args.rank_tol {
        cfg.rank_tol = r;
    }
    if let Some(g) = args.gap_tol {
        cfg.solver.gap_tol = g;
    }
    cfg.validate()?;

    let mut placements = Vec::new();
    for path in &args.meters {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("meter file {}", path.display()))?;
        let set: MeasurementSet = serde_json::from_str(&text)
            .with_context(|| format!("meter file {}", path.display()))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        placements.push((label, set));
    }

    let study = run_placement_study(&cfg, &placements)?;
    print!("{}", study.table());
    if let Some(out) = args.output.clone().or_else(|| cfg.output.clone()) {
        std::fs::write(&out, study.csv())
            .with_context(|| format!("writing {}", out.display()))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn run_validate_cmd(args: &ValidateArgs) -> Result<()> {
    let case = parse_case_file(&args.case)
        .with_context(|| format!("case file {}", args.case.display()))?;
    build_admittance(&case).with_context(|| format!("case file {}", args.case.display()))?;
    println!(
        "ok: {} buses, {} branches, slack bus {}",
        case.n(),
        case.l(),
        case.buses[case.slack_index].id
    );
    Ok(())
}
