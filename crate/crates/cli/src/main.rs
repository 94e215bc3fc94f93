//! Command-line front end: configuration in, validated runs out.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mrbsdej_core::chaos;
use mrbsdej_core::config::{validate_problem, BackendChoice, RunConfig};
use mrbsdej_core::jump_model::{MultiEnsemble, PathEnsemble};
use mrbsdej_core::mean_reflected::solve_mean_reflected;
use mrbsdej_core::particle::solve_particles;
use mrbsdej_core::report::{
    write_json_atomic, write_rate_csv, write_solution_csv, ParticleSolveReport, SingleSolveReport,
};
use mrbsdej_core::Error;

#[derive(Parser)]
#[command(
    name = "mrbsdej",
    version,
    about = "Mean-reflected BSDE-with-jumps laboratory: single equation, particle systems, convergence rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports and tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Run solves even when assumption validation fails.
    #[arg(long, global = true)]
    force: bool,

    /// Override the config's backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Exact,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions and report per-check witnesses.
    Validate,
    /// Solve the single mean-reflected equation.
    SolveSingle,
    /// Solve the N-particle system.
    SolveParticles {
        /// Particle count (default: experiment.particles from the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the convergence-rate sweep over particle counts.
    ChaosRate,
    /// Fit increment exponents of K and y over refining grids.
    ProbeRegularity,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("{}", error_json(&format!("thread pool: {e}")));
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(backend) = cli.backend {
        cfg.solver.backend = match backend {
            BackendArg::Exact => BackendChoice::Exact,
            BackendArg::Mc => BackendChoice::MonteCarlo,
        };
    }
    Ok(cfg)
}

/// Validation gate shared by the solve subcommands.
fn gate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), Error> {
    let report = validate_problem(cfg);
    write_json_atomic(&out.join("validation.json"), &report)?;
    if !report.passed && !force {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(Error::ValidationFailed(format!(
            "checks {failed:?} failed; see validation.json or rerun with --force"
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Validate => {
            let report = validate_problem(&cfg);
            write_json_atomic(&out.join("validation.json"), &report)?;
            let failed = report.checks.iter().filter(|c| !c.passed).count();
            println!(
                "validate: {} ({} checks, {} failed)",
                if report.passed { "pass" } else { "FAIL" },
                report.checks.len(),
                failed
            );
            if !report.passed {
                return Err(Error::ValidationFailed(format!("{failed} checks failed")));
            }
            Ok(())
        }
        Command::SolveSingle => {
            gate(&cfg, out, cli.force)?;
            let model = cfg.problem.model.build()?;
            let loss = cfg.problem.loss.build()?;
            let driver = cfg.problem.driver.build();
            let terminal = cfg.problem.terminal.build(&model)?;
            let ens = match cfg.solver.backend {
                BackendChoice::Exact => {
                    PathEnsemble::build_exact_tree(&model, Some(cfg.solver.enumeration_cap))?
                }
                BackendChoice::MonteCarlo => {
                    PathEnsemble::sample_paths(&model, cfg.solver.scenarios, cfg.master_seed)?
                }
            };
            let picard = cfg.solver.picard(&driver, &loss, &model);
            let solution = solve_mean_reflected(
                &ens,
                &driver,
                &terminal,
                &loss,
                &picard,
                cfg.solver.backend(),
                &cfg.solver.root_config(),
            )?;
            let report = SingleSolveReport::new(&solution, &ens);
            write_json_atomic(&out.join("single_report.json"), &report)?;
            if cfg.solver.dump_csv {
                write_solution_csv(&out.join("single_solution.csv"), &solution, &ens)?;
            }
            println!(
                "solve-single: K_T = {:.6}, min margin = {:.3e}, flatness = {:.3e}",
                solution.k.last().copied().unwrap_or(0.0),
                solution.diagnostics.min_constraint_margin,
                solution.diagnostics.flatness_residual
            );
            Ok(())
        }
        Command::SolveParticles { n } => {
            gate(&cfg, out, cli.force)?;
            let model = cfg.problem.model.build()?;
            let loss = cfg.problem.loss.build()?;
            let driver = cfg.problem.driver.build();
            let terminal = cfg.problem.terminal.build(&model)?;
            let n_particles = n.unwrap_or(cfg.experiment.particles);
            let multi = match cfg.solver.backend {
                BackendChoice::Exact => MultiEnsemble::build_joint_exact_tree(
                    &model,
                    n_particles,
                    Some(cfg.solver.enumeration_cap),
                )?,
                BackendChoice::MonteCarlo => MultiEnsemble::sample(
                    &model,
                    n_particles,
                    cfg.solver.scenarios,
                    cfg.master_seed,
                )?,
            };
            let picard = cfg.solver.picard(&driver, &loss, &model);
            let solution = solve_particles(
                &multi,
                &driver,
                &terminal,
                &loss,
                &picard,
                cfg.solver.backend(),
                &cfg.solver.root_config(),
            )?;
            let report = ParticleSolveReport::new(&solution, &multi);
            write_json_atomic(&out.join("particle_report.json"), &report)?;
            println!(
                "solve-particles: N = {}, K max = {:.6}, min margin = {:.3e}, skorokhod = {:.3e}",
                n_particles,
                solution.k.sup_norm(),
                solution.diagnostics.min_constraint_margin,
                solution.diagnostics.skorokhod_residual
            );
            Ok(())
        }
        Command::ChaosRate => {
            gate(&cfg, out, cli.force)?;
            let model = cfg.problem.model.build()?;
            let loss = cfg.problem.loss.build()?;
            let driver = cfg.problem.driver.build();
            let terminal = cfg.problem.terminal.build(&model)?;
            let sweep = cfg.sweep_config();
            let report = chaos::rate_sweep(&model, &loss, &driver, &terminal, &sweep)?;
            write_rate_csv(&out.join("rate_runs.csv"), &report)?;
            write_json_atomic(&out.join("rate_summary.json"), &report)?;
            println!(
                "chaos-rate: slope_Y = {:.3} (+/- {:.3}), slope_U = {:.3}, slope_K = {:.3}, failures = {}",
                report.slope_y.slope,
                report.slope_y.half_width,
                report.slope_u.slope,
                report.slope_k.slope,
                report.failures
            );
            Ok(())
        }
        Command::ProbeRegularity => {
            gate(&cfg, out, cli.force)?;
            let model = cfg.problem.model.build()?;
            let loss = cfg.problem.loss.build()?;
            let driver = cfg.problem.driver.build();
            let terminal_cfg = cfg.problem.terminal.clone();
            let builder = move |m: &mrbsdej_core::JumpModel| terminal_cfg.build(m);
            let probe_cfg = cfg.regularity_config();
            let report = chaos::regularity_probe(&model, &loss, &driver, &builder, &probe_cfg)?;
            write_json_atomic(&out.join("regularity.json"), &report)?;
            println!(
                "probe-regularity: K-increment slope = {:.3}, y-increment slope = {:.3}",
                report.k_increment_slope, report.y_increment_slope
            );
            Ok(())
        }
    }
}
