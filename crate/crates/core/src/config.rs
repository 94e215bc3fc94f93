//! Run configuration: problem data, solver controls, experiment grids, and
//! the assumption validator that gates the solve pipelines.

use serde::{Deserialize, Serialize};

use crate::bsdej::{Backend, DriverSpec, MarkVector, RegressionConfig, TerminalSpec};
use crate::chaos::{RegularityConfig, SweepConfig};
use crate::error::Result;
use crate::jump_model::{JumpModel, PathEnsemble, DEFAULT_ENUMERATION_CAP};
use crate::loss::{LossSpec, LossTable, RootConfig};
use crate::mean_reflected::{self, PicardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
}

fn default_master_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub driver: DriverConfig,
    pub terminal: TerminalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
}

impl ModelConfig {
    pub fn build(&self) -> Result<JumpModel> {
        JumpModel::new(
            self.marks.clone(),
            self.intensities.clone(),
            self.horizon,
            self.steps,
        )
    }
}

/// Loss families exposed to configs; custom table losses load from CSV with
/// their constants declared alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossConfig {
    Linear {
        slope: f64,
        offset0: f64,
        offset_t: f64,
    },
    AffineThreshold {
        up: f64,
        down: f64,
        threshold0: f64,
        threshold_t: f64,
    },
    Table {
        path: String,
        kappa_lower: f64,
        kappa_upper: f64,
        time_lipschitz: f64,
        growth: f64,
    },
}

impl LossConfig {
    pub fn build(&self) -> Result<LossSpec> {
        match self {
            LossConfig::Linear {
                slope,
                offset0,
                offset_t,
            } => LossSpec::linear(*slope, *offset0, *offset_t),
            LossConfig::AffineThreshold {
                up,
                down,
                threshold0,
                threshold_t,
            } => LossSpec::affine_threshold(*up, *down, *threshold0, *threshold_t),
            LossConfig::Table {
                path,
                kappa_lower,
                kappa_upper,
                time_lipschitz,
                growth,
            } => {
                let file = std::fs::File::open(path)?;
                let table = LossTable::from_csv(file)?;
                LossSpec::new(
                    crate::loss::LossFamily::Table(table),
                    *kappa_lower,
                    *kappa_upper,
                    *time_lipschitz,
                    *growth,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    Constant { value: f64 },
    LinearY { base: f64, y_coef: f64 },
    LinearYu { base: f64, y_coef: f64, u_coef: f64 },
}

impl DriverConfig {
    pub fn build(&self) -> DriverSpec {
        match self {
            DriverConfig::Zero => DriverSpec::zero(),
            DriverConfig::Constant { value } => DriverSpec::constant(*value),
            DriverConfig::LinearY { base, y_coef } => DriverSpec::linear_y(*base, *y_coef),
            DriverConfig::LinearYu {
                base,
                y_coef,
                u_coef,
            } => DriverSpec::linear_yu(*base, *y_coef, *u_coef),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant { value: f64 },
    CountLinear { weights: Vec<f64>, offset: f64 },
    CountCentered { weights: Vec<f64> },
}

impl TerminalConfig {
    pub fn build(&self, model: &JumpModel) -> Result<TerminalSpec> {
        match self {
            TerminalConfig::Constant { value } => Ok(TerminalSpec::constant(*value)),
            TerminalConfig::CountLinear { weights, offset } => {
                TerminalSpec::count_linear(model, weights.clone(), *offset)
            }
            TerminalConfig::CountCentered { weights } => {
                TerminalSpec::count_centered(model, weights.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub backend: BackendChoice,
    /// Monte Carlo scenario count for single/particle solves.
    pub scenarios: usize,
    pub enumeration_cap: usize,
    pub tol_bisect: f64,
    pub search_bound: f64,
    pub tol_constraint: f64,
    pub tol_flat: f64,
    pub picard_max_iters: usize,
    pub tol_fixed_point: f64,
    pub regression_degree: usize,
    /// Dump full Y/U tables next to the reports (size-guarded).
    pub dump_csv: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Exact,
            scenarios: 4000,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            tol_bisect: 1e-10,
            search_bound: 1e6,
            tol_constraint: 1e-8,
            tol_flat: 1e-8,
            picard_max_iters: 100,
            tol_fixed_point: 1e-10,
            regression_degree: 2,
            dump_csv: false,
        }
    }
}

impl SolverConfig {
    pub fn root_config(&self) -> RootConfig {
        RootConfig {
            tol: self.tol_bisect,
            bound: self.search_bound,
        }
    }

    pub fn regression(&self) -> RegressionConfig {
        RegressionConfig {
            degree: self.regression_degree,
        }
    }

    pub fn backend(&self) -> Backend {
        match self.backend {
            BackendChoice::Exact => Backend::Exact,
            BackendChoice::MonteCarlo => Backend::Regression(self.regression()),
        }
    }

    pub fn picard(&self, driver: &DriverSpec, loss: &LossSpec, model: &JumpModel) -> PicardConfig {
        let mut cfg =
            mean_reflected::compute_picard_window(driver, loss, model.horizon(), model.steps());
        cfg.max_iters = self.picard_max_iters;
        cfg.tol_fixed_point = self.tol_fixed_point;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Particle counts of the rate sweep (>= 4 distinct values).
    pub n_values: Vec<usize>,
    pub seeds: usize,
    /// Scenario count per sweep run.
    pub scenarios: usize,
    pub ref_scenario_factor: usize,
    /// Particle count of a standalone solve-particles run.
    pub particles: usize,
    /// Grid refinements of the regularity probe.
    pub grid_multipliers: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_values: vec![8, 16, 32, 64, 128, 256],
            seeds: 10,
            scenarios: 4000,
            ref_scenario_factor: 10,
            particles: 8,
            grid_multipliers: vec![1, 2, 4, 8],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            n_values: self.experiment.n_values.clone(),
            seeds: self.experiment.seeds,
            scenarios: self.experiment.scenarios,
            ref_scenario_factor: self.experiment.ref_scenario_factor,
            master_seed: self.master_seed,
            enumeration_cap: self.solver.enumeration_cap,
            regression: self.solver.regression(),
            root: self.solver.root_config(),
        }
    }

    pub fn regularity_config(&self) -> RegularityConfig {
        RegularityConfig {
            grid_multipliers: self.experiment.grid_multipliers.clone(),
            scenarios: self.experiment.scenarios,
            master_seed: self.master_seed,
            enumeration_cap: self.solver.enumeration_cap,
            regression: self.solver.regression(),
            root: self.solver.root_config(),
        }
    }
}

/// One validated assumption with its worst-case witness.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl ValidationReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.passed &= passed;
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Check the standing assumptions on a deterministic probe grid plus a pilot
/// ensemble for terminal feasibility. Failures carry the worst witness found.
pub fn validate_problem(cfg: &RunConfig) -> ValidationReport {
    let mut report = ValidationReport {
        checks: Vec::new(),
        passed: true,
    };
    let model = match cfg.problem.model.build() {
        Ok(m) => {
            report.push("model", true, format!("dt = {}, sum nu dt = {:.6}", m.dt(), 1.0 - m.no_jump_prob()));
            m
        }
        Err(e) => {
            report.push("model", false, e.to_string());
            return report;
        }
    };
    let loss = match cfg.problem.loss.build() {
        Ok(l) => l,
        Err(e) => {
            report.push("loss-constants", false, e.to_string());
            return report;
        }
    };
    let driver = cfg.problem.driver.build();
    let terminal = match cfg.problem.terminal.build(&model) {
        Ok(t) => t,
        Err(e) => {
            report.push("terminal", false, e.to_string());
            return report;
        }
    };
    validate_specs(&model, &loss, &driver, &terminal, cfg, &mut report);
    report
}

fn validate_specs(
    model: &JumpModel,
    loss: &LossSpec,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    cfg: &RunConfig,
    report: &mut ValidationReport,
) {
    let horizon = model.horizon();
    let probe_radius = (2.0 * (terminal.bound_m + driver.bound_l)).max(2.0);
    let t_grid: Vec<f64> = (0..=8).map(|i| horizon * i as f64 / 8.0).collect();
    let y_grid: Vec<f64> = (0..=40)
        .map(|i| -probe_radius + 2.0 * probe_radius * i as f64 / 40.0)
        .collect();

    // bi-Lipschitz and strict monotonicity in y
    {
        let mut worst_low = f64::INFINITY;
        let mut worst_high: f64 = 0.0;
        let mut witness = String::new();
        for &t in &t_grid {
            for w in y_grid.windows(2) {
                let dy = w[1] - w[0];
                let dl = loss.evaluate(t, w[1]) - loss.evaluate(t, w[0]);
                let ratio = dl / dy;
                if ratio < worst_low {
                    worst_low = ratio;
                    witness = format!("t = {t}, y in [{}, {}]: slope {ratio:.6}", w[0], w[1]);
                }
                worst_high = worst_high.max(ratio);
            }
        }
        let ok = worst_low >= loss.kappa_lower - 1e-12 && worst_high <= loss.kappa_upper + 1e-12;
        report.push(
            "loss-bi-lipschitz",
            ok,
            format!(
                "sampled slopes in [{worst_low:.6}, {worst_high:.6}] vs declared [{}, {}]; worst at {witness}",
                loss.kappa_lower, loss.kappa_upper
            ),
        );
    }

    // time Lipschitz
    {
        let mut worst = 0.0_f64;
        let mut witness = String::new();
        for &y in &y_grid {
            for w in t_grid.windows(2) {
                let rate =
                    (loss.evaluate(w[1], y) - loss.evaluate(w[0], y)).abs() / (w[1] - w[0]);
                if rate > worst {
                    worst = rate;
                    witness = format!("y = {y}, t in [{}, {}]", w[0], w[1]);
                }
            }
        }
        let ok = worst <= loss.time_lipschitz + 1e-12;
        report.push(
            "loss-time-lipschitz",
            ok,
            format!(
                "sampled rate {worst:.6} vs declared {}; worst at {witness}",
                loss.time_lipschitz
            ),
        );
    }

    // linear growth
    {
        let mut worst = 0.0_f64;
        let mut witness = String::new();
        for &t in &t_grid {
            for &y in &y_grid {
                let ratio = loss.evaluate(t, y).abs() / (1.0 + y.abs());
                if ratio > worst {
                    worst = ratio;
                    witness = format!("t = {t}, y = {y}");
                }
            }
        }
        let ok = worst <= loss.growth + 1e-12;
        report.push(
            "loss-growth",
            ok,
            format!("sampled |l|/(1+|y|) = {worst:.6} vs declared {}; worst at {witness}", loss.growth),
        );
    }

    // driver bound and Lipschitz certificate
    {
        let m = model.num_marks();
        let zero = vec![0.0; m];
        let mut worst_bound = 0.0_f64;
        for &t in &t_grid {
            let marks = MarkVector {
                values: &zero,
                intensities: model.intensities(),
            };
            worst_bound = worst_bound.max(driver.evaluate(t, 0.0, &marks).abs());
        }
        report.push(
            "driver-bound",
            worst_bound <= driver.bound_l + 1e-12,
            format!("sampled |f(t,0,0)| = {worst_bound:.6} vs declared {}", driver.bound_l),
        );

        let mut u_probes: Vec<Vec<f64>> = vec![zero.clone()];
        for j in 0..m {
            let mut up = zero.clone();
            up[j] = 1.0;
            u_probes.push(up.clone());
            up[j] = -0.7;
            u_probes.push(up);
        }
        let y_probes = [-1.5, -0.3, 0.0, 0.4, 1.1];
        let mut worst_excess = f64::NEG_INFINITY;
        let mut witness = String::new();
        for &t in &t_grid {
            for (a, ya) in y_probes.iter().enumerate() {
                for (b, yb) in y_probes.iter().enumerate() {
                    for (ia, ua) in u_probes.iter().enumerate() {
                        for (ib, ub) in u_probes.iter().enumerate() {
                            if a == b && ia == ib {
                                continue;
                            }
                            let ma = MarkVector {
                                values: ua,
                                intensities: model.intensities(),
                            };
                            let mb = MarkVector {
                                values: ub,
                                intensities: model.intensities(),
                            };
                            let df = (driver.evaluate(t, *ya, &ma)
                                - driver.evaluate(t, *yb, &mb))
                            .abs();
                            let du: f64 = ua
                                .iter()
                                .zip(ub)
                                .zip(model.intensities())
                                .map(|((x, y), nu)| (x - y) * (x - y) * nu)
                                .sum::<f64>()
                                .sqrt();
                            let allowance = driver.lambda * ((ya - yb).abs() + du);
                            let excess = df - allowance;
                            if excess > worst_excess {
                                worst_excess = excess;
                                witness = format!(
                                    "t = {t}, y: {ya} vs {yb}, |f| gap {df:.6} vs lambda allowance {allowance:.6}"
                                );
                            }
                        }
                    }
                }
            }
        }
        report.push(
            "driver-lipschitz",
            worst_excess <= 1e-9,
            format!("worst excess {worst_excess:.3e}; {witness}"),
        );
    }

    // pilot ensemble: terminal bound and feasibility
    {
        let pilot = match PathEnsemble::build_exact_tree(model, Some(1 << 12)) {
            Ok(ens) => ens,
            Err(_) => match PathEnsemble::sample_paths(model, 2000, cfg.master_seed ^ 0x7e57) {
                Ok(ens) => ens,
                Err(e) => {
                    report.push("terminal-feasibility", false, e.to_string());
                    return;
                }
            },
        };
        let xi = terminal.evaluate_on(&pilot);
        let worst = xi.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        report.push(
            "terminal-bound",
            worst <= terminal.bound_m + 1e-12,
            format!("sampled |xi| = {worst:.6} vs declared {}", terminal.bound_m),
        );
        let margin = mean_reflected::weighted_margin(loss, horizon, &xi, pilot.weights());
        report.push(
            "terminal-feasibility",
            margin >= -1e-10,
            format!("E[l(T, xi)] = {margin:.3e} on a {}-scenario pilot", pilot.n_scenarios()),
        );
    }

    // contraction window, informational
    {
        let picard = cfg.solver.picard(driver, loss, model);
        report.push(
            "picard-window",
            true,
            format!(
                "A0 = {:.4}, delta_A = {:.4}, h = {:.4}, interval steps = {}",
                picard.a0, picard.delta_a, picard.h_hat, picard.interval_steps
            ),
        );
    }
}

/// Validate a code-built spec quadruple outside a config file (used by tests
/// and embedders); reuses the probe grids of [`validate_problem`].
pub fn validate_built_specs(
    model: &JumpModel,
    loss: &LossSpec,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    master_seed: u64,
) -> ValidationReport {
    let cfg = RunConfig {
        problem: ProblemConfig {
            model: ModelConfig {
                marks: model.marks().to_vec(),
                intensities: model.intensities().to_vec(),
                horizon: model.horizon(),
                steps: model.steps(),
            },
            loss: LossConfig::Linear {
                slope: 1.0,
                offset0: 0.0,
                offset_t: 0.0,
            },
            driver: DriverConfig::Zero,
            terminal: TerminalConfig::Constant { value: 0.0 },
        },
        solver: SolverConfig::default(),
        experiment: ExperimentConfig::default(),
        master_seed,
    };
    let mut report = ValidationReport {
        checks: Vec::new(),
        passed: true,
    };
    report.push("model", true, format!("dt = {}", model.dt()));
    validate_specs(model, loss, driver, terminal, &cfg, &mut report);
    report
}
