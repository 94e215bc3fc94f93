//! Convergence of the particle system to the limit equation.
//!
//! Independent reference copies reuse the particle system's driving noise
//! (synchronous coupling): copy `i` reruns the backward recursion along
//! particle `i`'s paths with the limit solution's deterministic `K` injected,
//! so the differences
//!
//! ```text
//! dY^i = Y^i - Ybar^i,   dU^i = U^i - Ubar^i e_i,   dK = K^(N) - K
//! ```
//!
//! measure pure interaction error. A sweep over particle counts fits
//! log-error against log-N with inverse-variance weights; squared errors are
//! expected to shrink like `N^(-1/2)` for `Y` and `N^(-1/4)` for `U` and `K`.

use std::time::Instant;

use rayon::prelude::*;

use crate::bsdej::{count_feature_dim, fill_count_features, Backend, DriverSpec, MarkVector, TerminalSpec};
use crate::error::{Error, Result};
use crate::jump_model::{JumpModel, MultiEnsemble, PathEnsemble, DEFAULT_ENUMERATION_CAP};
use crate::loss::{LossSpec, RootConfig};
use crate::mean_reflected::{self, SolutionTriple};
use crate::particle::{
    self, joint_condexp_exact, joint_extract_exact, joint_extract_regression, ParticleSolution,
};
use crate::process::AdaptedProcess;
use crate::regress;

/// Squared error metrics of one coupled run.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ChaosErrors {
    /// Mean over particles of `E[sup_t |dY^i|^2]`.
    pub err_y: f64,
    /// Mean over particles of `E[sum_k dt sum_j sum_e nu_e |dU^{i,j}|^2]`.
    pub err_u: f64,
    /// `E[sup_t |K^(N)_t - K_t|^2]`.
    pub err_k: f64,
}

/// Reference copies coupled to a particle ensemble: reflected processes
/// `Ybar^i` sharing the deterministic limit `K`.
#[derive(Debug, Clone)]
pub struct ReferenceCopies {
    pub y_bar: Vec<AdaptedProcess>,
    pub limit_k: Vec<f64>,
}

const IMPLICIT_MAX_ITERS: usize = 100;

/// Rerun the limit equation's backward recursion along each particle's own
/// driving noise, injecting the deterministic `K` increments.
///
/// The grid of `limit_k` must match the ensemble's grid.
pub fn build_reference(
    multi: &MultiEnsemble,
    limit_k: &[f64],
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    backend: Backend,
) -> Result<ReferenceCopies> {
    let model = multi.model();
    let n = model.steps();
    if limit_k.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "limit K has {} entries for a grid with {} steps",
            limit_k.len(),
            n
        )));
    }
    let ns = multi.n_scenarios();
    let m = model.num_marks();
    let dt = model.dt();
    let branch_probs = if multi.is_exact() {
        multi.joint_branch_probs()
    } else {
        Vec::new()
    };

    let copies: Vec<Result<AdaptedProcess>> = (0..multi.n_particles())
        .into_par_iter()
        .map(|i| {
            let mut y = AdaptedProcess::zeros(n, ns);
            let terminal_values: Vec<f64> = (0..ns)
                .map(|s| terminal.evaluate(&multi.terminal_counts(i, s)))
                .collect();
            y.step_mut(n).copy_from_slice(&terminal_values);
            let counts = match backend {
                Backend::Exact => None,
                Backend::Regression(_) => Some(multi.count_table(i)),
            };
            let mut features = Vec::new();
            let mut warnings = Vec::new();
            for k in (0..n).rev() {
                let values_next = y.step(k + 1).to_vec();
                let dk = limit_k[k + 1] - limit_k[k];
                let (cond, u_k) = match backend {
                    Backend::Exact => {
                        let cond = joint_condexp_exact(multi, &branch_probs, &values_next, k);
                        let u_k = if driver.depends_on_u {
                            Some(joint_extract_exact(multi, &values_next, k, i))
                        } else {
                            None
                        };
                        (cond, u_k)
                    }
                    Backend::Regression(cfg) => {
                        let counts = counts.as_ref().unwrap();
                        fill_count_features(counts, k, cfg.degree, &mut features, ns);
                        let dim = count_feature_dim(m, cfg.degree);
                        let fit = regress::weighted_least_squares(
                            &features,
                            dim,
                            &values_next,
                            multi.weights(),
                        );
                        let mut cond = vec![0.0; ns];
                        regress::predict(&features, dim, &fit.coeffs, &mut cond);
                        let u_k = if driver.depends_on_u {
                            Some(joint_extract_regression(
                                multi,
                                &values_next,
                                k,
                                i,
                                &features,
                                dim,
                                &format!("reference copy {i} step {k}"),
                                &mut warnings,
                            ))
                        } else {
                            None
                        };
                        (cond, u_k)
                    }
                };
                let t_k = model.time(k);
                let zero = vec![0.0; m];
                for s in 0..ns {
                    let marks = MarkVector {
                        values: u_k.as_ref().map_or(&zero[..], |u| &u[s * m..(s + 1) * m]),
                        intensities: model.intensities(),
                    };
                    let e = cond[s] + dk;
                    let v = if driver.depends_on_y {
                        implicit_step(driver, t_k, e, &marks, dt)?
                    } else {
                        e + driver.evaluate(t_k, 0.0, &marks) * dt
                    };
                    y.set_value(k, s, v);
                }
            }
            Ok(y)
        })
        .collect();
    let mut y_bar = Vec::with_capacity(multi.n_particles());
    for c in copies {
        y_bar.push(c?);
    }
    Ok(ReferenceCopies {
        y_bar,
        limit_k: limit_k.to_vec(),
    })
}

fn implicit_step(driver: &DriverSpec, t: f64, e: f64, u: &MarkVector, dt: f64) -> Result<f64> {
    let mut y = e + driver.evaluate(t, e, u) * dt;
    let mut delta = f64::INFINITY;
    for _ in 0..IMPLICIT_MAX_ITERS {
        let next = e + driver.evaluate(t, y, u) * dt;
        delta = (next - y).abs();
        y = next;
        if delta <= 1e-14 * (1.0 + y.abs()) {
            return Ok(y);
        }
    }
    Err(Error::ImplicitStepDiverged {
        iters: IMPLICIT_MAX_ITERS,
        delta,
    })
}

/// Snell-style empirical features from reflected particle values, plus one
/// particle's own count polynomials; used by the streaming extraction.
fn extraction_features(
    multi: &MultiEnsemble,
    loss: &LossSpec,
    sol: &ParticleSolution,
    counts: &crate::jump_model::CountTable,
    degree: usize,
    k: usize,
    buf: &mut Vec<f64>,
) -> usize {
    let ns = multi.n_scenarios();
    let np = sol.n_particles();
    let inv_n = 1.0 / np as f64;
    let t = multi.model().time(k);
    let m = multi.model().num_marks();
    let own_dim = count_feature_dim(m, degree);
    let dim = own_dim + 3;
    let mut own = Vec::new();
    fill_count_features(counts, k, degree, &mut own, ns);
    buf.clear();
    buf.reserve(ns * dim);
    for s in 0..ns {
        buf.extend_from_slice(&own[s * own_dim..(s + 1) * own_dim]);
        let mut mean = 0.0;
        let mut mean_l = 0.0;
        let mut mean_sq = 0.0;
        for i in 0..np {
            let v = sol.reflected_value(i, k, s);
            mean += v;
            mean_l += loss.evaluate(t, v);
            mean_sq += v * v;
        }
        buf.push(mean * inv_n);
        buf.push(mean_l * inv_n);
        buf.push(mean_sq * inv_n);
    }
    dim
}

/// Error metrics of one coupled (particle system, reference) pair.
///
/// On exact trees the materialised `U^{i,j}` matrix is used; on the Monte
/// Carlo backend the coefficients are re-extracted step by step, with
/// off-diagonal entries approximated by the envelope part.
pub fn chaos_errors(
    multi: &MultiEnsemble,
    sol: &ParticleSolution,
    refs: &ReferenceCopies,
    loss: &LossSpec,
    backend: Backend,
) -> Result<ChaosErrors> {
    let model = multi.model();
    let n = model.steps();
    let ns = multi.n_scenarios();
    let np = sol.n_particles();
    let m = model.num_marks();
    let dt = model.dt();
    let nu = model.intensities();
    let weights = multi.weights();
    if refs.y_bar.len() != np || refs.limit_k.len() != n + 1 {
        return Err(Error::GridMismatch("reference does not match the run".into()));
    }

    // sup_t |dY|^2 and sup_t |dK|^2
    let mut err_y = 0.0;
    for i in 0..np {
        let mut acc = 0.0;
        for (s, &w) in weights.iter().enumerate() {
            let mut sup = 0.0_f64;
            for k in 0..=n {
                let d = sol.reflected_value(i, k, s) - refs.y_bar[i].value(k, s);
                sup = sup.max(d.abs());
            }
            acc += w * sup * sup;
        }
        err_y += acc;
    }
    err_y /= np as f64;

    let mut err_k = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        let mut sup = 0.0_f64;
        for k in 0..=n {
            let d = sol.k.value(k, s) - refs.limit_k[k];
            sup = sup.max(d.abs());
        }
        err_k += w * sup * sup;
    }

    // dU: dt-weighted quadratic sum over measures and marks
    let mut err_u = 0.0;
    match (backend, sol.u.as_ref()) {
        (Backend::Exact, Some(u)) => {
            for k in 0..n {
                // reference coefficients against the own measure
                for i in 0..np {
                    let next = refs.y_bar[i].step(k + 1).to_vec();
                    let ubar = joint_extract_exact(multi, &next, k, i);
                    let mut acc = 0.0;
                    for (s, &w) in weights.iter().enumerate() {
                        let mut q = 0.0;
                        for j in 0..np {
                            for e in 0..m {
                                let base = u.value(i, j, k, s, e);
                                let diff = if j == i { base - ubar[s * m + e] } else { base };
                                q += nu[e] * diff * diff;
                            }
                        }
                        acc += w * q;
                    }
                    err_u += dt * acc / np as f64;
                }
            }
        }
        _ => {
            let cfg = match backend {
                Backend::Regression(cfg) => cfg,
                Backend::Exact => {
                    return Err(Error::InvalidConfig(
                        "exact error metrics need the materialised coefficient matrix".into(),
                    ))
                }
            };
            let mut warnings = Vec::new();
            let mut feat_buf = Vec::new();
            let mut own_buf = Vec::new();
            for k in 0..n {
                let s_next = sol.s.step(k + 1).to_vec();
                let mut diag_acc = 0.0;
                let mut off_acc = 0.0;
                for i in 0..np {
                    let counts = multi.count_table(i);
                    let dim = extraction_features(multi, loss, sol, &counts, cfg.degree, k, &mut feat_buf);
                    // own-measure coefficient of y^i plus envelope part
                    let y_next = sol.y[i].step(k + 1).to_vec();
                    let u_own = joint_extract_regression(
                        multi, &y_next, k, i, &feat_buf, dim,
                        &format!("chaos u^{i} step {k}"), &mut warnings,
                    );
                    let v_own = joint_extract_regression(
                        multi, &s_next, k, i, &feat_buf, dim,
                        &format!("chaos V^{i} step {k}"), &mut warnings,
                    );
                    // reference coefficient on own features only
                    fill_count_features(&counts, k, cfg.degree, &mut own_buf, ns);
                    let own_dim = count_feature_dim(m, cfg.degree);
                    let ref_next = refs.y_bar[i].step(k + 1).to_vec();
                    let ubar = joint_extract_regression(
                        multi, &ref_next, k, i, &own_buf, own_dim,
                        &format!("chaos ubar^{i} step {k}"), &mut warnings,
                    );
                    for (s, &w) in weights.iter().enumerate() {
                        let mut diag = 0.0;
                        let mut off = 0.0;
                        for e in 0..m {
                            let d = u_own[s * m + e] + v_own[s * m + e] - ubar[s * m + e];
                            diag += nu[e] * d * d;
                            let v = v_own[s * m + e];
                            off += nu[e] * v * v;
                        }
                        diag_acc += w * diag;
                        off_acc += w * off;
                    }
                }
                // mean_i of the diagonal term, plus (N-1)/N of the summed
                // envelope mass for the off-diagonal measures
                err_u += dt * (diag_acc / np as f64 + off_acc * (np as f64 - 1.0) / np as f64);
            }
        }
    }

    Ok(ChaosErrors { err_y, err_u, err_k })
}

/// One sweep job's outcome.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunRecord {
    pub n_particles: usize,
    pub seed: u64,
    pub err_y: f64,
    pub err_u: f64,
    pub err_k: f64,
    pub runtime_s: f64,
    pub failed: Option<String>,
}

/// Seed-aggregated errors at one particle count.
#[derive(Debug, Clone, serde::Serialize)]
pub struct NSummary {
    pub n_particles: usize,
    pub replicates: usize,
    pub mean_y: f64,
    pub se_y: f64,
    pub mean_u: f64,
    pub se_u: f64,
    pub mean_k: f64,
    pub se_k: f64,
}

/// Weighted log-log slope with a 95% half-width.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub half_width: f64,
}

/// Full rate experiment output.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RateReport {
    pub n_values: Vec<usize>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<NSummary>,
    pub slope_y: SlopeFit,
    pub slope_u: SlopeFit,
    pub slope_k: SlopeFit,
    pub failures: usize,
    /// Flatness/constraint diagnostics of the limit solve.
    pub limit_flatness: f64,
    pub limit_min_margin: f64,
}

/// Sweep controls; `seeds` replicates per particle count.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
    pub seeds: usize,
    pub scenarios: usize,
    /// Reference ensemble size multiplier when the limit needs Monte Carlo.
    pub ref_scenario_factor: usize,
    pub master_seed: u64,
    pub enumeration_cap: usize,
    pub regression: crate::bsdej::RegressionConfig,
    pub root: RootConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_values: vec![8, 16, 32, 64, 128, 256],
            seeds: 10,
            scenarios: 4000,
            ref_scenario_factor: 10,
            master_seed: 1,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            regression: crate::bsdej::RegressionConfig::default(),
            root: RootConfig::default(),
        }
    }
}

/// Solve the limit equation on an exact tree when it fits the cap, otherwise
/// on a large Monte Carlo ensemble.
pub fn solve_limit(
    model: &JumpModel,
    loss: &LossSpec,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    cfg: &SweepConfig,
) -> Result<SolutionTriple> {
    let picard = mean_reflected::compute_picard_window(driver, loss, model.horizon(), model.steps());
    match PathEnsemble::build_exact_tree(model, Some(cfg.enumeration_cap)) {
        Ok(ens) => mean_reflected::solve_mean_reflected(
            &ens,
            driver,
            terminal,
            loss,
            &picard,
            Backend::Exact,
            &cfg.root,
        ),
        Err(Error::EnumerationCapExceeded { .. }) => {
            let m_ref = cfg.scenarios * cfg.ref_scenario_factor;
            let ens = PathEnsemble::sample_paths(model, m_ref, mix_seed(cfg.master_seed, 0x5eed))?;
            mean_reflected::solve_mean_reflected(
                &ens,
                driver,
                terminal,
                loss,
                &picard,
                Backend::Regression(cfg.regression),
                &cfg.root,
            )
        }
        Err(e) => Err(e),
    }
}

fn mix_seed(master: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Run the full sweep: limit solve once, then one coupled run per
/// (particle count, seed), aggregated with inverse-variance slope fits.
pub fn rate_sweep(
    model: &JumpModel,
    loss: &LossSpec,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    cfg: &SweepConfig,
) -> Result<RateReport> {
    let mut distinct = cfg.n_values.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::InvalidConfig(format!(
            "rate sweep needs at least 4 distinct particle counts, got {:?}",
            cfg.n_values
        )));
    }
    if cfg.seeds == 0 {
        return Err(Error::InvalidConfig("rate sweep needs at least one seed".into()));
    }

    let limit = solve_limit(model, loss, driver, terminal, cfg)?;
    let picard = mean_reflected::compute_picard_window(driver, loss, model.horizon(), model.steps());
    let backend = Backend::Regression(cfg.regression);

    let jobs: Vec<(usize, u64)> = distinct
        .iter()
        .flat_map(|&n| (0..cfg.seeds as u64).map(move |s| (n, s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(n_particles, seed_idx)| {
            let start = Instant::now();
            let job_seed = mix_seed(cfg.master_seed, ((n_particles as u64) << 20) | seed_idx);
            let outcome = (|| -> Result<ChaosErrors> {
                let multi = MultiEnsemble::sample(model, n_particles, cfg.scenarios, job_seed)?;
                let sol = particle::solve_particles(
                    &multi, driver, terminal, loss, &picard, backend, &cfg.root,
                )?;
                let refs = build_reference(&multi, &limit.k, driver, terminal, backend)?;
                chaos_errors(&multi, &sol, &refs, loss, backend)
            })();
            match outcome {
                Ok(errors) => RunRecord {
                    n_particles,
                    seed: job_seed,
                    err_y: errors.err_y,
                    err_u: errors.err_u,
                    err_k: errors.err_k,
                    runtime_s: start.elapsed().as_secs_f64(),
                    failed: None,
                },
                Err(e) => RunRecord {
                    n_particles,
                    seed: job_seed,
                    err_y: f64::NAN,
                    err_u: f64::NAN,
                    err_k: f64::NAN,
                    runtime_s: start.elapsed().as_secs_f64(),
                    failed: Some(e.to_string()),
                },
            }
        })
        .collect();

    let failures = runs.iter().filter(|r| r.failed.is_some()).count();
    if failures * 5 > runs.len() {
        return Err(Error::ExperimentAborted(format!(
            "{failures} of {} runs failed",
            runs.len()
        )));
    }

    let mut summary = Vec::new();
    for &n in &distinct {
        let ok: Vec<&RunRecord> = runs
            .iter()
            .filter(|r| r.n_particles == n && r.failed.is_none())
            .collect();
        let count = ok.len();
        if count == 0 {
            return Err(Error::ExperimentAborted(format!(
                "all runs failed at N = {n}"
            )));
        }
        let stat = |get: &dyn Fn(&RunRecord) -> f64| -> (f64, f64) {
            let mean = ok.iter().map(|r| get(r)).sum::<f64>() / count as f64;
            let var = if count > 1 {
                ok.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (count - 1) as f64
            } else {
                0.0
            };
            (mean, (var / count as f64).sqrt())
        };
        let (mean_y, se_y) = stat(&|r| r.err_y);
        let (mean_u, se_u) = stat(&|r| r.err_u);
        let (mean_k, se_k) = stat(&|r| r.err_k);
        summary.push(NSummary {
            n_particles: n,
            replicates: count,
            mean_y,
            se_y,
            mean_u,
            se_u,
            mean_k,
            se_k,
        });
    }

    let fit = |mean: &dyn Fn(&NSummary) -> f64, se: &dyn Fn(&NSummary) -> f64| -> SlopeFit {
        let pts: Vec<(f64, f64, f64)> = summary
            .iter()
            .map(|s| (s.n_particles as f64, mean(s), se(s)))
            .collect();
        wls_loglog(&pts)
    };
    let slope_y = fit(&|s| s.mean_y, &|s| s.se_y);
    let slope_u = fit(&|s| s.mean_u, &|s| s.se_u);
    let slope_k = fit(&|s| s.mean_k, &|s| s.se_k);

    Ok(RateReport {
        n_values: distinct,
        runs,
        summary,
        slope_y,
        slope_u,
        slope_k,
        failures,
        limit_flatness: limit.diagnostics.flatness_residual,
        limit_min_margin: limit.diagnostics.min_constraint_margin,
    })
}

/// Weighted least squares of `log(err)` on `log(N)`.
///
/// Weights are inverse variances of the log means, `(se / mean)^-2`, capped
/// for zero standard errors.
fn wls_loglog(points: &[(f64, f64, f64)]) -> SlopeFit {
    let mut s_w = 0.0;
    let mut s_x = 0.0;
    let mut s_y = 0.0;
    let mut s_xx = 0.0;
    let mut s_xy = 0.0;
    for &(n, mean, se) in points {
        if !(mean > 0.0) {
            continue;
        }
        let x = n.ln();
        let y = mean.ln();
        let rel = if mean > 0.0 { se / mean } else { 0.0 };
        let var = (rel * rel).max(1e-12);
        let w = 1.0 / var;
        s_w += w;
        s_x += w * x;
        s_y += w * y;
        s_xx += w * x * x;
        s_xy += w * x * y;
    }
    let det = s_w * s_xx - s_x * s_x;
    if det <= 0.0 {
        return SlopeFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            half_width: f64::NAN,
        };
    }
    let slope = (s_w * s_xy - s_x * s_y) / det;
    let intercept = (s_xx * s_y - s_x * s_xy) / det;
    // with known variances, var(slope) = s_w / det
    let half_width = 1.96 * (s_w / det).sqrt();
    SlopeFit {
        slope,
        intercept,
        half_width,
    }
}

/// Raw data and fitted exponents of the grid-regularity probes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegularityReport {
    pub grids: Vec<usize>,
    /// `(dt, max_k |K_{k+1} - K_k|)` per grid.
    pub k_increments: Vec<(f64, f64)>,
    /// Fitted slope of `log max-increment` vs `log dt` (NaN when K is flat).
    pub k_increment_slope: f64,
    /// `max |dK| / sqrt(dt)` per grid; bounded when K is 1/2-Hoelder.
    pub k_holder_ratios: Vec<f64>,
    /// `(lag, E|y_{t+lag} - y_t|^2)` on the finest grid.
    pub y_increments: Vec<(f64, f64)>,
    /// Fitted slope of `log E|dy|^2` vs `log lag` (NaN when y is constant).
    pub y_increment_slope: f64,
}

/// Probe controls; grids are `steps * multiplier` refinements.
#[derive(Debug, Clone)]
pub struct RegularityConfig {
    pub grid_multipliers: Vec<usize>,
    pub scenarios: usize,
    pub master_seed: u64,
    pub enumeration_cap: usize,
    pub regression: crate::bsdej::RegressionConfig,
    pub root: RootConfig,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            grid_multipliers: vec![1, 2, 4, 8],
            scenarios: 4000,
            master_seed: 1,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            regression: crate::bsdej::RegressionConfig::default(),
            root: RootConfig::default(),
        }
    }
}

/// Solve the limit problem on refining grids and fit the increment exponents
/// of `K` (across grids) and of the unreflected `y` (lags on the finest
/// grid).
pub fn regularity_probe(
    model: &JumpModel,
    loss: &LossSpec,
    driver: &DriverSpec,
    terminal_builder: &dyn Fn(&JumpModel) -> Result<TerminalSpec>,
    cfg: &RegularityConfig,
) -> Result<RegularityReport> {
    if cfg.grid_multipliers.len() < 2 {
        return Err(Error::InvalidConfig(
            "regularity probe needs at least two grids".into(),
        ));
    }
    let sweep_like = SweepConfig {
        scenarios: cfg.scenarios,
        ref_scenario_factor: 1,
        master_seed: cfg.master_seed,
        enumeration_cap: cfg.enumeration_cap,
        regression: cfg.regression,
        root: cfg.root,
        ..SweepConfig::default()
    };
    let mut grids = Vec::new();
    let mut k_increments = Vec::new();
    let mut k_holder_ratios = Vec::new();
    let mut finest: Option<(JumpModel, SolutionTriple, PathEnsemble)> = None;
    for &mult in &cfg.grid_multipliers {
        let steps = model.steps() * mult;
        let refined = JumpModel::new(
            model.marks().to_vec(),
            model.intensities().to_vec(),
            model.horizon(),
            steps,
        )?;
        let terminal = terminal_builder(&refined)?;
        let sol = solve_limit(&refined, loss, driver, &terminal, &sweep_like)?;
        let dt = refined.dt();
        let max_inc = sol
            .k
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0_f64, f64::max);
        grids.push(steps);
        k_increments.push((dt, max_inc));
        k_holder_ratios.push(max_inc / dt.sqrt());
        if mult == *cfg.grid_multipliers.iter().max().unwrap() {
            // keep the ensemble actually used for the y-increment pass
            let ens = match PathEnsemble::build_exact_tree(&refined, Some(cfg.enumeration_cap)) {
                Ok(ens) => ens,
                Err(Error::EnumerationCapExceeded { .. }) => PathEnsemble::sample_paths(
                    &refined,
                    cfg.scenarios,
                    mix_seed(cfg.master_seed, 0x5eed),
                )?,
                Err(e) => return Err(e),
            };
            finest = Some((refined, sol, ens));
        }
    }

    let k_increment_slope = loglog_slope(
        &k_increments
            .iter()
            .filter(|(_, inc)| *inc > 1e-14)
            .map(|&(dt, inc)| (dt, inc))
            .collect::<Vec<_>>(),
    );

    let (fmodel, fsol, fens) = finest.expect("finest grid solved");
    let n = fmodel.steps();
    let k_total = fsol.k[n];
    let mut y_increments = Vec::new();
    let mut lag = 1usize;
    while lag <= n / 2 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in 0..=(n - lag) {
            let shift_k = k_total - fsol.k[k];
            let shift_kl = k_total - fsol.k[k + lag];
            let rows = (fsol.y.step(k), fsol.y.step(k + lag));
            let mut step_acc = 0.0;
            for (s, &w) in fens.weights().iter().enumerate() {
                let y0 = rows.0[s] - shift_k;
                let y1 = rows.1[s] - shift_kl;
                step_acc += w * (y1 - y0) * (y1 - y0);
            }
            acc += step_acc;
            count += 1;
        }
        y_increments.push((lag as f64 * fmodel.dt(), acc / count as f64));
        lag *= 2;
    }
    let y_increment_slope = loglog_slope(
        &y_increments
            .iter()
            .filter(|(_, e)| *e > 1e-28)
            .map(|&(l, e)| (l, e))
            .collect::<Vec<_>>(),
    );

    Ok(RegularityReport {
        grids,
        k_increments,
        k_increment_slope,
        k_holder_ratios,
        y_increments,
        y_increment_slope,
    })
}

/// Plain least-squares slope in log-log coordinates; NaN with < 2 points.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
