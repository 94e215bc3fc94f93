//! The single mean-reflected equation.
//!
//! For a driver that does not look at the current `Y`, the flat solution has
//! an explicit form: solve the unreflected equation for `(y, u)`, evaluate
//! the reflection amounts `ell_k = L_{t_k}(law of y_k)`, and set
//!
//! ```text
//! K_T - K_k = max_{s >= k} ell_s,      Y_k = y_k + (K_T - K_k),      U = u.
//! ```
//!
//! A `y`-dependent driver is handled by freezing it at a trial process `P`
//! and iterating `P -> Y^P` on subintervals short enough for the map to
//! contract: with `A_0 = (3 + 2 kappa + 4 lambda kappa) L`, invariance holds
//! below `delta^A = min(L / (L + lambda A), T)` and the iterate gap halves
//! below `h = min(1 / (4 lambda kappa), delta^A)`. Local solutions stitch
//! right-to-left, accumulating `K` from the left.

use crate::bsdej::{self, Backend, DriverSpec, TerminalSpec, YMode};
use crate::error::{Error, Result};
use crate::jump_model::PathEnsemble;
use crate::loss::{self, LossSpec, RootConfig, SampleCloud};
use crate::process::{AdaptedProcess, PredictableField};

/// Contraction-window constants and iteration controls.
#[derive(Debug, Clone)]
pub struct PicardConfig {
    /// Invariance-ball radius floor `(3 + 2 kappa + 4 lambda kappa) L`.
    pub a0: f64,
    /// Ball radius actually used (`>= a0`).
    pub a: f64,
    /// Invariance window `min(L / (L + lambda a), T)`.
    pub delta_a: f64,
    /// Contraction window `min(1 / (4 lambda kappa), delta_a)`.
    pub h_hat: f64,
    /// Window rounded down to whole grid steps (at least one).
    pub interval_steps: usize,
    pub max_iters: usize,
    pub tol_fixed_point: f64,
}

impl PicardConfig {
    /// Single interval covering the whole grid; used when the driver does not
    /// depend on `Y`.
    pub fn single_interval(steps: usize) -> Self {
        Self {
            a0: 0.0,
            a: 0.0,
            delta_a: f64::INFINITY,
            h_hat: f64::INFINITY,
            interval_steps: steps,
            max_iters: 100,
            tol_fixed_point: 1e-10,
        }
    }
}

/// Derive the contraction window from the declared constants.
///
/// With `lambda * kappa = 0` the map has an immediate fixed point and one
/// interval suffices.
pub fn compute_picard_window(
    driver: &DriverSpec,
    loss: &LossSpec,
    horizon: f64,
    steps: usize,
) -> PicardConfig {
    let lambda = driver.lambda;
    let kappa = loss.kappa();
    let l = driver.bound_l;
    if lambda * kappa == 0.0 || !driver.depends_on_y {
        return PicardConfig::single_interval(steps);
    }
    let a0 = (3.0 + 2.0 * kappa + 4.0 * lambda * kappa) * l;
    let a = a0;
    let delta_a = if l + lambda * a > 0.0 {
        (l / (l + lambda * a)).min(horizon)
    } else {
        horizon
    };
    let h_hat = (1.0 / (4.0 * lambda * kappa)).min(delta_a);
    let dt = horizon / steps as f64;
    let interval_steps = ((h_hat / dt).floor() as usize).clamp(1, steps);
    PicardConfig {
        a0,
        a,
        delta_a,
        h_hat,
        interval_steps,
        max_iters: 100,
        tol_fixed_point: 1e-10,
    }
}

/// One fixed-point iteration record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PicardRecord {
    /// Interval index, 0 = rightmost.
    pub interval: usize,
    /// Iteration number within the interval, starting at 1.
    pub iteration: usize,
    /// Sup-norm change of the iterate.
    pub delta: f64,
    /// Ratio to the previous delta, from the second iteration on.
    pub ratio: Option<f64>,
}

/// Solve diagnostics attached to a [`SolutionTriple`].
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Constraint margin `sum_s w_s l(t_k, Y_k(s))` per grid time.
    pub constraint_margin: Vec<f64>,
    pub min_constraint_margin: f64,
    /// Left-point Stieltjes sum of positive margins against `dK`.
    pub flatness_residual: f64,
    pub picard: Vec<PicardRecord>,
    pub warnings: Vec<String>,
}

/// Flat solution of the mean-reflected equation: adapted `Y`, predictable
/// per-mark `U` and the deterministic nondecreasing `K` with `K_0 = 0`.
#[derive(Debug, Clone)]
pub struct SolutionTriple {
    pub y: AdaptedProcess,
    pub u: PredictableField,
    pub k: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Weighted constraint margin `sum_s w_s l(t, values_s)`.
pub fn weighted_margin(loss: &LossSpec, t: f64, values: &[f64], weights: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| w * loss.evaluate(t, v))
        .sum()
}

struct ReflectRangeOut {
    /// Local `K` over the range, zero at `k_lo`.
    k_local: Vec<f64>,
}

/// Reflect one range: unreflected solve, then the running-max shift.
///
/// Writes reflected rows `k_lo..k_hi` of `y_out` (the terminal row is left to
/// the caller) and rows `k_lo..k_hi` of `u_out`.
#[allow(clippy::too_many_arguments)]
fn reflect_range(
    ctx: &mut bsdej::SolveContext,
    driver: &DriverSpec,
    ymode: &YMode,
    terminal_values: &[f64],
    k_lo: usize,
    k_hi: usize,
    loss: &LossSpec,
    root_cfg: &RootConfig,
    y_out: &mut AdaptedProcess,
    u_out: &mut PredictableField,
    scratch: &mut AdaptedProcess,
    warnings: &mut Vec<String>,
) -> Result<ReflectRangeOut> {
    let ens = ctx.ens;
    let model = ens.model().clone();
    bsdej::solve_range(
        ctx,
        driver,
        ymode,
        terminal_values,
        k_lo,
        k_hi,
        scratch,
        u_out,
        warnings,
    )?;

    let len = k_hi - k_lo + 1;
    let mut ell = vec![0.0; len];
    for k in k_lo..=k_hi {
        let cloud = SampleCloud::new(scratch.step(k), ens.weights())?;
        ell[k - k_lo] = loss::l_operator(loss, model.time(k), &cloud, root_cfg)?;
    }
    // tail_max[i] = max over s >= i of ell[s]
    let mut tail_max = ell;
    for i in (0..len - 1).rev() {
        tail_max[i] = tail_max[i].max(tail_max[i + 1]);
    }
    for k in k_lo..k_hi {
        let shift = tail_max[k - k_lo];
        let src = scratch.step(k).to_vec();
        let row = y_out.step_mut(k);
        for (slot, v) in row.iter_mut().zip(src) {
            *slot = v + shift;
        }
    }
    let k_local = tail_max.iter().map(|&m| tail_max[0] - m).collect();
    Ok(ReflectRangeOut { k_local })
}

/// Flat solution when the driver does not depend on the current `Y`
/// (it may depend on `u` and on a frozen process).
pub fn reflect_constant_driver(
    ens: &PathEnsemble,
    driver: &DriverSpec,
    frozen: Option<&AdaptedProcess>,
    terminal: &TerminalSpec,
    loss: &LossSpec,
    backend: Backend,
    root_cfg: &RootConfig,
) -> Result<SolutionTriple> {
    if driver.depends_on_y && frozen.is_none() {
        return Err(Error::InvalidConfig(
            "reflect_constant_driver needs a frozen process for a y-dependent driver".into(),
        ));
    }
    let n = ens.model().steps();
    let ns = ens.n_scenarios();
    let m = ens.model().num_marks();
    let mut y = AdaptedProcess::zeros(n, ns);
    let mut u = PredictableField::zeros(n, ns, m);
    let mut scratch = AdaptedProcess::zeros(n, ns);
    let mut warnings = Vec::new();
    let terminal_values = terminal.evaluate_on(ens);
    let ymode = match frozen {
        Some(p) => YMode::Frozen(p),
        None => YMode::SelfImplicit,
    };
    let mut ctx = bsdej::SolveContext::new(ens, backend)?;
    let out = reflect_range(
        &mut ctx,
        driver,
        &ymode,
        &terminal_values,
        0,
        n,
        loss,
        root_cfg,
        &mut y,
        &mut u,
        &mut scratch,
        &mut warnings,
    )?;
    y.step_mut(n).copy_from_slice(&terminal_values);
    let mut triple = SolutionTriple {
        y,
        u,
        k: out.k_local,
        diagnostics: Diagnostics {
            warnings,
            ..Default::default()
        },
    };
    finish_diagnostics(&mut triple, loss, ens);
    Ok(triple)
}

/// Flat solution for a general Lipschitz driver: freeze, solve, iterate,
/// stitch.
pub fn solve_mean_reflected(
    ens: &PathEnsemble,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    loss: &LossSpec,
    picard: &PicardConfig,
    backend: Backend,
    root_cfg: &RootConfig,
) -> Result<SolutionTriple> {
    let n = ens.model().steps();
    let ns = ens.n_scenarios();
    let m = ens.model().num_marks();
    let mut y = AdaptedProcess::zeros(n, ns);
    let mut u = PredictableField::zeros(n, ns, m);
    let mut scratch = AdaptedProcess::zeros(n, ns);
    let mut warnings = Vec::new();
    let mut picard_log = Vec::new();
    let mut ctx = bsdej::SolveContext::new(ens, backend)?;

    let mut terminal_values = terminal.evaluate_on(ens);
    y.step_mut(n).copy_from_slice(&terminal_values);

    // Local K vectors in solve order (rightmost interval first).
    let mut locals: Vec<(usize, Vec<f64>)> = Vec::new();
    let step_len = picard.interval_steps.max(1);
    let mut k_hi = n;
    let mut interval = 0usize;
    while k_hi > 0 {
        let k_lo = k_hi.saturating_sub(step_len);
        if !driver.depends_on_y {
            let out = reflect_range(
                &mut ctx,
                driver,
                &YMode::SelfImplicit,
                &terminal_values,
                k_lo,
                k_hi,
                loss,
                root_cfg,
                &mut y,
                &mut u,
                &mut scratch,
                &mut warnings,
            )?;
            locals.push((k_lo, out.k_local));
            picard_log.push(PicardRecord {
                interval,
                iteration: 1,
                delta: 0.0,
                ratio: None,
            });
        } else {
            // frozen trial process; zero start keeps the first solve inside
            // the invariance ball
            let mut p = AdaptedProcess::zeros(n, ns);
            let mut prev_delta: Option<f64> = None;
            let mut deltas = Vec::new();
            let mut converged = false;
            for iteration in 1..=picard.max_iters {
                let out = reflect_range(
                    &mut ctx,
                    driver,
                    &YMode::Frozen(&p),
                    &terminal_values,
                    k_lo,
                    k_hi,
                    loss,
                    root_cfg,
                    &mut y,
                    &mut u,
                    &mut scratch,
                    &mut warnings,
                )?;
                let mut delta = 0.0_f64;
                for k in k_lo..k_hi {
                    for s in 0..ns {
                        delta = delta.max((y.value(k, s) - p.value(k, s)).abs());
                    }
                }
                picard_log.push(PicardRecord {
                    interval,
                    iteration,
                    delta,
                    ratio: prev_delta.map(|d| if d > 0.0 { delta / d } else { 0.0 }),
                });
                deltas.push(delta);
                for k in k_lo..k_hi {
                    let row = y.step(k).to_vec();
                    p.step_mut(k).copy_from_slice(&row);
                }
                if delta <= picard.tol_fixed_point {
                    locals.push((k_lo, out.k_local));
                    converged = true;
                    break;
                }
                prev_delta = Some(delta);
            }
            if !converged {
                return Err(Error::PicardDiverged {
                    iters: picard.max_iters,
                    history: deltas,
                });
            }
        }
        terminal_values = y.step(k_lo).to_vec();
        k_hi = k_lo;
        interval += 1;
    }

    // Stitch: K_t = K^i_t + sum of total increments of intervals left of i.
    locals.sort_by_key(|(k_lo, _)| *k_lo);
    let mut k_vec = vec![0.0; n + 1];
    let mut offset = 0.0;
    for (k_lo, local) in locals {
        for (i, v) in local.iter().enumerate() {
            k_vec[k_lo + i] = offset + v;
        }
        offset += local.last().copied().unwrap_or(0.0);
    }

    let mut triple = SolutionTriple {
        y,
        u,
        k: k_vec,
        diagnostics: Diagnostics {
            picard: picard_log,
            warnings,
            ..Default::default()
        },
    };
    finish_diagnostics(&mut triple, loss, ens);
    Ok(triple)
}

/// Flatness residual and worst constraint margin of a solved triple.
///
/// Returns `(sum_k (margin_k)^+ (K_{k+1} - K_k), min_k margin_k)`.
pub fn flatness_residual(
    solution: &SolutionTriple,
    loss: &LossSpec,
    ens: &PathEnsemble,
) -> (f64, f64) {
    let model = ens.model();
    let n = model.steps();
    let mut residual = 0.0;
    let mut min_margin = f64::INFINITY;
    for k in 0..=n {
        let margin = weighted_margin(loss, model.time(k), solution.y.step(k), ens.weights());
        min_margin = min_margin.min(margin);
        if k < n {
            residual += margin.max(0.0) * (solution.k[k + 1] - solution.k[k]);
        }
    }
    (residual, min_margin)
}

fn finish_diagnostics(triple: &mut SolutionTriple, loss: &LossSpec, ens: &PathEnsemble) {
    let model = ens.model();
    let margins: Vec<f64> = (0..=model.steps())
        .map(|k| weighted_margin(loss, model.time(k), triple.y.step(k), ens.weights()))
        .collect();
    let (residual, min_margin) = flatness_residual(triple, loss, ens);
    triple.diagnostics.constraint_margin = margins;
    triple.diagnostics.min_constraint_margin = min_margin;
    triple.diagnostics.flatness_residual = residual;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsdej::solve_bsdej;
    use crate::jump_model::JumpModel;
    use approx::assert_abs_diff_eq;

    fn root_cfg() -> RootConfig {
        RootConfig::default()
    }

    /// l(t, y) = y - a(t) with a(t) = 0.5 (1 - t/T), f = 0, E[xi] = 0:
    /// K_k = a(0) - a(t_k) = 0.5 t_k / T.
    fn closed_form_instance(steps: usize) -> (JumpModel, LossSpec, TerminalSpec) {
        let horizon = 1.0;
        let model = JumpModel::new(vec![1.0], vec![1.0], horizon, steps).unwrap();
        let loss = LossSpec::linear(1.0, -0.5, 0.5 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        (model, loss, terminal)
    }

    #[test]
    fn closed_form_linear_loss_recovers_k() {
        let (model, loss, terminal) = closed_form_instance(8);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let sol = reflect_constant_driver(
            &ens,
            &DriverSpec::zero(),
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        for k in 0..=model.steps() {
            let expected = 0.5 * model.time(k) / model.horizon();
            assert_abs_diff_eq!(sol.k[k], expected, epsilon = 1e-8);
        }
        assert_eq!(sol.k[0], 0.0);
        assert!(sol.diagnostics.min_constraint_margin >= -1e-8);
        assert!(sol.diagnostics.flatness_residual <= 1e-8);
    }

    #[test]
    fn slack_constraint_leaves_k_zero() {
        // l(t, y) = y + 2: already feasible everywhere
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.5, 4).unwrap();
        let loss = LossSpec::linear(1.0, 2.0, 0.0).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let sol = reflect_constant_driver(
            &ens,
            &DriverSpec::zero(),
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        for k in 0..=model.steps() {
            assert_eq!(sol.k[k], 0.0);
        }
        let plain = solve_bsdej(&ens, &DriverSpec::zero(), &terminal, None, Backend::Exact).unwrap();
        assert_eq!(sol.y, plain.y);
    }

    #[test]
    fn terminal_row_stays_at_xi_under_feasibility() {
        let (model, loss, terminal) = closed_form_instance(6);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let sol = reflect_constant_driver(
            &ens,
            &DriverSpec::zero(),
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let xi = terminal.evaluate_on(&ens);
        assert_eq!(sol.y.terminal(), &xi[..]);
        let n = model.steps();
        // K_T - K_T = 0 and the last increment equals ell at the last interior max
        assert!(sol.k[n] >= sol.k[n - 1]);
    }

    #[test]
    fn picard_window_matches_hand_arithmetic() {
        // L = 1, kappa = 2, lambda = 0.5
        let loss = LossSpec::new(
            crate::loss::LossFamily::Linear {
                slope: 1.0,
                offset0: 0.0,
                offset_t: 0.0,
            },
            1.0,
            2.0,
            0.0,
            1.0,
        )
        .unwrap();
        let driver = DriverSpec::linear_y(1.0, 0.5);
        let cfg = compute_picard_window(&driver, &loss, 1.0, 100);
        assert_abs_diff_eq!(cfg.a0, 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.delta_a, 1.0 / 6.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.h_hat, 1.0 / 6.5, epsilon = 1e-12);
        assert!(cfg.h_hat <= (1.0_f64 / (4.0 * 0.5 * 2.0)).min(cfg.delta_a));
        // dt = 0.01: 15 whole steps fit under 0.1538...
        assert_eq!(cfg.interval_steps, 15);
    }

    #[test]
    fn lambda_zero_gives_single_interval() {
        let loss = LossSpec::linear(1.0, 0.0, 0.0).unwrap();
        let driver = DriverSpec::constant(0.3);
        let cfg = compute_picard_window(&driver, &loss, 2.0, 16);
        assert_eq!(cfg.interval_steps, 16);
    }

    #[test]
    fn y_independent_driver_reproduces_constant_reflect() {
        let (model, loss, terminal) = closed_form_instance(6);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let driver = DriverSpec::constant(0.2);
        let picard = compute_picard_window(&driver, &loss, model.horizon(), model.steps());
        let a = reflect_constant_driver(
            &ens,
            &driver,
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let b = solve_mean_reflected(
            &ens,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.k, b.k);
    }

    #[test]
    fn stitched_solution_matches_global_damped_iteration() {
        // f = 0.5 y on a short horizon: the whole-grid map already contracts,
        // so a globally damped iteration is an independent route to the same
        // fixed point.
        let horizon = 0.5;
        let model = JumpModel::new(vec![1.0], vec![1.0], horizon, 4).unwrap();
        let loss = LossSpec::linear(1.0, -0.3, 0.3 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::linear_y(0.0, 0.5);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let picard = compute_picard_window(&driver, &loss, horizon, model.steps());
        // tight root tolerance so both routes resolve below the comparison level
        let tight = RootConfig {
            tol: 1e-13,
            bound: 1e6,
        };
        let sol = solve_mean_reflected(
            &ens,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &tight,
        )
        .unwrap();

        // oracle: P <- (P + Y^P) / 2 over the whole grid until 1e-10
        let mut p = AdaptedProcess::zeros(model.steps(), ens.n_scenarios());
        let mut oracle = None;
        for _ in 0..500 {
            let trial = reflect_constant_driver(
                &ens,
                &driver,
                Some(&p),
                &terminal,
                &loss,
                Backend::Exact,
                &tight,
            )
            .unwrap();
            let delta = trial.y.sup_distance(&p);
            let mut next = AdaptedProcess::zeros(model.steps(), ens.n_scenarios());
            for k in 0..=model.steps() {
                for s in 0..ens.n_scenarios() {
                    next.set_value(k, s, 0.5 * (p.value(k, s) + trial.y.value(k, s)));
                }
            }
            p = next;
            if delta <= 1e-10 {
                oracle = Some(trial);
                break;
            }
        }
        let oracle = oracle.expect("global damped iteration converged");
        assert!(sol.y.sup_distance(&oracle.y) <= 1e-9);
        for k in 0..=model.steps() {
            assert_abs_diff_eq!(sol.k[k], oracle.k[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn iterate_ratios_stay_below_half_plus_slack_inside_window() {
        // lambda kappa > 0 and interval length <= 1 / (4 lambda kappa)
        let horizon = 1.0;
        let model = JumpModel::new(vec![1.0], vec![1.0], horizon, 16).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::linear_y(0.1, 0.8);
        let picard = compute_picard_window(&driver, &loss, horizon, model.steps());
        assert!(picard.interval_steps as f64 * model.dt() <= 1.0 / (4.0 * 0.8));
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let sol = solve_mean_reflected(
            &ens,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let mut measured = 0;
        for rec in &sol.diagnostics.picard {
            if let Some(ratio) = rec.ratio {
                // ignore ratios at numerical convergence noise level
                if rec.delta > 1e-13 {
                    assert!(
                        ratio <= 0.55,
                        "interval {} iteration {}: ratio {ratio}",
                        rec.interval,
                        rec.iteration
                    );
                    measured += 1;
                }
            }
        }
        assert!(measured > 0, "no contraction ratios were measured");
    }

    #[test]
    fn flatness_residual_detects_inflated_k() {
        let (model, loss, terminal) = closed_form_instance(8);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let mut sol = reflect_constant_driver(
            &ens,
            &DriverSpec::zero(),
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let (residual, _) = flatness_residual(&sol, &loss, &ens);
        assert!(residual <= 1e-8);

        // inflating K after t = 0 must light up the detector: shift Y along
        // so the constraint margin turns strictly positive where K now grows
        for k in 1..=model.steps() {
            sol.k[k] += 0.1;
            let row = sol.y.step_mut(k);
            for v in row.iter_mut() {
                *v += 0.1;
            }
        }
        let (residual, _) = flatness_residual(&sol, &loss, &ens);
        assert!(residual > 1e-3, "tampered residual {residual}");
    }

    #[test]
    fn k_zero_residual_is_zero() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.5, 4).unwrap();
        let loss = LossSpec::linear(1.0, 2.0, 0.0).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let sol = reflect_constant_driver(
            &ens,
            &DriverSpec::zero(),
            None,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let (residual, _) = flatness_residual(&sol, &loss, &ens);
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn representation_consistency_on_exact_tree() {
        // Y - (K_T - K_t) solves the unreflected equation with the driver
        // frozen at the converged Y
        let horizon = 0.8;
        let model = JumpModel::new(vec![1.0], vec![1.2], horizon, 8).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::linear_y(0.1, 0.6);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let picard = compute_picard_window(&driver, &loss, horizon, model.steps());
        let sol = solve_mean_reflected(
            &ens,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let n = model.steps();
        let dt = model.dt();
        let k_t = &sol.k;
        for k in 0..n {
            for s in 0..ens.n_scenarios() {
                let yk = sol.y.value(k, s) - (k_t[n] - k_t[k]);
                let yk1 = sol.y.value(k + 1, s) - (k_t[n] - k_t[k + 1]);
                let marks = crate::bsdej::MarkVector {
                    values: sol.u.marks_at(k, s),
                    intensities: model.intensities(),
                };
                let f = driver.evaluate(model.time(k), sol.y.value(k, s), &marks);
                let mut mart = 0.0;
                for j in 0..model.num_marks() {
                    mart += sol.u.value(k, s, j)
                        * model.compensated_increment(ens.outcome(s, k), j);
                }
                let residual = yk1 - yk + f * dt - mart;
                assert!(
                    residual.abs() <= 1e-10,
                    "step {k} scenario {s}: residual {residual}"
                );
            }
        }
    }

    #[test]
    fn raising_terminal_never_raises_k_total() {
        let (model, loss, _) = closed_form_instance(6);
        let ens = PathEnsemble::build_exact_tree(&model, None).unwrap();
        let base = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let solve = |terminal: &TerminalSpec| {
            reflect_constant_driver(
                &ens,
                &DriverSpec::zero(),
                None,
                terminal,
                &loss,
                Backend::Exact,
                &root_cfg(),
            )
            .unwrap()
        };
        let k_base = solve(&base).k[model.steps()];
        for lift in [0.1, 0.5, 1.0] {
            let model_c = model.clone();
            let lifted = TerminalSpec::custom(
                std::sync::Arc::new(move |counts: &[u32]| {
                    counts[0] as f64 - model_c.intensities()[0] * model_c.horizon() + lift
                }),
                10.0,
            );
            let k_lifted = solve(&lifted).k[model.steps()];
            assert!(
                k_lifted <= k_base + 1e-10,
                "lift {lift}: K_T went from {k_base} to {k_lifted}"
            );
        }
    }
}
