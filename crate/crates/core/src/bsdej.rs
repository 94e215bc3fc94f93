//! Backward induction for the unreflected equation with jumps.
//!
//! Given terminal values `xi` and a driver `f(t, y, u)`, the scheme walks the
//! grid backwards: at step `k` it first extracts the per-mark martingale
//! coefficients `u_k` from the step-`k+1` values, then sets
//!
//! ```text
//! y_k = E_k[y_{k+1}] + f(t_k, ., u_k) * dt
//! ```
//!
//! explicit in `u`, and implicit (damped fixed point) in `y` only when the
//! driver depends on `y` at the same step and no frozen process is supplied.
//! On exact trees the one-step identity
//! `y_{k+1} - y_k + f dt - sum_j u_k(j) dmu~_j = 0` holds scenario-wise.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::jump_model::{step_probs, CountTable, JumpModel, PathEnsemble};
use crate::process::{AdaptedProcess, PredictableField};
use crate::regress;

/// Per-mark argument handed to drivers, with the intensity-weighted norm
/// `|u|_nu = (sum_j u_j^2 nu_j)^(1/2)`.
pub struct MarkVector<'a> {
    pub values: &'a [f64],
    pub intensities: &'a [f64],
}

impl MarkVector<'_> {
    pub fn norm_nu(&self) -> f64 {
        self.values
            .iter()
            .zip(self.intensities)
            .map(|(u, nu)| u * u * nu)
            .sum::<f64>()
            .sqrt()
    }
}

type DriverFn = Arc<dyn Fn(f64, f64, &MarkVector) -> f64 + Send + Sync>;

/// Driver families; `LinearYU` couples to `u` through `|u|_nu`.
#[derive(Clone)]
pub enum DriverFamily {
    Zero,
    Constant(f64),
    LinearY { base: f64, y_coef: f64 },
    LinearYU { base: f64, y_coef: f64, u_coef: f64 },
    Custom(DriverFn),
}

impl fmt::Debug for DriverFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverFamily::Zero => write!(f, "Zero"),
            DriverFamily::Constant(c) => write!(f, "Constant({c})"),
            DriverFamily::LinearY { base, y_coef } => {
                write!(f, "LinearY {{ base: {base}, y_coef: {y_coef} }}")
            }
            DriverFamily::LinearYU {
                base,
                y_coef,
                u_coef,
            } => write!(
                f,
                "LinearYU {{ base: {base}, y_coef: {y_coef}, u_coef: {u_coef} }}"
            ),
            DriverFamily::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A driver with its declared Lipschitz constant `lambda` (joint in `y` and
/// `|u|_nu`) and bound `L >= |f(t, 0, 0)|`.
#[derive(Debug, Clone)]
pub struct DriverSpec {
    pub family: DriverFamily,
    pub lambda: f64,
    pub bound_l: f64,
    pub depends_on_y: bool,
    pub depends_on_u: bool,
}

impl DriverSpec {
    pub fn zero() -> Self {
        Self {
            family: DriverFamily::Zero,
            lambda: 0.0,
            bound_l: 0.0,
            depends_on_y: false,
            depends_on_u: false,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            family: DriverFamily::Constant(c),
            lambda: 0.0,
            bound_l: c.abs(),
            depends_on_y: false,
            depends_on_u: false,
        }
    }

    pub fn linear_y(base: f64, y_coef: f64) -> Self {
        Self {
            family: DriverFamily::LinearY { base, y_coef },
            lambda: y_coef.abs(),
            bound_l: base.abs(),
            depends_on_y: y_coef != 0.0,
            depends_on_u: false,
        }
    }

    pub fn linear_yu(base: f64, y_coef: f64, u_coef: f64) -> Self {
        Self {
            family: DriverFamily::LinearYU {
                base,
                y_coef,
                u_coef,
            },
            lambda: y_coef.abs() + u_coef.abs(),
            bound_l: base.abs(),
            depends_on_y: y_coef != 0.0,
            depends_on_u: u_coef != 0.0,
        }
    }

    pub fn custom(
        f: DriverFn,
        lambda: f64,
        bound_l: f64,
        depends_on_y: bool,
        depends_on_u: bool,
    ) -> Self {
        Self {
            family: DriverFamily::Custom(f),
            lambda,
            bound_l,
            depends_on_y,
            depends_on_u,
        }
    }

    pub fn evaluate(&self, t: f64, y: f64, u: &MarkVector) -> f64 {
        match &self.family {
            DriverFamily::Zero => 0.0,
            DriverFamily::Constant(c) => *c,
            DriverFamily::LinearY { base, y_coef } => base + y_coef * y,
            DriverFamily::LinearYU {
                base,
                y_coef,
                u_coef,
            } => base + y_coef * y + u_coef * u.norm_nu(),
            DriverFamily::Custom(f) => f(t, y, u),
        }
    }
}

type TerminalFn = Arc<dyn Fn(&[u32]) -> f64 + Send + Sync>;

/// Terminal payoffs as functions of the per-mark terminal jump counts.
#[derive(Clone)]
pub enum TerminalFamily {
    Constant(f64),
    /// `xi = offset + sum_j weights[j] * N_T(j)`
    CountLinear { weights: Vec<f64>, offset: f64 },
    /// `xi = sum_j weights[j] * (N_T(j) - nu_j T)`; mean zero by construction.
    CountCentered {
        weights: Vec<f64>,
        mean_counts: Vec<f64>,
    },
    Custom(TerminalFn),
}

impl fmt::Debug for TerminalFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalFamily::Constant(c) => write!(f, "Constant({c})"),
            TerminalFamily::CountLinear { weights, offset } => {
                write!(f, "CountLinear {{ weights: {weights:?}, offset: {offset} }}")
            }
            TerminalFamily::CountCentered { weights, .. } => {
                write!(f, "CountCentered {{ weights: {weights:?} }}")
            }
            TerminalFamily::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A bounded terminal condition.
#[derive(Debug, Clone)]
pub struct TerminalSpec {
    pub family: TerminalFamily,
    pub bound_m: f64,
}

impl TerminalSpec {
    pub fn constant(c: f64) -> Self {
        Self {
            family: TerminalFamily::Constant(c),
            bound_m: c.abs(),
        }
    }

    /// Counts are capped by the step count, which bounds the payoff.
    pub fn count_linear(model: &JumpModel, weights: Vec<f64>, offset: f64) -> Result<Self> {
        if weights.len() != model.num_marks() {
            return Err(Error::InvalidConfig(format!(
                "terminal weights: {} entries for {} marks",
                weights.len(),
                model.num_marks()
            )));
        }
        let bound = offset.abs()
            + weights.iter().map(|w| w.abs()).sum::<f64>() * model.steps() as f64;
        Ok(Self {
            family: TerminalFamily::CountLinear { weights, offset },
            bound_m: bound,
        })
    }

    pub fn count_centered(model: &JumpModel, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != model.num_marks() {
            return Err(Error::InvalidConfig(format!(
                "terminal weights: {} entries for {} marks",
                weights.len(),
                model.num_marks()
            )));
        }
        let mean_counts: Vec<f64> = model
            .intensities()
            .iter()
            .map(|nu| nu * model.horizon())
            .collect();
        let bound = weights
            .iter()
            .zip(&mean_counts)
            .map(|(w, m)| w.abs() * (model.steps() as f64).max(*m))
            .sum();
        Ok(Self {
            family: TerminalFamily::CountCentered {
                weights,
                mean_counts,
            },
            bound_m: bound,
        })
    }

    pub fn custom(f: TerminalFn, bound_m: f64) -> Self {
        Self {
            family: TerminalFamily::Custom(f),
            bound_m,
        }
    }

    pub fn evaluate(&self, counts: &[u32]) -> f64 {
        match &self.family {
            TerminalFamily::Constant(c) => *c,
            TerminalFamily::CountLinear { weights, offset } => {
                offset
                    + weights
                        .iter()
                        .zip(counts)
                        .map(|(w, &c)| w * c as f64)
                        .sum::<f64>()
            }
            TerminalFamily::CountCentered {
                weights,
                mean_counts,
            } => weights
                .iter()
                .zip(counts)
                .zip(mean_counts)
                .map(|((w, &c), m)| w * (c as f64 - m))
                .sum(),
            TerminalFamily::Custom(f) => f(counts),
        }
    }

    /// Terminal values per scenario of an ensemble.
    pub fn evaluate_on(&self, ens: &PathEnsemble) -> Vec<f64> {
        (0..ens.n_scenarios())
            .map(|s| self.evaluate(&ens.terminal_counts(s)))
            .collect()
    }
}

/// Controls for the least-squares conditional-expectation backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionConfig {
    /// Polynomial degree in the running jump counts (1 or 2).
    pub degree: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

/// Conditional-expectation backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    /// Node-wise averaging over the exact tree; requires an exact ensemble.
    Exact,
    /// Weighted least-squares projection on polynomial count features.
    Regression(RegressionConfig),
}

impl Backend {
    pub fn regression() -> Self {
        Backend::Regression(RegressionConfig::default())
    }
}

/// Polynomial features of the per-scenario state at one step: intercept,
/// counts per mark, and (degree 2) their pairwise products.
pub(crate) fn count_feature_dim(n_marks: usize, degree: usize) -> usize {
    match degree {
        0 => 1,
        1 => 1 + n_marks,
        _ => 1 + n_marks + n_marks * (n_marks + 1) / 2,
    }
}

pub(crate) fn fill_count_features(
    counts: &CountTable,
    step: usize,
    degree: usize,
    out: &mut Vec<f64>,
    n_scenarios: usize,
) {
    let m = counts.n_marks();
    let dim = count_feature_dim(m, degree);
    out.clear();
    out.reserve(n_scenarios * dim);
    for s in 0..n_scenarios {
        let c = counts.at(step, s);
        out.push(1.0);
        if degree >= 1 {
            for j in 0..m {
                out.push(c[j] as f64);
            }
        }
        if degree >= 2 {
            for a in 0..m {
                for b in a..m {
                    out.push(c[a] as f64 * c[b] as f64);
                }
            }
        }
    }
}

/// Shared state for one backward solve.
pub(crate) struct SolveContext<'a> {
    pub ens: &'a PathEnsemble,
    pub backend: Backend,
    /// Count table, built once for the regression backend.
    counts: Option<CountTable>,
    probs: Vec<f64>,
    feature_buf: Vec<f64>,
}

impl<'a> SolveContext<'a> {
    pub fn new(ens: &'a PathEnsemble, backend: Backend) -> Result<Self> {
        if matches!(backend, Backend::Exact) && !ens.is_exact() {
            return Err(Error::InvalidConfig(
                "exact backend needs an exact-tree ensemble".into(),
            ));
        }
        let counts = match backend {
            Backend::Exact => None,
            Backend::Regression(_) => Some(ens.count_table()),
        };
        Ok(Self {
            ens,
            backend,
            counts,
            probs: step_probs(ens.model()),
            feature_buf: Vec::new(),
        })
    }

    /// One-step conditional expectation of step-(k+1) values.
    pub fn condexp(&mut self, values_next: &[f64], k: usize, warnings: &mut Vec<String>) -> Vec<f64> {
        match self.backend {
            Backend::Exact => exact_condexp(self.ens, &self.probs, values_next, k),
            Backend::Regression(cfg) => {
                let counts = self.counts.as_ref().expect("regression counts");
                let ns = self.ens.n_scenarios();
                fill_count_features(counts, k, cfg.degree, &mut self.feature_buf, ns);
                let dim = count_feature_dim(counts.n_marks(), cfg.degree);
                let fit = regress::weighted_least_squares(
                    &self.feature_buf,
                    dim,
                    values_next,
                    self.ens.weights(),
                );
                if fit.used_ridge {
                    warnings.push(format!(
                        "step {k}: rank-deficient conditional-expectation regression, ridge {} applied",
                        regress::RIDGE_PENALTY
                    ));
                }
                let mut out = vec![0.0; ns];
                regress::predict(&self.feature_buf, dim, &fit.coeffs, &mut out);
                out
            }
        }
    }

    /// Per-mark martingale coefficients at step `k` from step-(k+1) values.
    ///
    /// Exact backend: branch difference against the no-jump branch.
    /// Regression backend: fitted `E_k[v dmu~_j] / (p_j (1 - p_j))`.
    pub fn extract_u(&mut self, values_next: &[f64], k: usize, warnings: &mut Vec<String>) -> Vec<f64> {
        let m = self.ens.model().num_marks();
        let ns = self.ens.n_scenarios();
        match self.backend {
            Backend::Exact => {
                let b = self.ens.branching();
                let n = self.ens.model().steps();
                let child = b.pow((n - k - 1) as u32);
                let block = child * b;
                let mut out = vec![0.0; ns * m];
                let mut start = 0;
                while start < ns {
                    let base = values_next[start];
                    for j in 0..m {
                        let diff = values_next[start + (j + 1) * child] - base;
                        for s in start..start + block {
                            out[s * m + j] = diff;
                        }
                    }
                    start += block;
                }
                out
            }
            Backend::Regression(cfg) => {
                let counts = self.counts.as_ref().expect("regression counts");
                fill_count_features(counts, k, cfg.degree, &mut self.feature_buf, ns);
                let dim = count_feature_dim(m, cfg.degree);
                let model = self.ens.model();
                let mut out = vec![0.0; ns * m];
                let mut targets = vec![0.0; ns];
                let mut fitted = vec![0.0; ns];
                for j in 0..m {
                    let p_j = model.intensities()[j] * model.dt();
                    if p_j == 0.0 {
                        continue;
                    }
                    for s in 0..ns {
                        let inc = model.compensated_increment(self.ens.outcome(s, k), j);
                        targets[s] = values_next[s] * inc;
                    }
                    let fit = regress::weighted_least_squares(
                        &self.feature_buf,
                        dim,
                        &targets,
                        self.ens.weights(),
                    );
                    if fit.used_ridge {
                        warnings.push(format!(
                            "step {k}, mark {j}: rank-deficient martingale regression, ridge {} applied",
                            regress::RIDGE_PENALTY
                        ));
                    }
                    regress::predict(&self.feature_buf, dim, &fit.coeffs, &mut fitted);
                    let scale = 1.0 / (p_j * (1.0 - p_j));
                    for s in 0..ns {
                        out[s * m + j] = fitted[s] * scale;
                    }
                }
                out
            }
        }
    }
}

fn exact_condexp(ens: &PathEnsemble, probs: &[f64], values_next: &[f64], k: usize) -> Vec<f64> {
    let b = ens.branching();
    let n = ens.model().steps();
    let ns = ens.n_scenarios();
    let child = b.pow((n - k - 1) as u32);
    let block = child * b;
    let mut out = vec![0.0; ns];
    let mut start = 0;
    while start < ns {
        let mut v = 0.0;
        for (d, p) in probs.iter().enumerate() {
            v += p * values_next[start + d * child];
        }
        out[start..start + block].fill(v);
        start += block;
    }
    out
}

/// Public one-step conditional expectation (convenience wrapper).
pub fn conditional_expectation(
    ens: &PathEnsemble,
    values_next: &[f64],
    step: usize,
    backend: Backend,
) -> Result<Vec<f64>> {
    let mut warnings = Vec::new();
    let mut ctx = SolveContext::new(ens, backend)?;
    Ok(ctx.condexp(values_next, step, &mut warnings))
}

/// Public one-step martingale-coefficient extraction.
pub fn extract_u(
    ens: &PathEnsemble,
    values_next: &[f64],
    step: usize,
    backend: Backend,
) -> Result<Vec<f64>> {
    let mut warnings = Vec::new();
    let mut ctx = SolveContext::new(ens, backend)?;
    Ok(ctx.extract_u(values_next, step, &mut warnings))
}

/// How the driver's `y` argument is supplied during the backward sweep.
pub(crate) enum YMode<'a> {
    /// Use the step's own `y_k`, solved by damped fixed-point iteration.
    SelfImplicit,
    /// Evaluate at a frozen adapted process (full-grid rows).
    Frozen(&'a AdaptedProcess),
}

const IMPLICIT_MAX_ITERS: usize = 100;

/// Backward sweep over grid rows `k_lo..=k_hi`, writing into full-grid
/// buffers. `terminal_values` become row `k_hi`.
pub(crate) fn solve_range(
    ctx: &mut SolveContext,
    driver: &DriverSpec,
    ymode: &YMode,
    terminal_values: &[f64],
    k_lo: usize,
    k_hi: usize,
    y_out: &mut AdaptedProcess,
    u_out: &mut PredictableField,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let ens = ctx.ens;
    let model = ens.model().clone();
    let ns = ens.n_scenarios();
    let m = model.num_marks();
    let dt = model.dt();
    assert_eq!(terminal_values.len(), ns);
    y_out.step_mut(k_hi).copy_from_slice(terminal_values);

    for k in (k_lo..k_hi).rev() {
        let values_next = y_out.step(k + 1).to_vec();
        let u_k = ctx.extract_u(&values_next, k, warnings);
        let cond = ctx.condexp(&values_next, k, warnings);
        let t_k = model.time(k);
        let row = y_out.step_mut(k);
        for s in 0..ns {
            let marks = MarkVector {
                values: &u_k[s * m..(s + 1) * m],
                intensities: model.intensities(),
            };
            let e = cond[s];
            let y = match ymode {
                YMode::Frozen(p) => e + driver.evaluate(t_k, p.value(k, s), &marks) * dt,
                YMode::SelfImplicit => {
                    if !driver.depends_on_y {
                        e + driver.evaluate(t_k, 0.0, &marks) * dt
                    } else {
                        implicit_y_step(driver, t_k, e, &marks, dt)?
                    }
                }
            };
            row[s] = y;
        }
        u_out.step_mut(k).copy_from_slice(&u_k);
    }
    Ok(())
}

/// Solve `y = e + f(t, y, u) dt` by damped fixed-point iteration.
fn implicit_y_step(driver: &DriverSpec, t: f64, e: f64, u: &MarkVector, dt: f64) -> Result<f64> {
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

/// Solution of the unreflected equation.
#[derive(Debug, Clone)]
pub struct BsdejSolution {
    pub y: AdaptedProcess,
    pub u: PredictableField,
    pub warnings: Vec<String>,
}

/// Solve the unreflected equation over the whole grid.
///
/// With `frozen` supplied, the driver's `y` argument is read from that
/// process; otherwise a `y`-dependent driver is handled implicitly.
pub fn solve_bsdej(
    ens: &PathEnsemble,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    frozen: Option<&AdaptedProcess>,
    backend: Backend,
) -> Result<BsdejSolution> {
    let n = ens.model().steps();
    let ns = ens.n_scenarios();
    let m = ens.model().num_marks();
    let terminal_values = terminal.evaluate_on(ens);
    let mut y = AdaptedProcess::zeros(n, ns);
    let mut u = PredictableField::zeros(n, ns, m);
    let mut warnings = Vec::new();
    let mut ctx = SolveContext::new(ens, backend)?;
    let ymode = match frozen {
        Some(p) => YMode::Frozen(p),
        None => YMode::SelfImplicit,
    };
    solve_range(
        &mut ctx,
        driver,
        &ymode,
        &terminal_values,
        0,
        n,
        &mut y,
        &mut u,
        &mut warnings,
    )?;
    Ok(BsdejSolution { y, u, warnings })
}
