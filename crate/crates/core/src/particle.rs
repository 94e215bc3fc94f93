//! The `N`-particle approximation.
//!
//! With independent driver copies, the empirical reflection process
//!
//! ```text
//! psi_k = inf { x >= 0 : (1/N) sum_i l(t_k, x + y_k^i) >= 0 }
//! ```
//!
//! is computed node-wise from the per-particle conditional-expectation
//! processes `y^i`. Backward dynamic programming gives its Snell envelope
//! `S_n = psi_n`, `S_k = max(psi_k, E_k[S_{k+1}])`, whose Doob decomposition
//! `dK_k = S_k - E_k[S_{k+1}] >= 0` yields the shared nondecreasing `K` with
//! `K_0 = 0`, and the solution is `Y^i = y^i + S`.
//!
//! A driver that reads `(Y^i, U^{i,i})` is frozen at the previous iterate and
//! the whole construction rerun until the reflected iterates settle, on
//! subintervals when the horizon is too long for the map to contract.

use rayon::prelude::*;

use crate::bsdej::{
    count_feature_dim, fill_count_features, Backend, DriverSpec, MarkVector, TerminalSpec,
};
use crate::error::{Error, Result};
use crate::jump_model::{CountTable, MultiEnsemble};
use crate::loss::{self, LossSpec, RootConfig};
use crate::mean_reflected::PicardRecord;
use crate::process::{AdaptedProcess, PredictableField};
use crate::regress;

/// Full martingale-coefficient matrix `U^{i,j}` (per mark of measure `j`),
/// materialised on exact trees only.
#[derive(Debug, Clone)]
pub struct ParticleU {
    n_particles: usize,
    /// Index `i * n_particles + j`.
    per_pair: Vec<PredictableField>,
}

impl ParticleU {
    pub fn field(&self, i: usize, j: usize) -> &PredictableField {
        &self.per_pair[i * self.n_particles + j]
    }

    pub fn value(&self, i: usize, j: usize, k: usize, scenario: usize, mark: usize) -> f64 {
        self.field(i, j).value(k, scenario, mark)
    }
}

/// Diagnostics of one particle-system solve.
#[derive(Debug, Clone, Default)]
pub struct ParticleDiagnostics {
    /// Per step: worst empirical constraint margin over scenarios.
    pub constraint_margin: Vec<f64>,
    pub min_constraint_margin: f64,
    /// Ensemble mean of the per-scenario Skorokhod sums.
    pub skorokhod_residual: f64,
    /// Largest terminal reflection amount over scenarios: zero under
    /// empirical terminal feasibility, positive on unlucky draws.
    pub terminal_psi_max: f64,
    pub picard: Vec<PicardRecord>,
    pub warnings: Vec<String>,
}

/// Flat solution of the particle system.
///
/// `y[i]` is the unreflected per-particle process; the solution component is
/// `Y^i = y^i + S`, see [`ParticleSolution::reflected`].
#[derive(Debug, Clone)]
pub struct ParticleSolution {
    pub y: Vec<AdaptedProcess>,
    pub psi: AdaptedProcess,
    pub s: AdaptedProcess,
    /// Shared nondecreasing `K` per scenario, `K_0 = 0`.
    pub k: AdaptedProcess,
    pub u: Option<ParticleU>,
    pub diagnostics: ParticleDiagnostics,
}

impl ParticleSolution {
    pub fn n_particles(&self) -> usize {
        self.y.len()
    }

    pub fn reflected_value(&self, particle: usize, step: usize, scenario: usize) -> f64 {
        self.y[particle].value(step, scenario) + self.s.value(step, scenario)
    }

    /// The solution component `Y^i = y^i + S`.
    pub fn reflected(&self, particle: usize) -> AdaptedProcess {
        let n = self.s.n_steps();
        let ns = self.s.n_scenarios();
        let mut out = AdaptedProcess::zeros(n, ns);
        for k in 0..=n {
            for s in 0..ns {
                out.set_value(k, s, self.reflected_value(particle, k, s));
            }
        }
        out
    }
}

/// Per-step feature matrices for the regression backend.
#[derive(Debug, Clone)]
pub struct StepFeatureTable {
    n_scenarios: usize,
    dim: usize,
    /// `(n_steps + 1) * n_scenarios * dim`, step-major, scenario rows.
    data: Vec<f64>,
}

impl StepFeatureTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, step: usize) -> &[f64] {
        let w = self.n_scenarios * self.dim;
        &self.data[step * w..(step + 1) * w]
    }
}

/// Snell regression basis: `{1, mean_i y^i, mean_i l(t, y^i), mean_i (y^i)^2}`
/// per (step, scenario).
pub fn snell_feature_table(
    multi: &MultiEnsemble,
    loss: &LossSpec,
    y: &[AdaptedProcess],
) -> StepFeatureTable {
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let inv_n = 1.0 / y.len() as f64;
    let dim = 4;
    let mut data = vec![0.0; (n + 1) * ns * dim];
    for k in 0..=n {
        let t = multi.model().time(k);
        for s in 0..ns {
            let mut mean = 0.0;
            let mut mean_l = 0.0;
            let mut mean_sq = 0.0;
            for proc in y {
                let v = proc.value(k, s);
                mean += v;
                mean_l += loss.evaluate(t, v);
                mean_sq += v * v;
            }
            let base = (k * ns + s) * dim;
            data[base] = 1.0;
            data[base + 1] = mean * inv_n;
            data[base + 2] = mean_l * inv_n;
            data[base + 3] = mean_sq * inv_n;
        }
    }
    StepFeatureTable {
        n_scenarios: ns,
        dim,
        data,
    }
}

/// Previous fixed-point iterate, read when freezing the driver and when
/// building regression features.
struct PrevIterate<'a> {
    y: &'a [AdaptedProcess],
    s: &'a AdaptedProcess,
    /// Diagonal coefficients `U^{i,i}` of the previous iterate; present only
    /// when the driver reads `u`.
    diag_u: Option<&'a [PredictableField]>,
}

impl PrevIterate<'_> {
    fn reflected(&self, particle: usize, k: usize, scenario: usize) -> f64 {
        self.y[particle].value(k, scenario) + self.s.value(k, scenario)
    }
}

/// Exchangeable state extras shared by all per-particle regressions:
/// mean counts per mark, their squares, and (when a previous iterate exists)
/// mean / mean-square / mean-loss of the frozen reflected values.
fn empirical_state_extras(
    multi: &MultiEnsemble,
    loss: &LossSpec,
    prev: Option<&PrevIterate>,
) -> StepFeatureTable {
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let m = multi.model().num_marks();
    let n_particles = multi.n_particles();
    let inv_n = 1.0 / n_particles as f64;
    let dim = 2 * m + if prev.is_some() { 3 } else { 0 };
    let mut data = vec![0.0; (n + 1) * ns * dim];
    let tables: Vec<CountTable> = (0..n_particles).map(|i| multi.count_table(i)).collect();
    for k in 0..=n {
        let t = multi.model().time(k);
        for s in 0..ns {
            let base = (k * ns + s) * dim;
            for j in 0..m {
                let mean_c = tables
                    .iter()
                    .map(|tab| tab.value(k, s, j) as f64)
                    .sum::<f64>()
                    * inv_n;
                data[base + 2 * j] = mean_c;
                data[base + 2 * j + 1] = mean_c * mean_c;
            }
            if let Some(prev) = prev {
                let mut mean = 0.0;
                let mut mean_sq = 0.0;
                let mut mean_l = 0.0;
                for i in 0..n_particles {
                    let v = prev.reflected(i, k, s);
                    mean += v;
                    mean_sq += v * v;
                    mean_l += loss.evaluate(t, v);
                }
                data[base + 2 * m] = mean * inv_n;
                data[base + 2 * m + 1] = mean_sq * inv_n;
                data[base + 2 * m + 2] = mean_l * inv_n;
            }
        }
    }
    StepFeatureTable {
        n_scenarios: ns,
        dim,
        data,
    }
}

/// Exact joint-tree one-step conditional expectation.
///
/// Terms are summed in sorted order so the node value does not depend on how
/// particles are labelled (exchangeability holds bitwise).
pub(crate) fn joint_condexp_exact(
    multi: &MultiEnsemble,
    branch_probs: &[f64],
    values_next: &[f64],
    k: usize,
) -> Vec<f64> {
    let b = multi.joint_branching();
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let child = b.pow((n - k - 1) as u32);
    let block = child * b;
    let mut out = vec![0.0; ns];
    let mut terms = vec![0.0; b];
    let mut start = 0;
    while start < ns {
        for (d, p) in branch_probs.iter().enumerate() {
            terms[d] = p * values_next[start + d * child];
        }
        terms.sort_by(f64::total_cmp);
        let v: f64 = terms.iter().sum();
        out[start..start + block].fill(v);
        start += block;
    }
    out
}

/// Exact two-branch extraction against measure `measure`: value difference
/// between "particle `measure` jumps mark e, everyone else idle" and the
/// all-idle branch.
pub(crate) fn joint_extract_exact(
    multi: &MultiEnsemble,
    values_next: &[f64],
    k: usize,
    measure: usize,
) -> Vec<f64> {
    let b = multi.joint_branching();
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let m = multi.model().num_marks();
    let child = b.pow((n - k - 1) as u32);
    let block = child * b;
    let mut out = vec![0.0; ns * m];
    let mut start = 0;
    while start < ns {
        let base = values_next[start];
        for e in 0..m {
            let digit = multi.lone_joint_digit(measure, e as u8 + 1);
            let diff = values_next[start + digit * child] - base;
            for s in start..start + block {
                out[s * m + e] = diff;
            }
        }
        start += block;
    }
    out
}

/// Regression one-step conditional expectation over given features.
fn condexp_regression(
    features: &[f64],
    dim: usize,
    values_next: &[f64],
    weights: &[f64],
    label: &str,
    warnings: &mut Vec<String>,
) -> Vec<f64> {
    let fit = regress::weighted_least_squares(features, dim, values_next, weights);
    if fit.used_ridge {
        warnings.push(format!(
            "{label}: rank-deficient regression, ridge {} applied",
            regress::RIDGE_PENALTY
        ));
    }
    let mut out = vec![0.0; weights.len()];
    regress::predict(features, dim, &fit.coeffs, &mut out);
    out
}

/// Regression extraction against `measure`: fitted
/// `E_k[v dmu~^measure_e] / (p_e (1 - p_e))` per mark.
#[allow(clippy::too_many_arguments)]
pub(crate) fn joint_extract_regression(
    multi: &MultiEnsemble,
    values_next: &[f64],
    k: usize,
    measure: usize,
    features: &[f64],
    dim: usize,
    label: &str,
    warnings: &mut Vec<String>,
) -> Vec<f64> {
    let model = multi.model();
    let m = model.num_marks();
    let ns = multi.n_scenarios();
    let dt = model.dt();
    let mut out = vec![0.0; ns * m];
    let mut targets = vec![0.0; ns];
    let mut fitted = vec![0.0; ns];
    for e in 0..m {
        let p = model.intensities()[e] * dt;
        if p == 0.0 {
            continue;
        }
        for s in 0..ns {
            let inc = model.compensated_increment(multi.outcome(measure, s, k), e);
            targets[s] = values_next[s] * inc;
        }
        let fit = regress::weighted_least_squares(features, dim, &targets, multi.weights());
        if fit.used_ridge {
            warnings.push(format!(
                "{label}: rank-deficient martingale regression, ridge {} applied",
                regress::RIDGE_PENALTY
            ));
        }
        regress::predict(features, dim, &fit.coeffs, &mut fitted);
        let scale = 1.0 / (p * (1.0 - p));
        for s in 0..ns {
            out[s * m + e] = fitted[s] * scale;
        }
    }
    out
}

/// Per-particle feature matrix at one step: own count polynomials followed by
/// the shared exchangeable extras.
pub(crate) fn assemble_particle_features(
    counts: &CountTable,
    step: usize,
    degree: usize,
    extras: &StepFeatureTable,
    ns: usize,
    buf: &mut Vec<f64>,
) -> usize {
    let m = counts.n_marks();
    let own_dim = count_feature_dim(m, degree);
    let dim = own_dim + extras.dim;
    let mut own = Vec::new();
    fill_count_features(counts, step, degree, &mut own, ns);
    let extra_row = extras.row(step);
    buf.clear();
    buf.reserve(ns * dim);
    for s in 0..ns {
        buf.extend_from_slice(&own[s * own_dim..(s + 1) * own_dim]);
        buf.extend_from_slice(&extra_row[s * extras.dim..(s + 1) * extras.dim]);
    }
    dim
}

/// How the frozen driver is evaluated during one sweep.
struct FrozenDriver<'a> {
    driver: &'a DriverSpec,
    prev: Option<&'a PrevIterate<'a>>,
}

impl FrozenDriver<'_> {
    fn eval(&self, particle: usize, t: f64, k: usize, scenario: usize, intensities: &[f64]) -> f64 {
        let zero = vec![0.0; intensities.len()];
        match self.prev {
            None => {
                let marks = MarkVector {
                    values: &zero,
                    intensities,
                };
                self.driver.evaluate(t, 0.0, &marks)
            }
            Some(prev) => {
                let p = prev.reflected(particle, k, scenario);
                match prev.diag_u {
                    Some(diag) => {
                        let marks = MarkVector {
                            values: diag[particle].marks_at(k, scenario),
                            intensities,
                        };
                        self.driver.evaluate(t, p, &marks)
                    }
                    None => {
                        let marks = MarkVector {
                            values: &zero,
                            intensities,
                        };
                        self.driver.evaluate(t, p, &marks)
                    }
                }
            }
        }
    }
}

/// Backward sweep of one particle's `y^i` over `k_lo..=k_hi` with a frozen
/// driver; optionally extracts the own-measure coefficients along the way.
#[allow(clippy::too_many_arguments)]
fn particle_y_sweep(
    multi: &MultiEnsemble,
    backend: Backend,
    branch_probs: &[f64],
    particle: usize,
    frozen: &FrozenDriver,
    terminal_values: &[f64],
    k_lo: usize,
    k_hi: usize,
    extras: Option<&StepFeatureTable>,
    y_out: &mut AdaptedProcess,
    mut diag_u_out: Option<&mut PredictableField>,
    warnings: &mut Vec<String>,
) {
    let model = multi.model();
    let ns = multi.n_scenarios();
    let m = model.num_marks();
    let dt = model.dt();
    y_out.step_mut(k_hi).copy_from_slice(terminal_values);

    let counts = match backend {
        Backend::Exact => None,
        Backend::Regression(_) => Some(multi.count_table(particle)),
    };
    let mut feature_buf = Vec::new();

    for k in (k_lo..k_hi).rev() {
        let values_next = y_out.step(k + 1).to_vec();
        let (cond, u_k) = match backend {
            Backend::Exact => {
                let cond = joint_condexp_exact(multi, branch_probs, &values_next, k);
                let u_k = if diag_u_out.is_some() {
                    Some(joint_extract_exact(multi, &values_next, k, particle))
                } else {
                    None
                };
                (cond, u_k)
            }
            Backend::Regression(cfg) => {
                let counts = counts.as_ref().expect("count table");
                let extras = extras.expect("feature extras");
                let dim = assemble_particle_features(
                    counts,
                    k,
                    cfg.degree,
                    extras,
                    ns,
                    &mut feature_buf,
                );
                let cond = condexp_regression(
                    &feature_buf,
                    dim,
                    &values_next,
                    multi.weights(),
                    &format!("particle {particle} step {k}"),
                    warnings,
                );
                let u_k = if diag_u_out.is_some() {
                    Some(joint_extract_regression(
                        multi,
                        &values_next,
                        k,
                        particle,
                        &feature_buf,
                        dim,
                        &format!("particle {particle} step {k} own measure"),
                        warnings,
                    ))
                } else {
                    None
                };
                (cond, u_k)
            }
        };
        let t_k = model.time(k);
        let row = y_out.step_mut(k);
        for s in 0..ns {
            row[s] = cond[s] + frozen.eval(particle, t_k, k, s, model.intensities()) * dt;
        }
        if let (Some(field), Some(u_k)) = (diag_u_out.as_deref_mut(), u_k) {
            for s in 0..ns {
                for e in 0..m {
                    field.set_value(k, s, e, u_k[s * m + e]);
                }
            }
        }
    }
}

/// Node-wise empirical reflection process over the per-particle values.
///
/// Terminal feasibility is not forced: on unlucky Monte Carlo draws `psi` at
/// the last step may be positive and is reported as-is.
pub fn psi_process(
    multi: &MultiEnsemble,
    loss: &LossSpec,
    y: &[AdaptedProcess],
    root_cfg: &RootConfig,
) -> Result<AdaptedProcess> {
    psi_range(multi, loss, y, root_cfg, 0, multi.model().steps())
}

fn psi_range(
    multi: &MultiEnsemble,
    loss: &LossSpec,
    y: &[AdaptedProcess],
    root_cfg: &RootConfig,
    k_lo: usize,
    k_hi: usize,
) -> Result<AdaptedProcess> {
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let mut psi = AdaptedProcess::zeros(n, ns);
    let rows: Vec<(usize, Result<Vec<f64>>)> = (k_lo..=k_hi)
        .into_par_iter()
        .map(|k| {
            let t = multi.model().time(k);
            let mut row = vec![0.0; ns];
            let mut values = vec![0.0; y.len()];
            for s in 0..ns {
                for (i, proc) in y.iter().enumerate() {
                    values[i] = proc.value(k, s);
                }
                match loss::empirical_l_operator(loss, t, &values, root_cfg) {
                    Ok(v) => row[s] = v,
                    Err(e) => return (k, Err(e)),
                }
            }
            (k, Ok(row))
        })
        .collect();
    for (k, row) in rows {
        psi.step_mut(k).copy_from_slice(&row?);
    }
    Ok(psi)
}

/// Backward dynamic programming for the Snell envelope and its Doob
/// decomposition.
///
/// Returns `(S, K)` with `S_n = psi_n`, `S_k = max(psi_k, E_k[S_{k+1}])` and
/// `K` accumulated from zero through `dK_k = S_k - E_k[S_{k+1}]`. The
/// regression backend needs a feature table (see [`snell_feature_table`]).
pub fn snell_envelope(
    multi: &MultiEnsemble,
    psi: &AdaptedProcess,
    backend: Backend,
    features: Option<&StepFeatureTable>,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    let mut warnings = Vec::new();
    snell_range(
        multi,
        psi,
        backend,
        features,
        0,
        multi.model().steps(),
        &mut warnings,
    )
}

fn snell_range(
    multi: &MultiEnsemble,
    psi: &AdaptedProcess,
    backend: Backend,
    features: Option<&StepFeatureTable>,
    k_lo: usize,
    k_hi: usize,
    warnings: &mut Vec<String>,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    if matches!(backend, Backend::Exact) && !multi.is_exact() {
        return Err(Error::InvalidConfig(
            "exact backend needs an exact joint tree".into(),
        ));
    }
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let branch_probs = if multi.is_exact() {
        multi.joint_branch_probs()
    } else {
        Vec::new()
    };
    let mut s_proc = AdaptedProcess::zeros(n, ns);
    let mut k_proc = AdaptedProcess::zeros(n, ns);
    s_proc.step_mut(k_hi).copy_from_slice(psi.step(k_hi));
    let mut dk = vec![vec![0.0; ns]; k_hi - k_lo];
    for k in (k_lo..k_hi).rev() {
        let values_next = s_proc.step(k + 1).to_vec();
        let cond = match backend {
            Backend::Exact => joint_condexp_exact(multi, &branch_probs, &values_next, k),
            Backend::Regression(_) => {
                let feats = features.ok_or_else(|| {
                    Error::InvalidConfig("snell regression backend needs a feature table".into())
                })?;
                let row = feats.row(k);
                condexp_regression(
                    row,
                    feats.dim,
                    &values_next,
                    multi.weights(),
                    &format!("snell step {k}"),
                    warnings,
                )
            }
        };
        let psi_row = psi.step(k);
        let s_row = s_proc.step_mut(k);
        for s in 0..ns {
            let c = cond[s];
            let v = psi_row[s].max(c);
            s_row[s] = v;
            dk[k - k_lo][s] = v - c;
        }
    }
    for k in k_lo..k_hi {
        for s in 0..ns {
            let prev = k_proc.value(k, s);
            k_proc.set_value(k + 1, s, prev + dk[k - k_lo][s]);
        }
    }
    Ok((s_proc, k_proc))
}

/// Budget guard for materialising the full `U^{i,j}` matrix.
fn materialise_u(multi: &MultiEnsemble) -> bool {
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let np = multi.n_particles();
    let m = multi.model().num_marks().max(1);
    multi.is_exact() && np * np * n * ns * m <= (1 << 22)
}

/// Extract the full coefficient matrix from the reflected values on an exact
/// tree: `U^{i,j}_k = extract(Y^i_{k+1}, measure j)`.
fn extract_full_u(
    multi: &MultiEnsemble,
    y: &[AdaptedProcess],
    s_proc: &AdaptedProcess,
) -> ParticleU {
    let n = multi.model().steps();
    let ns = multi.n_scenarios();
    let m = multi.model().num_marks();
    let np = multi.n_particles();
    let mut per_pair = vec![PredictableField::zeros(n, ns, m); np * np];
    for i in 0..np {
        let mut refl = AdaptedProcess::zeros(n, ns);
        for k in 0..=n {
            for s in 0..ns {
                refl.set_value(k, s, y[i].value(k, s) + s_proc.value(k, s));
            }
        }
        for k in 0..n {
            let next = refl.step(k + 1).to_vec();
            for j in 0..np {
                let coeffs = joint_extract_exact(multi, &next, k, j);
                let field = &mut per_pair[i * np + j];
                for s in 0..ns {
                    for e in 0..m {
                        field.set_value(k, s, e, coeffs[s * m + e]);
                    }
                }
            }
        }
    }
    ParticleU {
        n_particles: np,
        per_pair,
    }
}

struct IntervalOut {
    /// Local K rows `k_lo..=k_hi`, zero at `k_lo`.
    k_local: AdaptedProcess,
}

/// Solve one interval with a fully frozen driver: per-particle sweeps, the
/// empirical reflection, and the Snell envelope.
#[allow(clippy::too_many_arguments)]
fn solve_interval_frozen(
    multi: &MultiEnsemble,
    backend: Backend,
    loss: &LossSpec,
    root_cfg: &RootConfig,
    frozen: &FrozenDriver,
    terminal_values: &[Vec<f64>],
    k_lo: usize,
    k_hi: usize,
    extras: Option<&StepFeatureTable>,
    branch_probs: &[f64],
    want_diag_u: bool,
    y_out: &mut [AdaptedProcess],
    psi_out: &mut AdaptedProcess,
    s_out: &mut AdaptedProcess,
    diag_u_out: Option<&mut Vec<PredictableField>>,
    warnings: &mut Vec<String>,
) -> Result<IntervalOut> {
    let np = multi.n_particles();
    let ns = multi.n_scenarios();

    // per-particle backward sweeps, canonical order restored by index
    let sweeps: Vec<(AdaptedProcess, Option<PredictableField>, Vec<String>)> = (0..np)
        .into_par_iter()
        .map(|i| {
            let mut y_local = y_out[i].clone();
            let mut warn = Vec::new();
            let mut diag = if want_diag_u {
                Some(PredictableField::zeros(
                    multi.model().steps(),
                    ns,
                    multi.model().num_marks(),
                ))
            } else {
                None
            };
            particle_y_sweep(
                multi,
                backend,
                branch_probs,
                i,
                frozen,
                &terminal_values[i],
                k_lo,
                k_hi,
                extras,
                &mut y_local,
                diag.as_mut(),
                &mut warn,
            );
            (y_local, diag, warn)
        })
        .collect();
    let mut diag_fields = Vec::with_capacity(np);
    for (i, (y_local, diag, warn)) in sweeps.into_iter().enumerate() {
        y_out[i] = y_local;
        diag_fields.push(diag);
        warnings.extend(warn);
    }

    let psi = psi_range(multi, loss, y_out, root_cfg, k_lo, k_hi)?;
    for k in k_lo..=k_hi {
        psi_out.step_mut(k).copy_from_slice(psi.step(k));
    }

    let snell_feats = match backend {
        Backend::Exact => None,
        Backend::Regression(_) => Some(snell_feature_table(multi, loss, y_out)),
    };
    let (s_local, k_local) = snell_range(
        multi,
        &psi,
        backend,
        snell_feats.as_ref(),
        k_lo,
        k_hi,
        warnings,
    )?;
    for k in k_lo..=k_hi {
        s_out.step_mut(k).copy_from_slice(s_local.step(k));
    }
    if let Some(out) = diag_u_out {
        *out = diag_fields.into_iter().map(|d| d.unwrap()).collect();
    }
    Ok(IntervalOut { k_local })
}

/// Flat solution when the driver reads neither `y` nor `u` (an `f(t)`
/// process): single construction, no iteration.
pub fn solve_particles_constant(
    multi: &MultiEnsemble,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    loss: &LossSpec,
    backend: Backend,
    root_cfg: &RootConfig,
) -> Result<ParticleSolution> {
    if driver.depends_on_y || driver.depends_on_u {
        return Err(Error::InvalidConfig(
            "solve_particles_constant needs a driver independent of (y, u)".into(),
        ));
    }
    let picard = crate::mean_reflected::PicardConfig::single_interval(multi.model().steps());
    solve_particles(multi, driver, terminal, loss, &picard, backend, root_cfg)
}

/// Flat solution for a general Lipschitz driver: freeze `(Y, U)` at the
/// previous iterate, rebuild, and repeat per stitched interval.
pub fn solve_particles(
    multi: &MultiEnsemble,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    loss: &LossSpec,
    picard: &crate::mean_reflected::PicardConfig,
    backend: Backend,
    root_cfg: &RootConfig,
) -> Result<ParticleSolution> {
    if matches!(backend, Backend::Exact) && !multi.is_exact() {
        return Err(Error::InvalidConfig(
            "exact backend needs an exact joint tree".into(),
        ));
    }
    let model = multi.model();
    let n = model.steps();
    let ns = multi.n_scenarios();
    let np = multi.n_particles();
    let needs_iteration = driver.depends_on_y || driver.depends_on_u;
    let branch_probs = if multi.is_exact() {
        multi.joint_branch_probs()
    } else {
        Vec::new()
    };

    let mut y: Vec<AdaptedProcess> = vec![AdaptedProcess::zeros(n, ns); np];
    let mut psi = AdaptedProcess::zeros(n, ns);
    let mut s_proc = AdaptedProcess::zeros(n, ns);
    let mut warnings = Vec::new();
    let mut picard_log = Vec::new();

    let mut terminal_values: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            (0..ns)
                .map(|s| terminal.evaluate(&multi.terminal_counts(i, s)))
                .collect()
        })
        .collect();

    let mut locals: Vec<(usize, usize, AdaptedProcess)> = Vec::new();
    let step_len = picard.interval_steps.max(1);
    let mut k_hi = n;
    let mut interval = 0usize;
    while k_hi > 0 {
        let k_lo = k_hi.saturating_sub(step_len);
        if !needs_iteration {
            let extras = match backend {
                Backend::Exact => None,
                Backend::Regression(_) => Some(empirical_state_extras(multi, loss, None)),
            };
            let out = solve_interval_frozen(
                multi,
                backend,
                loss,
                root_cfg,
                &FrozenDriver { driver, prev: None },
                &terminal_values,
                k_lo,
                k_hi,
                extras.as_ref(),
                &branch_probs,
                false,
                &mut y,
                &mut psi,
                &mut s_proc,
                None,
                &mut warnings,
            )?;
            locals.push((k_lo, k_hi, out.k_local));
            picard_log.push(PicardRecord {
                interval,
                iteration: 1,
                delta: 0.0,
                ratio: None,
            });
        } else {
            let mut prev_y: Option<Vec<AdaptedProcess>> = None;
            let mut prev_s: Option<AdaptedProcess> = None;
            let mut prev_diag: Option<Vec<PredictableField>> = None;
            let mut prev_delta: Option<f64> = None;
            let mut deltas = Vec::new();
            let mut converged = None;
            for iteration in 1..=picard.max_iters {
                let prev_iterate = prev_y.as_ref().map(|py| PrevIterate {
                    y: py,
                    s: prev_s.as_ref().unwrap(),
                    diag_u: prev_diag.as_deref(),
                });
                let extras = match backend {
                    Backend::Exact => None,
                    Backend::Regression(_) => {
                        Some(empirical_state_extras(multi, loss, prev_iterate.as_ref()))
                    }
                };
                let mut diag_out: Vec<PredictableField> = Vec::new();
                let out = solve_interval_frozen(
                    multi,
                    backend,
                    loss,
                    root_cfg,
                    &FrozenDriver {
                        driver,
                        prev: prev_iterate.as_ref(),
                    },
                    &terminal_values,
                    k_lo,
                    k_hi,
                    extras.as_ref(),
                    &branch_probs,
                    driver.depends_on_u,
                    &mut y,
                    &mut psi,
                    &mut s_proc,
                    if driver.depends_on_u {
                        Some(&mut diag_out)
                    } else {
                        None
                    },
                    &mut warnings,
                )?;
                // sup distance of the reflected iterates over the open rows
                let mut delta = 0.0_f64;
                for k in k_lo..k_hi {
                    for s in 0..ns {
                        let s_val = s_proc.value(k, s);
                        for (i, proc) in y.iter().enumerate() {
                            let cur = proc.value(k, s) + s_val;
                            let old = prev_y
                                .as_ref()
                                .map(|py| py[i].value(k, s) + prev_s.as_ref().unwrap().value(k, s))
                                .unwrap_or(0.0);
                            delta = delta.max((cur - old).abs());
                        }
                    }
                }
                picard_log.push(PicardRecord {
                    interval,
                    iteration,
                    delta,
                    ratio: prev_delta.map(|d| if d > 0.0 { delta / d } else { 0.0 }),
                });
                deltas.push(delta);
                prev_y = Some(y.clone());
                prev_s = Some(s_proc.clone());
                prev_diag = if driver.depends_on_u {
                    Some(diag_out)
                } else {
                    None
                };
                if delta <= picard.tol_fixed_point {
                    converged = Some(out);
                    break;
                }
                prev_delta = Some(delta);
            }
            match converged {
                Some(out) => locals.push((k_lo, k_hi, out.k_local)),
                None => {
                    return Err(Error::PicardDiverged {
                        iters: picard.max_iters,
                        history: deltas,
                    })
                }
            }
        }
        // restart: reflected values at the interval's left edge
        for (i, term) in terminal_values.iter_mut().enumerate() {
            for (s, v) in term.iter_mut().enumerate() {
                *v = y[i].value(k_lo, s) + s_proc.value(k_lo, s);
            }
        }
        k_hi = k_lo;
        interval += 1;
    }

    // assemble K with per-scenario offsets, left to right
    locals.sort_by_key(|(k_lo, _, _)| *k_lo);
    let mut k_proc = AdaptedProcess::zeros(n, ns);
    let mut offsets = vec![0.0; ns];
    for (k_lo, k_hi, local) in &locals {
        for k in *k_lo..=*k_hi {
            for s in 0..ns {
                k_proc.set_value(k, s, offsets[s] + local.value(k, s));
            }
        }
        for (s, off) in offsets.iter_mut().enumerate() {
            *off += local.value(*k_hi, s);
        }
    }

    let u = if materialise_u(multi) {
        Some(extract_full_u(multi, &y, &s_proc))
    } else {
        None
    };

    let mut sol = ParticleSolution {
        y,
        psi,
        s: s_proc,
        k: k_proc,
        u,
        diagnostics: ParticleDiagnostics {
            picard: picard_log,
            warnings,
            ..Default::default()
        },
    };
    finish_particle_diagnostics(&mut sol, loss, multi);
    Ok(sol)
}

/// Ensemble mean of the per-scenario discrete Skorokhod sums
/// `sum_k (empirical margin at k)^+ (K_{k+1} - K_k)`.
pub fn discrete_skorokhod_residual(
    solution: &ParticleSolution,
    loss: &LossSpec,
    multi: &MultiEnsemble,
) -> f64 {
    let model = multi.model();
    let n = model.steps();
    let np = solution.n_particles() as f64;
    let mut total = 0.0;
    for (s, &w) in multi.weights().iter().enumerate() {
        let mut path_sum = 0.0;
        for k in 0..n {
            let t = model.time(k);
            let margin: f64 = (0..solution.n_particles())
                .map(|i| loss.evaluate(t, solution.reflected_value(i, k, s)))
                .sum::<f64>()
                / np;
            let dk = solution.k.value(k + 1, s) - solution.k.value(k, s);
            path_sum += margin.max(0.0) * dk;
        }
        total += w * path_sum;
    }
    total
}

fn finish_particle_diagnostics(sol: &mut ParticleSolution, loss: &LossSpec, multi: &MultiEnsemble) {
    let model = multi.model();
    let n = model.steps();
    let ns = multi.n_scenarios();
    let np = sol.n_particles() as f64;
    let mut margins = Vec::with_capacity(n + 1);
    let mut min_margin = f64::INFINITY;
    for k in 0..=n {
        let t = model.time(k);
        let mut worst = f64::INFINITY;
        for s in 0..ns {
            let margin: f64 = (0..sol.n_particles())
                .map(|i| loss.evaluate(t, sol.reflected_value(i, k, s)))
                .sum::<f64>()
                / np;
            worst = worst.min(margin);
        }
        min_margin = min_margin.min(worst);
        margins.push(worst);
    }
    let terminal_psi_max = sol.psi.terminal().iter().fold(0.0_f64, |m, &v| m.max(v));
    sol.diagnostics.constraint_margin = margins;
    sol.diagnostics.min_constraint_margin = min_margin;
    sol.diagnostics.terminal_psi_max = terminal_psi_max;
    sol.diagnostics.skorokhod_residual = discrete_skorokhod_residual(sol, loss, multi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_model::JumpModel;
    use approx::assert_abs_diff_eq;

    fn root_cfg() -> RootConfig {
        RootConfig::default()
    }

    fn identity_loss() -> LossSpec {
        LossSpec::linear(1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn psi_closed_forms_per_node() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.2, 1).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = identity_loss();
        let mut y0 = AdaptedProcess::zeros(1, multi.n_scenarios());
        let mut y1 = AdaptedProcess::zeros(1, multi.n_scenarios());
        for s in 0..multi.n_scenarios() {
            y0.set_value(0, s, -1.0);
            y1.set_value(0, s, 3.0);
            y0.set_value(1, s, -1.0);
            y1.set_value(1, s, -3.0);
        }
        let psi = psi_process(&multi, &loss, &[y0, y1], &root_cfg()).unwrap();
        for s in 0..multi.n_scenarios() {
            assert_abs_diff_eq!(psi.value(0, s), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(psi.value(1, s), 2.0, epsilon = 2e-10);
        }
    }

    #[test]
    fn psi_single_particle_matches_scalar_form() {
        // N = 1 with linear loss: psi = (a - y)^+ pathwise
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.4, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 1, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.7, 0.0).unwrap();
        let mut y = AdaptedProcess::zeros(2, multi.n_scenarios());
        for k in 0..=2 {
            for s in 0..multi.n_scenarios() {
                y.set_value(k, s, 0.3 * (s as f64) - 0.5 + 0.1 * k as f64);
            }
        }
        let psi = psi_process(&multi, &loss, &[y.clone()], &root_cfg()).unwrap();
        for k in 0..=2 {
            for s in 0..multi.n_scenarios() {
                let expected = (0.7 - y.value(k, s)).max(0.0);
                assert_abs_diff_eq!(psi.value(k, s), expected, epsilon = 2e-10);
            }
        }
    }

    #[test]
    fn snell_hand_example_deterministic_psi() {
        // markless model: one scenario, psi = (0, 1, 0)
        let model = JumpModel::new(vec![], vec![], 1.0, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 1, None).unwrap();
        let mut psi = AdaptedProcess::zeros(2, 1);
        psi.set_value(0, 0, 0.0);
        psi.set_value(1, 0, 1.0);
        psi.set_value(2, 0, 0.0);
        let (s, k) = snell_envelope(&multi, &psi, Backend::Exact, None).unwrap();
        assert_eq!(s.value(0, 0), 1.0);
        assert_eq!(s.value(1, 0), 1.0);
        assert_eq!(s.value(2, 0), 0.0);
        assert_eq!(k.value(0, 0), 0.0);
        assert_eq!(k.value(1, 0), 0.0);
        assert_eq!(k.value(2, 0), 1.0);
    }

    #[test]
    fn snell_of_zero_is_zero() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.4, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let psi = AdaptedProcess::zeros(2, multi.n_scenarios());
        let (s, k) = snell_envelope(&multi, &psi, Backend::Exact, None).unwrap();
        assert_eq!(s.sup_norm(), 0.0);
        assert_eq!(k.sup_norm(), 0.0);
    }

    /// Exhaustive stopping-rule oracle: best expected reward over every
    /// adapted stop/continue assignment on the subtree of a node.
    fn best_stopping_value(
        multi: &MultiEnsemble,
        psi: &AdaptedProcess,
        step: usize,
        scenario: usize,
    ) -> f64 {
        let b = multi.joint_branching();
        let n = multi.model().steps();
        let probs = multi.joint_branch_probs();
        let child_span = |k: usize| b.pow((n - k - 1) as u32);
        let root = scenario - scenario % b.pow((n - step) as u32);
        let mut levels: Vec<Vec<usize>> = vec![vec![root]];
        for k in step..n {
            let span = child_span(k);
            let prev = levels.last().unwrap().clone();
            let mut next = Vec::with_capacity(prev.len() * b);
            for start in prev {
                for d in 0..b {
                    next.push(start + d * span);
                }
            }
            levels.push(next);
        }
        let interior: usize = (0..(n - step)).map(|l| levels[l].len()).sum();
        assert!(interior <= 22, "oracle subtree too large");
        let mut best = f64::NEG_INFINITY;
        for mask in 0u64..(1u64 << interior) {
            let mut values: Vec<f64> = levels[n - step]
                .iter()
                .map(|&sc| psi.value(n, sc))
                .collect();
            let mut bit_base = interior;
            for l in (0..(n - step)).rev() {
                let nodes = &levels[l];
                bit_base -= nodes.len();
                let mut cur = Vec::with_capacity(nodes.len());
                for (idx, &sc) in nodes.iter().enumerate() {
                    let stop = (mask >> (bit_base + idx)) & 1 == 1;
                    let k = step + l;
                    let v = if stop {
                        psi.value(k, sc)
                    } else {
                        let mut acc = 0.0;
                        for (d, p) in probs.iter().enumerate() {
                            acc += p * values[idx * b + d];
                        }
                        acc
                    };
                    cur.push(v);
                }
                values = cur;
            }
            best = best.max(values[0]);
        }
        best
    }

    #[test]
    fn snell_matches_exhaustive_stopping_rules() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.4, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.3, 0.1).unwrap();
        let mut y = Vec::new();
        for i in 0..2 {
            let table = multi.count_table(i);
            let mut proc = AdaptedProcess::zeros(2, multi.n_scenarios());
            for k in 0..=2 {
                for s in 0..multi.n_scenarios() {
                    proc.set_value(k, s, 0.4 * table.value(k, s, 0) as f64 - 0.2);
                }
            }
            y.push(proc);
        }
        let psi = psi_process(&multi, &loss, &y, &root_cfg()).unwrap();
        let (s, _) = snell_envelope(&multi, &psi, Backend::Exact, None).unwrap();
        let oracle_root = best_stopping_value(&multi, &psi, 0, 0);
        assert_abs_diff_eq!(s.value(0, 0), oracle_root, epsilon = 1e-12);
        for sc in [0, 5, 9, 15] {
            let oracle = best_stopping_value(&multi, &psi, 1, sc);
            assert_abs_diff_eq!(s.value(1, sc), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn slack_constraint_gives_unreflected_particles() {
        // all xi^i = 2, l = y - 1: psi = 0 everywhere, K = 0, Y^i = y^i
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.4, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -1.0, 0.0).unwrap();
        let terminal = TerminalSpec::constant(2.0);
        let sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        assert_eq!(sol.k.sup_norm(), 0.0);
        assert_eq!(sol.s.sup_norm(), 0.0);
        for i in 0..2 {
            for k in 0..=2 {
                for s in 0..multi.n_scenarios() {
                    assert_abs_diff_eq!(sol.y[i].value(k, s), 2.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_particle_system_runs_and_satisfies_invariants() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.6, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 1, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / 0.6).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        assert!(sol.diagnostics.min_constraint_margin >= -1e-8);
        assert!(sol.diagnostics.skorokhod_residual <= 1e-8);
        // K is random here (Snell of a pathwise process), nondecreasing per path
        for s in 0..multi.n_scenarios() {
            for k in 0..3 {
                assert!(sol.k.value(k + 1, s) >= sol.k.value(k, s) - 1e-14);
            }
        }
    }

    #[test]
    fn supermartingale_and_domination_properties() {
        let model = JumpModel::new(vec![1.0], vec![1.2], 0.6, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.5, 0.5 / 0.6).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let probs = multi.joint_branch_probs();
        let n = model.steps();
        for k in 0..n {
            let next = sol.s.step(k + 1).to_vec();
            let cond = joint_condexp_exact(&multi, &probs, &next, k);
            for s in 0..multi.n_scenarios() {
                // supermartingale property at every node
                assert!(cond[s] <= sol.s.value(k, s) + 1e-12);
                // domination of the reward
                assert!(sol.s.value(k, s) >= sol.psi.value(k, s) - 1e-12);
                // K grows only where S = psi
                let dk = sol.k.value(k + 1, s) - sol.k.value(k, s);
                if dk > 1e-10 {
                    assert!(
                        (sol.s.value(k, s) - sol.psi.value(k, s)).abs() <= 1e-10,
                        "K grew off the reward at ({k}, {s})"
                    );
                }
            }
        }
    }

    #[test]
    fn lowering_snell_value_breaks_a_property() {
        // least supermartingale above psi: nudging any S value down by 1e-6
        // violates domination or the supermartingale inequality somewhere
        let model = JumpModel::new(vec![1.0], vec![1.2], 0.6, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.5, 0.5 / 0.6).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let probs = multi.joint_branch_probs();
        let n = model.steps();
        for (k, s) in [(0usize, 0usize), (1, 3), (2, 9)] {
            let mut tampered = sol.s.clone();
            tampered.set_value(k, s, tampered.value(k, s) - 1e-6);
            // re-check both properties at the tampered node and its parents
            let mut violated = tampered.value(k, s) < sol.psi.value(k, s) - 1e-12;
            for kk in 0..n {
                let next = tampered.step(kk + 1).to_vec();
                let cond = joint_condexp_exact(&multi, &probs, &next, kk);
                for sc in 0..multi.n_scenarios() {
                    if cond[sc] > tampered.value(kk, sc) + 1e-12 {
                        violated = true;
                    }
                }
            }
            assert!(violated, "lowering S at ({k}, {s}) went unnoticed");
        }
    }

    /// Reconstruction residual of the full identity
    /// `Y_{k+1} - Y_k + f dt + dK - sum U dmu~ = 0`:
    /// returns (max over steps of the probability-weighted mean |residual|,
    /// max |residual| over branches where at most one particle jumps).
    fn reconstruction_residuals(
        model: &JumpModel,
        multi: &MultiEnsemble,
        sol: &ParticleSolution,
        f_const: f64,
    ) -> (f64, f64) {
        let u = sol.u.as_ref().expect("exact backend materialises U");
        let dt = model.dt();
        let n = model.steps();
        let np = multi.n_particles();
        let m = model.num_marks();
        let mut worst_weighted = 0.0_f64;
        let mut worst_single = 0.0_f64;
        for k in 0..n {
            let mut weighted = 0.0;
            for s in 0..multi.n_scenarios() {
                let jumping = (0..np).filter(|&i| multi.outcome(i, s, k) != 0).count();
                for i in 0..np {
                    let mut mart = 0.0;
                    for j in 0..np {
                        for e in 0..m {
                            mart += u.value(i, j, k, s, e)
                                * model.compensated_increment(multi.outcome(j, s, k), e);
                        }
                    }
                    let dk = sol.k.value(k + 1, s) - sol.k.value(k, s);
                    let residual = sol.reflected_value(i, k + 1, s)
                        - sol.reflected_value(i, k, s)
                        + f_const * dt
                        + dk
                        - mart;
                    weighted += multi.weights()[s] * residual.abs() / np as f64;
                    if jumping <= 1 {
                        worst_single = worst_single.max(residual.abs());
                    }
                }
            }
            worst_weighted = worst_weighted.max(weighted);
        }
        (worst_weighted, worst_single)
    }

    #[test]
    fn constant_driver_reconstruction_identities() {
        // The martingale part of the particle-local y^i is exactly spanned by
        // the compensated increments, so its one-step identity holds
        // scenario-wise on every branch. The envelope part S is not additively
        // separable across particles, which leaves an O(dt^2) defect on the
        // product tree's simultaneous-jump geometry; it must hold in
        // conditional mean and shrink at second order under grid refinement.
        let horizon = 0.6;
        let solve = |steps: usize| {
            let model = JumpModel::new(vec![1.0], vec![1.0], horizon, steps).unwrap();
            let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
            let loss = LossSpec::linear(1.0, -0.5, 0.5 / horizon).unwrap();
            let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
            let driver = DriverSpec::constant(0.3);
            let sol = solve_particles_constant(
                &multi,
                &driver,
                &terminal,
                &loss,
                Backend::Exact,
                &root_cfg(),
            )
            .unwrap();
            (model, multi, sol)
        };

        let (model, multi, sol) = solve(3);
        let dt = model.dt();
        let n = model.steps();
        let np = multi.n_particles();
        let m = model.num_marks();

        // (a) exact scenario-wise identity for the y-part
        for i in 0..np {
            for k in 0..n {
                for s in 0..multi.n_scenarios() {
                    let next = sol.y[i].step(k + 1).to_vec();
                    let u_own = joint_extract_exact(&multi, &next, k, i);
                    // cross-measure coefficients of y^i vanish (particle-local)
                    for j in 0..np {
                        if j == i {
                            continue;
                        }
                        let u_cross = joint_extract_exact(&multi, &next, k, j);
                        assert!(u_cross[s * m].abs() <= 1e-12);
                    }
                    let mut mart = 0.0;
                    for e in 0..m {
                        mart += u_own[s * m + e]
                            * model.compensated_increment(multi.outcome(i, s, k), e);
                    }
                    let residual =
                        sol.y[i].value(k + 1, s) - sol.y[i].value(k, s) + 0.3 * dt - mart;
                    assert!(
                        residual.abs() <= 1e-12,
                        "y-part particle {i} step {k} scenario {s}: {residual}"
                    );
                }
            }
        }

        // (b) the full identity holds in conditional mean at every node
        let probs = multi.joint_branch_probs();
        for k in 0..n {
            for i in 0..np {
                let refl_next: Vec<f64> = (0..multi.n_scenarios())
                    .map(|s| sol.reflected_value(i, k + 1, s))
                    .collect();
                let cond = joint_condexp_exact(&multi, &probs, &refl_next, k);
                for s in 0..multi.n_scenarios() {
                    let dk = sol.k.value(k + 1, s) - sol.k.value(k, s);
                    let mean_residual =
                        cond[s] - sol.reflected_value(i, k, s) + 0.3 * dt + dk;
                    assert!(
                        mean_residual.abs() <= 1e-12,
                        "node ({k}, {s}): conditional-mean residual {mean_residual}"
                    );
                }
            }
        }

        // (c) the defect lives on simultaneous-jump branches whose mass is
        // O(dt^2): branches with at most one jumping particle carry residuals
        // bounded by p^2 times the envelope's mixed second difference, and the
        // probability-weighted residual shrinks at second order per step
        let (coarse_weighted, coarse_single) = reconstruction_residuals(&model, &multi, &sol, 0.3);
        let p_step = model.intensities()[0] * dt;
        let s_sup = sol.s.sup_norm();
        assert!(
            coarse_single <= p_step * p_step * 8.0 * s_sup.max(1.0),
            "single-jump residual {coarse_single} above the O(p^2) bound"
        );
        let (fine_weighted, _) = {
            let (model2, multi2, sol2) = solve(6);
            reconstruction_residuals(&model2, &multi2, &sol2, 0.3)
        };
        assert!(
            fine_weighted <= coarse_weighted * 0.35 + 1e-12,
            "weighted residual did not shrink at second order: {coarse_weighted} -> {fine_weighted}"
        );
    }

    #[test]
    fn general_driver_single_iteration_when_independent() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.4, 2).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.3, 0.3 / 0.4).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::constant(0.1);
        let picard =
            crate::mean_reflected::compute_picard_window(&driver, &loss, 0.4, model.steps());
        let a = solve_particles_constant(
            &multi,
            &driver,
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let b = solve_particles(
            &multi,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        for i in 0..2 {
            assert_eq!(a.y[i], b.y[i]);
        }
        assert_eq!(a.k, b.k);
    }

    /// Independent route for the general driver: global damped iteration of
    /// the frozen-driver construction, written directly against the low-level
    /// pieces.
    #[test]
    fn general_driver_matches_global_fixed_point_oracle() {
        let horizon = 0.6;
        let model = JumpModel::new(vec![1.0], vec![1.0], horizon, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.3, 0.3 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::linear_y(0.0, 0.3);
        let picard =
            crate::mean_reflected::compute_picard_window(&driver, &loss, horizon, model.steps());
        let sol = solve_particles(
            &multi,
            &driver,
            &terminal,
            &loss,
            &picard,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();

        // oracle: iterate the whole-horizon frozen construction with damping
        let n = model.steps();
        let ns = multi.n_scenarios();
        let terminal_values: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                (0..ns)
                    .map(|s| terminal.evaluate(&multi.terminal_counts(i, s)))
                    .collect()
            })
            .collect();
        let probs = multi.joint_branch_probs();
        let dt = model.dt();
        let mut frozen = vec![AdaptedProcess::zeros(n, ns); 2];
        let mut result: Option<(Vec<AdaptedProcess>, AdaptedProcess, AdaptedProcess)> = None;
        for _ in 0..400 {
            let mut y = vec![AdaptedProcess::zeros(n, ns); 2];
            for i in 0..2 {
                y[i].step_mut(n).copy_from_slice(&terminal_values[i]);
                for k in (0..n).rev() {
                    let next = y[i].step(k + 1).to_vec();
                    let cond = joint_condexp_exact(&multi, &probs, &next, k);
                    for s in 0..ns {
                        let f = 0.3 * frozen[i].value(k, s);
                        y[i].set_value(k, s, cond[s] + f * dt);
                    }
                }
            }
            let psi = psi_process(&multi, &loss, &y, &root_cfg()).unwrap();
            let (s_proc, k_proc) = snell_envelope(&multi, &psi, Backend::Exact, None).unwrap();
            let mut delta = 0.0_f64;
            let mut next_frozen = vec![AdaptedProcess::zeros(n, ns); 2];
            for i in 0..2 {
                for k in 0..=n {
                    for s in 0..ns {
                        let refl = y[i].value(k, s) + s_proc.value(k, s);
                        delta = delta.max((refl - frozen[i].value(k, s)).abs());
                        next_frozen[i].set_value(k, s, 0.5 * (frozen[i].value(k, s) + refl));
                    }
                }
            }
            frozen = next_frozen;
            if delta <= 1e-11 {
                result = Some((y, s_proc, k_proc));
                break;
            }
        }
        let (oy, os, ok) = result.expect("oracle iteration converged");
        for i in 0..2 {
            for k in 0..n {
                for s in 0..ns {
                    let ours = sol.reflected_value(i, k, s);
                    let oracle = oy[i].value(k, s) + os.value(k, s);
                    assert!(
                        (ours - oracle).abs() <= 1e-9,
                        "particle {i} ({k}, {s}): {ours} vs {oracle}"
                    );
                }
            }
        }
        for k in 0..=n {
            for s in 0..ns {
                assert!((sol.k.value(k, s) - ok.value(k, s)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn particle_permutation_leaves_k_invariant() {
        // swapping the two particles' digit roles relabels scenarios;
        // K is exchangeable so K(s) == K(sigma(s)) bitwise
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.6, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / 0.6).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        let b = multi.joint_branching();
        let n = model.steps();
        let swap = |s: usize| -> usize {
            let mut digits = Vec::with_capacity(n);
            let mut rem = s;
            for _ in 0..n {
                digits.push(rem % b);
                rem /= b;
            }
            digits.reverse();
            let mut out = 0usize;
            for d in digits {
                let p0 = multi.particle_digit(d, 0) as usize;
                let p1 = multi.particle_digit(d, 1) as usize;
                let swapped = p1 * 2 + p0;
                out = out * b + swapped;
            }
            out
        };
        for s in 0..multi.n_scenarios() {
            let t = swap(s);
            for k in 0..=n {
                assert_eq!(sol.k.value(k, s), sol.k.value(k, t));
                assert_eq!(sol.y[0].value(k, s), sol.y[1].value(k, t));
            }
        }
    }

    #[test]
    fn skorokhod_residual_detects_inflated_k() {
        let model = JumpModel::new(vec![1.0], vec![1.0], 0.6, 3).unwrap();
        let multi = MultiEnsemble::build_joint_exact_tree(&model, 2, None).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / 0.6).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let mut sol = solve_particles_constant(
            &multi,
            &DriverSpec::zero(),
            &terminal,
            &loss,
            Backend::Exact,
            &root_cfg(),
        )
        .unwrap();
        assert!(discrete_skorokhod_residual(&sol, &loss, &multi) <= 1e-8);
        // manufacture growth where the constraint is strictly slack
        let n = model.steps();
        for k in 1..=n {
            for s in 0..multi.n_scenarios() {
                let v = sol.k.value(k, s);
                sol.k.set_value(k, s, v + 0.2);
            }
            for i in 0..2 {
                for s in 0..multi.n_scenarios() {
                    let v = sol.y[i].value(k, s);
                    sol.y[i].set_value(k, s, v + 0.2);
                }
            }
        }
        assert!(discrete_skorokhod_residual(&sol, &loss, &multi) > 1e-4);
    }

    #[test]
    fn uniform_bound_probe_is_stable_under_doubling() {
        let horizon = 0.5;
        let model = JumpModel::new(vec![1.0], vec![1.0], horizon, 4).unwrap();
        let loss = LossSpec::linear(1.0, -0.4, 0.4 / horizon).unwrap();
        let terminal = TerminalSpec::count_centered(&model, vec![1.0]).unwrap();
        let driver = DriverSpec::constant(0.2);
        let bound = driver.bound_l + terminal.bound_m;
        let mut ratios = Vec::new();
        for n_particles in [4usize, 8, 16] {
            let multi = MultiEnsemble::sample(&model, n_particles, 400, 5).unwrap();
            let sol = solve_particles_constant(
                &multi,
                &driver,
                &terminal,
                &loss,
                Backend::regression(),
                &root_cfg(),
            )
            .unwrap();
            let sup = (0..n_particles)
                .map(|i| {
                    let mut worst = 0.0_f64;
                    for k in 0..=model.steps() {
                        for s in 0..multi.n_scenarios() {
                            worst = worst.max(sol.reflected_value(i, k, s).abs());
                        }
                    }
                    worst
                })
                .fold(0.0_f64, f64::max);
            ratios.push(sup / bound);
        }
        for w in ratios.windows(2) {
            assert!(
                w[1] <= w[0] * 1.5 && w[0] <= w[1] * 1.5,
                "probe constants {ratios:?} drift more than x1.5"
            );
        }
    }
}
