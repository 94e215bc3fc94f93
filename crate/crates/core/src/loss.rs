//! Running loss functions and the reflection operators.
//!
//! For a loss `l(t, y)` that is strictly increasing in `y`, the shift
//! operator on a discrete law `X` is
//!
//! ```text
//! Lbar_t(X) = inf { x in R   : E[l(t, x + X)] >= 0 }
//! L_t(X)    = inf { x >= 0   : E[l(t, x + X)] >= 0 } = max(0, Lbar_t(X))
//! ```
//!
//! Both are located by an expanding bracket followed by plain bisection;
//! no derivative of `l` is required, so table losses work unchanged.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Loss families. `evaluate` is total in `(t, y)`.
#[derive(Clone)]
pub enum LossFamily {
    /// `l(t, y) = slope * y + offset0 + offset_t * t`
    Linear {
        slope: f64,
        offset0: f64,
        offset_t: f64,
    },
    /// Piecewise-linear kink at a time-affine threshold:
    /// `l = up * (y - theta(t))` above, `down * (y - theta(t))` below,
    /// with `theta(t) = threshold0 + threshold_t * t`.
    AffineThreshold {
        up: f64,
        down: f64,
        threshold0: f64,
        threshold_t: f64,
    },
    /// Rectangular (t, y) table, bilinear interpolation, flat-in-t clamp
    /// outside the table's time range and linear extrapolation in y.
    Table(LossTable),
    /// Arbitrary code-supplied loss; constants must be declared by the caller.
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossFamily::Linear {
                slope,
                offset0,
                offset_t,
            } => write!(f, "Linear {{ slope: {slope}, offset0: {offset0}, offset_t: {offset_t} }}"),
            LossFamily::AffineThreshold {
                up,
                down,
                threshold0,
                threshold_t,
            } => write!(
                f,
                "AffineThreshold {{ up: {up}, down: {down}, threshold0: {threshold0}, threshold_t: {threshold_t} }}"
            ),
            LossFamily::Table(t) => write!(f, "Table({} x {})", t.times.len(), t.ys.len()),
            LossFamily::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A running loss with its declared certificates: bi-Lipschitz constants in
/// `y`, a Lipschitz constant in `t` and a linear growth constant.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub family: LossFamily,
    /// Lower bi-Lipschitz constant in y (strict monotonicity floor), > 0.
    pub kappa_lower: f64,
    /// Upper Lipschitz constant in y, >= kappa_lower.
    pub kappa_upper: f64,
    /// Lipschitz constant in t.
    pub time_lipschitz: f64,
    /// Growth constant: |l(t, y)| <= growth * (1 + |y|).
    pub growth: f64,
}

impl LossSpec {
    pub fn new(
        family: LossFamily,
        kappa_lower: f64,
        kappa_upper: f64,
        time_lipschitz: f64,
        growth: f64,
    ) -> Result<Self> {
        if !(kappa_lower > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa_lower = {kappa_lower} must be > 0"
            )));
        }
        if kappa_upper < kappa_lower {
            return Err(Error::InvalidConfig(format!(
                "kappa_upper = {kappa_upper} < kappa_lower = {kappa_lower}"
            )));
        }
        if time_lipschitz < 0.0 || growth < 0.0 {
            return Err(Error::InvalidConfig(
                "time_lipschitz and growth must be >= 0".into(),
            ));
        }
        Ok(Self {
            family,
            kappa_lower,
            kappa_upper,
            time_lipschitz,
            growth,
        })
    }

    /// Linear loss with constants derived from its coefficients.
    pub fn linear(slope: f64, offset0: f64, offset_t: f64) -> Result<Self> {
        let growth = slope.abs().max(offset0.abs() + offset_t.abs());
        Self::new(
            LossFamily::Linear {
                slope,
                offset0,
                offset_t,
            },
            slope,
            slope,
            offset_t.abs(),
            growth.max(1.0),
        )
    }

    pub fn affine_threshold(up: f64, down: f64, threshold0: f64, threshold_t: f64) -> Result<Self> {
        if !(up > 0.0 && down > 0.0) {
            return Err(Error::InvalidConfig("kink slopes must be > 0".into()));
        }
        let hi = up.max(down);
        Self::new(
            LossFamily::AffineThreshold {
                up,
                down,
                threshold0,
                threshold_t,
            },
            up.min(down),
            hi,
            hi * threshold_t.abs(),
            hi.max(hi * (threshold0.abs() + threshold_t.abs())).max(1.0),
        )
    }

    pub fn evaluate(&self, t: f64, y: f64) -> f64 {
        match &self.family {
            LossFamily::Linear {
                slope,
                offset0,
                offset_t,
            } => slope * y + offset0 + offset_t * t,
            LossFamily::AffineThreshold {
                up,
                down,
                threshold0,
                threshold_t,
            } => {
                let gap = y - (threshold0 + threshold_t * t);
                if gap >= 0.0 {
                    up * gap
                } else {
                    down * gap
                }
            }
            LossFamily::Table(table) => table.evaluate(t, y),
            LossFamily::Custom(f) => f(t, y),
        }
    }

    /// `kappa = kappa_upper / kappa_lower`, the cloud-Lipschitz constant of
    /// the reflection operators.
    pub fn kappa(&self) -> f64 {
        self.kappa_upper / self.kappa_lower
    }

    /// `r / kappa_lower`, the time-Lipschitz constant of the operators.
    pub fn r_bar(&self) -> f64 {
        self.time_lipschitz / self.kappa_lower
    }
}

/// Rectangular loss table over a (time, y) grid.
#[derive(Debug, Clone)]
pub struct LossTable {
    times: Vec<f64>,
    ys: Vec<f64>,
    /// values[i * ys.len() + j] = l(times[i], ys[j])
    values: Vec<f64>,
}

impl LossTable {
    pub fn new(times: Vec<f64>, ys: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || ys.len() < 2 {
            return Err(Error::InvalidConfig(
                "loss table needs at least 1 time and 2 y knots".into(),
            ));
        }
        if values.len() != times.len() * ys.len() {
            return Err(Error::InvalidConfig(format!(
                "loss table needs {} values, got {}",
                times.len() * ys.len(),
                values.len()
            )));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) || !ys.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "loss table knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, ys, values })
    }

    /// Load rows `(t, y, value)` and validate that they form a full
    /// rectangular grid.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::InvalidConfig(
                    "loss table rows must be (t, y, value)".into(),
                ));
            }
            let parse = |i: usize| -> Result<f64> {
                record[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad loss table number: {e}")))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        if rows.len() != times.len() * ys.len() {
            return Err(Error::InvalidConfig(format!(
                "loss table is not rectangular: {} rows for {} x {} grid",
                rows.len(),
                times.len(),
                ys.len()
            )));
        }
        let mut values = vec![f64::NAN; times.len() * ys.len()];
        for (t, y, v) in rows {
            let i = times.partition_point(|&x| x < t);
            let j = ys.partition_point(|&x| x < y);
            values[i * ys.len() + j] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidConfig("loss table has duplicate knots".into()));
        }
        Self::new(times, ys, values)
    }

    fn evaluate(&self, t: f64, y: f64) -> f64 {
        let at = |i: usize, j: usize| self.values[i * self.ys.len() + j];
        // linear in y with extrapolation from the boundary segments
        let ny = self.ys.len();
        let j1 = self
            .ys
            .partition_point(|&x| x <= y)
            .clamp(1, ny - 1);
        let (y0, y1) = (self.ys[j1 - 1], self.ys[j1]);
        let wy = (y - y0) / (y1 - y0);
        let in_y = |i: usize| at(i, j1 - 1) * (1.0 - wy) + at(i, j1) * wy;
        // flat-in-t clamp outside the table, linear inside
        let nt = self.times.len();
        if nt == 1 || t <= self.times[0] {
            return in_y(0);
        }
        if t >= self.times[nt - 1] {
            return in_y(nt - 1);
        }
        let i1 = self.times.partition_point(|&x| x <= t).clamp(1, nt - 1);
        let (t0, t1) = (self.times[i1 - 1], self.times[i1]);
        let wt = (t - t0) / (t1 - t0);
        in_y(i1 - 1) * (1.0 - wt) + in_y(i1) * wt
    }
}

/// A discrete law: sample values and probabilities summing to one.
#[derive(Debug, Clone)]
pub struct SampleCloud<'a> {
    values: &'a [f64],
    weights: &'a [f64],
}

impl<'a> SampleCloud<'a> {
    pub fn new(values: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::InvalidConfig(
                "cloud needs matching nonempty values and weights".into(),
            ));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("cloud weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "cloud weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { values, weights })
    }

    pub fn values(&self) -> &[f64] {
        self.values
    }

    pub fn weights(&self) -> &[f64] {
        self.weights
    }

    /// `E[l(t, x + X)]` for this law.
    pub fn shifted_mean_loss(&self, loss: &LossSpec, t: f64, x: f64) -> f64 {
        self.values
            .iter()
            .zip(self.weights)
            .map(|(&v, &w)| w * loss.evaluate(t, x + v))
            .sum()
    }
}

/// Root-finding controls for the reflection operators.
#[derive(Debug, Clone, Copy)]
pub struct RootConfig {
    /// Absolute tolerance on the located root.
    pub tol: f64,
    /// Search range `[-bound, bound]`; no sign change inside it is an error.
    pub bound: f64,
}

impl Default for RootConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            bound: 1e6,
        }
    }
}

/// Signed shift: root of `x -> E[l(t, x + X)]` over the whole line.
pub fn l_bar_operator(loss: &LossSpec, t: f64, cloud: &SampleCloud, cfg: &RootConfig) -> Result<f64> {
    let g = |x: f64| cloud.shifted_mean_loss(loss, t, x);
    bracket_and_bisect(&g, cfg)
}

/// Nonnegative shift: `max(0, l_bar)`. Zero iff the constraint already holds.
pub fn l_operator(loss: &LossSpec, t: f64, cloud: &SampleCloud, cfg: &RootConfig) -> Result<f64> {
    if cloud.shifted_mean_loss(loss, t, 0.0) >= 0.0 {
        return Ok(0.0);
    }
    Ok(l_bar_operator(loss, t, cloud, cfg)?.max(0.0))
}

/// Empirical version: the nonnegative shift for the uniform law on `values`.
///
/// Values are summed in sorted order, so the result is bit-identical under
/// any permutation of the inputs.
pub fn empirical_l_operator(
    loss: &LossSpec,
    t: f64,
    values: &[f64],
    cfg: &RootConfig,
) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empirical operator needs N >= 1 values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let g = |x: f64| sorted.iter().map(|&v| loss.evaluate(t, x + v)).sum::<f64>() / n;
    if g(0.0) >= 0.0 {
        return Ok(0.0);
    }
    Ok(bracket_and_bisect(&g, cfg)?.max(0.0))
}

/// Expanding bracket around 0 followed by bisection down to `cfg.tol`.
/// `g` must be nondecreasing.
fn bracket_and_bisect(g: &dyn Fn(f64) -> f64, cfg: &RootConfig) -> Result<f64> {
    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut glo = g(lo);
    let mut ghi = g(hi);
    while glo > 0.0 || ghi < 0.0 {
        if glo > 0.0 {
            if lo <= -cfg.bound {
                return Err(Error::BracketNotFound {
                    lo: -cfg.bound,
                    hi: cfg.bound,
                    detail: "map stays positive down to the lower search bound".into(),
                });
            }
            hi = lo;
            ghi = glo;
            lo = (lo * 2.0).max(-cfg.bound);
            glo = g(lo);
        } else {
            if hi >= cfg.bound {
                return Err(Error::BracketNotFound {
                    lo: -cfg.bound,
                    hi: cfg.bound,
                    detail: "map stays negative up to the upper search bound".into(),
                });
            }
            lo = hi;
            glo = ghi;
            hi = (hi * 2.0).min(cfg.bound);
            ghi = g(hi);
        }
    }
    // invariant: g(lo) <= 0 <= g(hi)
    for _ in 0..200 {
        if hi - lo <= cfg.tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
