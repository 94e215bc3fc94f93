//! Weighted least-squares projection used by the regression backends.
//!
//! Exactly duplicated or zero feature columns are dropped before solving
//! (count features degenerate this way on short histories, e.g. `c^2 = c`
//! while counts are 0/1); the remaining columns are normalised and solved by
//! Cholesky. Genuine near-deficiency falls back to a ridge penalty.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Ridge penalty applied when the normal equations are rank deficient.
pub const RIDGE_PENALTY: f64 = 1e-8;

/// Outcome of one weighted least-squares fit.
pub struct FitResult {
    pub coeffs: Vec<f64>,
    /// True when the plain normal equations failed and the documented ridge
    /// penalty was added.
    pub used_ridge: bool,
}

/// Solve `min_beta sum_s w_s (y_s - x_s . beta)^2`.
///
/// `features` is row-major with `dim` columns; rows pair with `targets` and
/// `weights`.
pub fn weighted_least_squares(
    features: &[f64],
    dim: usize,
    targets: &[f64],
    weights: &[f64],
) -> FitResult {
    let n = targets.len();
    assert_eq!(features.len(), n * dim);
    assert_eq!(weights.len(), n);

    // Keep the first column of every group of identical columns.
    let mut keep: Vec<usize> = Vec::with_capacity(dim);
    for j in 0..dim {
        let zero = (0..n).all(|s| features[s * dim + j] == 0.0);
        if zero {
            continue;
        }
        let dup = keep
            .iter()
            .any(|&i| (0..n).all(|s| features[s * dim + i] == features[s * dim + j]));
        if !dup {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return FitResult {
            coeffs: vec![0.0; dim],
            used_ridge: false,
        };
    }
    let d = keep.len();

    // Column scales from the weighted second moment.
    let mut scale = vec![0.0_f64; d];
    for s in 0..n {
        let w = weights[s];
        for (a, &j) in keep.iter().enumerate() {
            let x = features[s * dim + j];
            scale[a] += w * x * x;
        }
    }
    for sc in scale.iter_mut() {
        *sc = if *sc > 0.0 { sc.sqrt() } else { 1.0 };
    }

    let mut xtwx = DMatrix::<f64>::zeros(d, d);
    let mut xtwy = DVector::<f64>::zeros(d);
    for s in 0..n {
        let w = weights[s];
        if w == 0.0 {
            continue;
        }
        for a in 0..d {
            let xa = features[s * dim + keep[a]] / scale[a];
            let wa = w * xa;
            xtwy[a] += wa * targets[s];
            for b in a..d {
                xtwx[(a, b)] += wa * features[s * dim + keep[b]] / scale[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }

    let (beta, used_ridge) = match Cholesky::new(xtwx.clone()) {
        Some(chol) => {
            let beta = chol.solve(&xtwy);
            if beta.iter().all(|v| v.is_finite()) {
                (beta, false)
            } else {
                (ridge_solve(xtwx, &xtwy), true)
            }
        }
        None => (ridge_solve(xtwx, &xtwy), true),
    };

    let mut coeffs = vec![0.0; dim];
    for (a, &j) in keep.iter().enumerate() {
        coeffs[j] = beta[a] / scale[a];
    }
    FitResult { coeffs, used_ridge }
}

fn ridge_solve(mut xtwx: DMatrix<f64>, xtwy: &DVector<f64>) -> DVector<f64> {
    let d = xtwx.nrows();
    for a in 0..d {
        xtwx[(a, a)] += RIDGE_PENALTY;
    }
    Cholesky::new(xtwx)
        .map(|c| c.solve(xtwy))
        .unwrap_or_else(|| DVector::zeros(d))
}

/// Fitted values `X beta` for a row-major feature matrix.
pub fn predict(features: &[f64], dim: usize, coeffs: &[f64], out: &mut [f64]) {
    for (s, slot) in out.iter_mut().enumerate() {
        let row = &features[s * dim..(s + 1) * dim];
        *slot = row.iter().zip(coeffs).map(|(x, b)| x * b).sum();
    }
}
