//! Structured result emission: JSON reports and CSV tables, written
//! atomically (temp file in the target directory, then rename).

use std::path::Path;

use serde::Serialize;

use crate::chaos::{RateReport, RegularityReport};
use crate::error::Result;
use crate::jump_model::{MultiEnsemble, PathEnsemble};
use crate::mean_reflected::{PicardRecord, SolutionTriple};
use crate::particle::ParticleSolution;

/// Row guard for full CSV dumps.
const DUMP_ROW_GUARD: usize = 1 << 22;

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Report of one single-equation solve.
#[derive(Debug, Clone, Serialize)]
pub struct SingleSolveReport {
    pub times: Vec<f64>,
    pub k: Vec<f64>,
    pub constraint_margin: Vec<f64>,
    pub min_constraint_margin: f64,
    pub flatness_residual: f64,
    /// Ensemble mean of Y at time zero.
    pub y0_mean: f64,
    pub picard: Vec<PicardRecord>,
    pub warnings: Vec<String>,
}

impl SingleSolveReport {
    pub fn new(solution: &SolutionTriple, ens: &PathEnsemble) -> Self {
        let y0_mean = solution
            .y
            .step(0)
            .iter()
            .zip(ens.weights())
            .map(|(y, w)| y * w)
            .sum();
        Self {
            times: ens.model().times(),
            k: solution.k.clone(),
            constraint_margin: solution.diagnostics.constraint_margin.clone(),
            min_constraint_margin: solution.diagnostics.min_constraint_margin,
            flatness_residual: solution.diagnostics.flatness_residual,
            y0_mean,
            picard: solution.diagnostics.picard.clone(),
            warnings: solution.diagnostics.warnings.clone(),
        }
    }
}

/// Report of one particle-system solve.
#[derive(Debug, Clone, Serialize)]
pub struct ParticleSolveReport {
    pub n_particles: usize,
    pub scenarios: usize,
    pub times: Vec<f64>,
    /// Ensemble mean of the shared K per grid time.
    pub k_mean_path: Vec<f64>,
    pub k_max: f64,
    pub constraint_margin: Vec<f64>,
    pub min_constraint_margin: f64,
    pub skorokhod_residual: f64,
    pub terminal_psi_max: f64,
    pub picard: Vec<PicardRecord>,
    pub warnings: Vec<String>,
}

impl ParticleSolveReport {
    pub fn new(solution: &ParticleSolution, multi: &MultiEnsemble) -> Self {
        let n = multi.model().steps();
        let k_mean_path: Vec<f64> = (0..=n)
            .map(|k| {
                solution
                    .k
                    .step(k)
                    .iter()
                    .zip(multi.weights())
                    .map(|(v, w)| v * w)
                    .sum()
            })
            .collect();
        Self {
            n_particles: solution.n_particles(),
            scenarios: multi.n_scenarios(),
            times: multi.model().times(),
            k_mean_path,
            k_max: solution.k.sup_norm(),
            constraint_margin: solution.diagnostics.constraint_margin.clone(),
            min_constraint_margin: solution.diagnostics.min_constraint_margin,
            skorokhod_residual: solution.diagnostics.skorokhod_residual,
            terminal_psi_max: solution.diagnostics.terminal_psi_max,
            picard: solution.diagnostics.picard.clone(),
            warnings: solution.diagnostics.warnings.clone(),
        }
    }
}

/// Per-run rows of a rate sweep: `(N, seed, err_Y, err_U, err_K, runtime_s)`.
pub fn write_rate_csv(path: &Path, report: &RateReport) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(["N", "seed", "err_Y", "err_U", "err_K", "runtime_s"])?;
        for run in &report.runs {
            wtr.write_record([
                run.n_particles.to_string(),
                run.seed.to_string(),
                run.err_y.to_string(),
                run.err_u.to_string(),
                run.err_k.to_string(),
                run.runtime_s.to_string(),
            ])?;
        }
        wtr.flush()?;
    }
    write_atomic(path, &buf)
}

/// Full single-solution dump: `(scenario, step, y, u_0..u_{m-1})`.
pub fn write_solution_csv(
    path: &Path,
    solution: &SolutionTriple,
    ens: &PathEnsemble,
) -> Result<()> {
    let n = ens.model().steps();
    let ns = ens.n_scenarios();
    let m = ens.model().num_marks();
    if ns * (n + 1) > DUMP_ROW_GUARD {
        return Err(crate::error::Error::InvalidConfig(format!(
            "solution dump would write {} rows, above the {} guard",
            ns * (n + 1),
            DUMP_ROW_GUARD
        )));
    }
    let mut buf = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["scenario".to_string(), "step".to_string(), "y".to_string()];
        for j in 0..m {
            header.push(format!("u_{j}"));
        }
        wtr.write_record(&header)?;
        for s in 0..ns {
            for k in 0..=n {
                let mut row = vec![s.to_string(), k.to_string(), solution.y.value(k, s).to_string()];
                for j in 0..m {
                    let u = if k < n { solution.u.value(k, s, j) } else { 0.0 };
                    row.push(u.to_string());
                }
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
    }
    write_atomic(path, &buf)
}

/// Raw probe data alongside the fitted exponents.
pub fn write_regularity_json(path: &Path, report: &RegularityReport) -> Result<()> {
    write_json_atomic(path, report)
}
