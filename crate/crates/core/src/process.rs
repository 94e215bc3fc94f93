//! Grid-indexed process storage.
//!
//! An [`AdaptedProcess`] holds one value per (time step, scenario); a
//! [`PredictableField`] holds one value per (time step, scenario, mark), with
//! the value at step `k` in force over the step `(t_k, t_{k+1}]`.
//!
//! Measurability is a contract, not a type-level guarantee: on exact trees the
//! solvers only write node-constant rows, and the test suite checks that
//! scenarios sharing a history prefix share the value.

/// A real-valued process on the time grid, stored row-major by step.
///
/// Rows run `0..=n_steps`; row `k` holds one value per scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    n_steps: usize,
    n_scenarios: usize,
    data: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(n_steps: usize, n_scenarios: usize) -> Self {
        Self {
            n_steps,
            n_scenarios,
            data: vec![0.0; (n_steps + 1) * n_scenarios],
        }
    }

    /// Number of steps `n`; the process has `n + 1` rows.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn step(&self, k: usize) -> &[f64] {
        debug_assert!(k <= self.n_steps);
        &self.data[k * self.n_scenarios..(k + 1) * self.n_scenarios]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        debug_assert!(k <= self.n_steps);
        &mut self.data[k * self.n_scenarios..(k + 1) * self.n_scenarios]
    }

    pub fn value(&self, k: usize, scenario: usize) -> f64 {
        self.data[k * self.n_scenarios + scenario]
    }

    pub fn set_value(&mut self, k: usize, scenario: usize, v: f64) {
        self.data[k * self.n_scenarios + scenario] = v;
    }

    pub fn terminal(&self) -> &[f64] {
        self.step(self.n_steps)
    }

    /// Grid sup-norm over all steps and scenarios.
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Grid sup-norm of the difference with another process of the same shape.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A per-mark predictable field: rows run `0..n_steps`, each row holding
/// `n_scenarios * n_marks` values laid out scenario-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableField {
    n_steps: usize,
    n_scenarios: usize,
    n_marks: usize,
    data: Vec<f64>,
}

impl PredictableField {
    pub fn zeros(n_steps: usize, n_scenarios: usize, n_marks: usize) -> Self {
        Self {
            n_steps,
            n_scenarios,
            n_marks,
            data: vec![0.0; n_steps * n_scenarios * n_marks],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn value(&self, k: usize, scenario: usize, mark: usize) -> f64 {
        self.data[(k * self.n_scenarios + scenario) * self.n_marks + mark]
    }

    pub fn set_value(&mut self, k: usize, scenario: usize, mark: usize, v: f64) {
        self.data[(k * self.n_scenarios + scenario) * self.n_marks + mark] = v;
    }

    /// All marks at one (step, scenario) node.
    pub fn marks_at(&self, k: usize, scenario: usize) -> &[f64] {
        let base = (k * self.n_scenarios + scenario) * self.n_marks;
        &self.data[base..base + self.n_marks]
    }

    /// Row of step `k`: `n_scenarios * n_marks` values, scenario-major.
    pub fn step(&self, k: usize) -> &[f64] {
        let w = self.n_scenarios * self.n_marks;
        &self.data[k * w..(k + 1) * w]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.n_scenarios * self.n_marks;
        &mut self.data[k * w..(k + 1) * w]
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
