//! Finite-intensity jump driver and scenario ensembles.
//!
//! The driving noise is a compensated Poisson random measure over a finite
//! mark space, discretised on a uniform grid with at most one jump per step:
//! in each step of length `dt`, mark `j` fires with probability
//! `p_j = nu_j * dt` and no mark fires with probability `1 - sum_j p_j`.
//! Under this thinning the per-step compensated increment of mark `j` is
//! `1{outcome = j} - nu_j * dt`, which has exact mean zero, and the exact
//! product tree over all steps is finite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on exact-tree enumeration (joint scenario count).
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// Step outcome label: `0` means no jump, `j >= 1` means mark `j - 1` fired.
pub const NO_JUMP: u8 = 0;

/// Finite mark space with constant intensities on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpModel {
    marks: Vec<f64>,
    intensities: Vec<f64>,
    horizon: f64,
    steps: usize,
}

impl JumpModel {
    pub fn new(marks: Vec<f64>, intensities: Vec<f64>, horizon: f64, steps: usize) -> Result<Self> {
        if marks.len() != intensities.len() {
            return Err(Error::InvalidModel(format!(
                "{} marks but {} intensities",
                marks.len(),
                intensities.len()
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!("horizon {horizon} must be positive")));
        }
        if steps == 0 {
            return Err(Error::InvalidModel("steps must be >= 1".into()));
        }
        for (j, &nu) in intensities.iter().enumerate() {
            if !(nu >= 0.0) || !nu.is_finite() {
                return Err(Error::InvalidModel(format!("intensity nu_{j} = {nu} must be >= 0")));
            }
        }
        for (a, &ma) in marks.iter().enumerate() {
            if !ma.is_finite() {
                return Err(Error::InvalidModel(format!("mark e_{a} = {ma} must be finite")));
            }
            for &mb in marks.iter().skip(a + 1) {
                if ma == mb {
                    return Err(Error::InvalidModel(format!("duplicate mark value {ma}")));
                }
            }
        }
        let dt = horizon / steps as f64;
        let total: f64 = intensities.iter().sum::<f64>() * dt;
        if total >= 1.0 {
            return Err(Error::InvalidModel(format!(
                "sum(nu_j) * dt = {total} >= 1; refine the grid so one-jump-per-step thinning stays a probability"
            )));
        }
        Ok(Self {
            marks,
            intensities,
            horizon,
            steps,
        })
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        // t_n is exactly the horizon.
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Per-mark one-step jump probabilities `p_j = nu_j * dt`.
    pub fn jump_probs(&self) -> Vec<f64> {
        let dt = self.dt();
        self.intensities.iter().map(|nu| nu * dt).collect()
    }

    pub fn no_jump_prob(&self) -> f64 {
        1.0 - self.intensities.iter().sum::<f64>() * self.dt()
    }

    /// One-step compensated increment of mark `mark` for a given step outcome:
    /// `1{outcome = mark} - nu_mark * dt`.
    pub fn compensated_increment(&self, outcome: u8, mark: usize) -> f64 {
        assert!(mark < self.num_marks(), "mark index {mark} out of range");
        let indicator = if outcome == (mark as u8 + 1) { 1.0 } else { 0.0 };
        indicator - self.intensities[mark] * self.dt()
    }
}

/// How an ensemble's scenarios were generated.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleKind {
    /// All `(m+1)^n` joint outcomes with exact product weights,
    /// ordered lexicographically in the step outcomes.
    ExactTree,
    /// Independent draws; uniform weights `1/M`.
    MonteCarlo { seed: u64 },
}

/// A weighted set of discrete scenarios for one driver.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    model: JumpModel,
    kind: EnsembleKind,
    n_scenarios: usize,
    /// Outcome labels, scenario-major: `outcomes[s * steps + k]`.
    outcomes: Vec<u8>,
    weights: Vec<f64>,
}

impl PathEnsemble {
    /// Enumerate every joint outcome of the model's `n` steps.
    ///
    /// Scenario `s` encodes its outcomes base `m+1` with step 0 as the most
    /// significant digit, so the ordering is lexicographic and stable.
    pub fn build_exact_tree(model: &JumpModel, cap: Option<usize>) -> Result<Self> {
        let cap = cap.unwrap_or(DEFAULT_ENUMERATION_CAP);
        let b = model.num_marks() + 1;
        let count = (b as u128).checked_pow(model.steps() as u32).unwrap_or(u128::MAX);
        if count > cap as u128 {
            return Err(Error::EnumerationCapExceeded {
                scenarios: count,
                cap,
            });
        }
        let n_scenarios = count as usize;
        let n = model.steps();
        let mut outcomes = vec![0u8; n_scenarios * n];
        let mut weights = vec![0.0; n_scenarios];
        let probs = step_probs(model);
        for s in 0..n_scenarios {
            let mut w = 1.0;
            let mut rem = s;
            // Walk digits from the least significant (last step) upward.
            for k in (0..n).rev() {
                let digit = rem % b;
                rem /= b;
                outcomes[s * n + k] = digit as u8;
                w *= probs[digit];
            }
            weights[s] = w;
        }
        Ok(Self {
            model: model.clone(),
            kind: EnsembleKind::ExactTree,
            n_scenarios,
            outcomes,
            weights,
        })
    }

    /// Draw `m_scenarios` independent paths.
    ///
    /// Streams are derived per scenario from the seed, so identical
    /// `(model, M, seed)` give a bit-identical ensemble regardless of
    /// how the work is scheduled.
    pub fn sample_paths(model: &JumpModel, m_scenarios: usize, seed: u64) -> Result<Self> {
        if m_scenarios == 0 {
            return Err(Error::InvalidModel("Monte Carlo needs at least one scenario".into()));
        }
        let n = model.steps();
        let probs = step_probs(model);
        let mut outcomes = vec![0u8; m_scenarios * n];
        for s in 0..m_scenarios {
            let mut rng = scenario_rng(seed, 0, s as u64);
            sample_scenario(&mut rng, &probs, &mut outcomes[s * n..(s + 1) * n]);
        }
        let w = 1.0 / m_scenarios as f64;
        Ok(Self {
            model: model.clone(),
            kind: EnsembleKind::MonteCarlo { seed },
            n_scenarios: m_scenarios,
            outcomes,
            weights: vec![w; m_scenarios],
        })
    }

    pub fn model(&self) -> &JumpModel {
        &self.model
    }

    pub fn kind(&self) -> &EnsembleKind {
        &self.kind
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.kind, EnsembleKind::ExactTree)
    }

    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn outcome(&self, scenario: usize, step: usize) -> u8 {
        self.outcomes[scenario * self.model.steps() + step]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Branching factor of the exact tree (`m + 1`).
    pub fn branching(&self) -> usize {
        self.model.num_marks() + 1
    }

    /// Running jump counts per mark: `counts[s][j]` after `step_count` steps.
    pub fn counts_at(&self, scenario: usize, step_count: usize) -> Vec<u32> {
        let mut counts = vec![0u32; self.model.num_marks()];
        for k in 0..step_count {
            let o = self.outcome(scenario, k);
            if o != NO_JUMP {
                counts[(o - 1) as usize] += 1;
            }
        }
        counts
    }

    pub fn terminal_counts(&self, scenario: usize) -> Vec<u32> {
        self.counts_at(scenario, self.model.steps())
    }

    /// Full count table, `(n_steps + 1) * n_scenarios * n_marks`, step-major.
    /// Entry `(k, s, j)` is the number of mark-`j` jumps in steps `0..k`.
    pub fn count_table(&self) -> CountTable {
        let n = self.model.steps();
        let m = self.model.num_marks();
        let ns = self.n_scenarios;
        let mut data = vec![0u32; (n + 1) * ns * m];
        for s in 0..ns {
            for k in 0..n {
                let src = (k * ns + s) * m;
                let dst = ((k + 1) * ns + s) * m;
                // copy previous counts, then add this step's jump
                for j in 0..m {
                    data[dst + j] = data[src + j];
                }
                let o = self.outcome(s, k);
                if o != NO_JUMP {
                    data[dst + (o - 1) as usize] += 1;
                }
            }
        }
        CountTable {
            n_steps: n,
            n_scenarios: ns,
            n_marks: m,
            data,
        }
    }

    /// Debug dump: one row per (scenario, step) with the outcome label.
    pub fn dump_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["scenario_id", "step", "outcome_label"])?;
        for s in 0..self.n_scenarios {
            for k in 0..self.model.steps() {
                let o = self.outcome(s, k);
                let label = if o == NO_JUMP {
                    "none".to_string()
                } else {
                    format!("mark_{}", o - 1)
                };
                wtr.write_record([s.to_string(), k.to_string(), label])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Running per-mark jump counts for every (step, scenario).
#[derive(Debug, Clone)]
pub struct CountTable {
    n_steps: usize,
    n_scenarios: usize,
    n_marks: usize,
    data: Vec<u32>,
}

impl CountTable {
    pub fn value(&self, step: usize, scenario: usize, mark: usize) -> u32 {
        self.data[(step * self.n_scenarios + scenario) * self.n_marks + mark]
    }

    pub fn at(&self, step: usize, scenario: usize) -> &[u32] {
        let base = (step * self.n_scenarios + scenario) * self.n_marks;
        &self.data[base..base + self.n_marks]
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Independent copies of the driver for an `N`-particle system.
///
/// Exact trees enumerate the product over particles, so the joint weight of
/// any outcome combination factorises exactly; Monte Carlo scenarios draw
/// every particle from its own stream.
#[derive(Debug, Clone)]
pub struct MultiEnsemble {
    model: JumpModel,
    kind: EnsembleKind,
    n_particles: usize,
    n_scenarios: usize,
    /// Per-particle outcome tables, each laid out like `PathEnsemble::outcomes`.
    outcomes: Vec<Vec<u8>>,
    weights: Vec<f64>,
}

impl MultiEnsemble {
    /// Enumerate the joint product tree over `n_particles` independent drivers.
    ///
    /// The joint per-step alphabet has `(m+1)^N` digits; scenario ids are
    /// lexicographic in (step, then particle) digits.
    pub fn build_joint_exact_tree(
        model: &JumpModel,
        n_particles: usize,
        cap: Option<usize>,
    ) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::InvalidModel("particle count must be >= 1".into()));
        }
        let cap = cap.unwrap_or(DEFAULT_ENUMERATION_CAP);
        let b = model.num_marks() + 1;
        let n = model.steps();
        let digits = (n_particles as u32).checked_mul(n as u32).ok_or_else(|| {
            Error::InvalidModel("particle count * steps overflows".into())
        })?;
        let count = (b as u128).checked_pow(digits).unwrap_or(u128::MAX);
        if count > cap as u128 {
            return Err(Error::EnumerationCapExceeded {
                scenarios: count,
                cap,
            });
        }
        let n_scenarios = count as usize;
        let probs = step_probs(model);
        let mut outcomes = vec![vec![0u8; n_scenarios * n]; n_particles];
        let mut weights = vec![1.0; n_scenarios];
        for s in 0..n_scenarios {
            let mut rem = s;
            // Least significant digit: last particle of the last step.
            for k in (0..n).rev() {
                for i in (0..n_particles).rev() {
                    let digit = rem % b;
                    rem /= b;
                    outcomes[i][s * n + k] = digit as u8;
                    weights[s] *= probs[digit];
                }
            }
        }
        Ok(Self {
            model: model.clone(),
            kind: EnsembleKind::ExactTree,
            n_particles,
            n_scenarios,
            outcomes,
            weights,
        })
    }

    /// Draw `m_scenarios` joint paths; particle `i` in scenario `s` uses the
    /// stream `(master_seed, i, s)`, so particles are independent and the
    /// same indices always reproduce the same path.
    pub fn sample(
        model: &JumpModel,
        n_particles: usize,
        m_scenarios: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if n_particles == 0 || m_scenarios == 0 {
            return Err(Error::InvalidModel(
                "particle and scenario counts must be >= 1".into(),
            ));
        }
        let n = model.steps();
        let probs = step_probs(model);
        let mut outcomes = vec![vec![0u8; m_scenarios * n]; n_particles];
        for (i, table) in outcomes.iter_mut().enumerate() {
            for s in 0..m_scenarios {
                let mut rng = scenario_rng(master_seed, i as u64, s as u64);
                sample_scenario(&mut rng, &probs, &mut table[s * n..(s + 1) * n]);
            }
        }
        let w = 1.0 / m_scenarios as f64;
        Ok(Self {
            model: model.clone(),
            kind: EnsembleKind::MonteCarlo { seed: master_seed },
            n_particles,
            n_scenarios: m_scenarios,
            outcomes,
            weights: vec![w; m_scenarios],
        })
    }

    pub fn model(&self) -> &JumpModel {
        &self.model
    }

    pub fn kind(&self) -> &EnsembleKind {
        &self.kind
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.kind, EnsembleKind::ExactTree)
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn outcome(&self, particle: usize, scenario: usize, step: usize) -> u8 {
        self.outcomes[particle][scenario * self.model.steps() + step]
    }

    /// Joint branching factor `(m+1)^N` of the exact product tree.
    pub fn joint_branching(&self) -> usize {
        (self.model.num_marks() + 1).pow(self.n_particles as u32)
    }

    /// Per-branch probabilities of one joint step on the exact tree,
    /// indexed by the joint digit (particle 0 most significant).
    pub fn joint_branch_probs(&self) -> Vec<f64> {
        let b = self.model.num_marks() + 1;
        let probs = step_probs(&self.model);
        let total = self.joint_branching();
        let mut out = vec![1.0; total];
        for (d, slot) in out.iter_mut().enumerate() {
            let mut rem = d;
            for _ in 0..self.n_particles {
                *slot *= probs[rem % b];
                rem /= b;
            }
        }
        out
    }

    /// Per-particle digit of a joint branch digit.
    pub fn particle_digit(&self, joint_digit: usize, particle: usize) -> u8 {
        let b = self.model.num_marks() + 1;
        let shift = self.n_particles - 1 - particle;
        ((joint_digit / b.pow(shift as u32)) % b) as u8
    }

    /// Joint digit with particle `particle` at `digit` and all others at
    /// no-jump.
    pub fn lone_joint_digit(&self, particle: usize, digit: u8) -> usize {
        let b = self.model.num_marks() + 1;
        let shift = self.n_particles - 1 - particle;
        (digit as usize) * b.pow(shift as u32)
    }

    pub fn terminal_counts(&self, particle: usize, scenario: usize) -> Vec<u32> {
        let n = self.model.steps();
        let mut counts = vec![0u32; self.model.num_marks()];
        for k in 0..n {
            let o = self.outcome(particle, scenario, k);
            if o != NO_JUMP {
                counts[(o - 1) as usize] += 1;
            }
        }
        counts
    }

    /// Count table for one particle.
    pub fn count_table(&self, particle: usize) -> CountTable {
        let n = self.model.steps();
        let m = self.model.num_marks();
        let ns = self.n_scenarios;
        let mut data = vec![0u32; (n + 1) * ns * m];
        for s in 0..ns {
            for k in 0..n {
                let src = (k * ns + s) * m;
                let dst = ((k + 1) * ns + s) * m;
                for j in 0..m {
                    data[dst + j] = data[src + j];
                }
                let o = self.outcome(particle, s, k);
                if o != NO_JUMP {
                    data[dst + (o - 1) as usize] += 1;
                }
            }
        }
        CountTable {
            n_steps: n,
            n_scenarios: ns,
            n_marks: m,
            data,
        }
    }
}

/// One-step outcome distribution `(p_none, p_1, ..., p_m)`.
pub(crate) fn step_probs(model: &JumpModel) -> Vec<f64> {
    let mut probs = Vec::with_capacity(model.num_marks() + 1);
    probs.push(model.no_jump_prob());
    probs.extend(model.jump_probs());
    probs
}

/// Dedicated stream for one (particle, scenario) pair.
///
/// ChaCha streams keyed by the pair keep draws independent of the order in
/// which scenarios are generated.
fn scenario_rng(master_seed: u64, particle: u64, scenario: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    debug_assert!(particle < (1 << 20) && scenario < (1 << 40));
    rng.set_stream((particle << 40) | scenario);
    rng
}

fn sample_scenario(rng: &mut ChaCha8Rng, probs: &[f64], out: &mut [u8]) {
    for slot in out.iter_mut() {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut label = (probs.len() - 1) as u8;
        for (d, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = d as u8;
                break;
            }
        }
        *slot = label;
    }
}
