//! Numerical laboratory for mean-reflected backward stochastic differential
//! equations driven by compensated Poisson jumps.
//!
//! The crate solves three related problems on a uniform time grid:
//!
//! * the unreflected backward equation with jumps (backward induction with
//!   exact-tree or least-squares conditional expectations),
//! * the single mean-reflected equation, where a deterministic nondecreasing
//!   process `K` keeps `E[l(t, Y_t)] >= 0` with the Skorokhod flatness
//!   condition, and
//! * the `N`-particle approximation, where the empirical constraint is
//!   enforced through the Snell envelope of the empirical reflection process
//!   and its Doob decomposition.
//!
//! On top of the solvers, [`chaos`] measures how fast the particle system
//! converges to independent copies of the limit solution and fits the
//! observed rates.

pub mod bsdej;
pub mod chaos;
pub mod config;
pub mod error;
pub mod jump_model;
pub mod loss;
pub mod mean_reflected;
pub mod particle;
pub mod process;
pub mod regress;
pub mod report;

pub use bsdej::{Backend, BsdejSolution, DriverFamily, DriverSpec, RegressionConfig, TerminalFamily, TerminalSpec};
pub use error::{Error, Result};
pub use jump_model::{JumpModel, MultiEnsemble, PathEnsemble};
pub use loss::{LossFamily, LossSpec, RootConfig, SampleCloud};
pub use mean_reflected::{PicardConfig, SolutionTriple};
pub use particle::{ParticleSolution, ParticleU};
pub use process::{AdaptedProcess, PredictableField};
