//! Learning discrete-state stochastic dynamics with LSTM and Transformer
//! language models, and checking whether the slow kinetics survive.
//!
//! The crate is organised as a pipeline:
//!
//! * [`surrogate`] produces ground-truth dynamics (overdamped Langevin on a
//!   two-basin potential, exact Markov-chain samplers).
//! * [`discretize`] turns continuous frames into state trajectories.
//! * [`msm`] estimates transition matrices and kinetic observables
//!   (implied timescales, mean first-passage times, free energies).
//! * [`coarse_grain`] implements PCCA+ lumping, recrossing removal and
//!   run-length recoding.
//! * [`seqmodel`] holds the from-scratch LSTM / Transformer models with exact
//!   gradients, Adam and the warmup schedule, batching and training.
//! * [`eval`] generates trajectories autoregressively and builds
//!   bootstrap-backed comparison reports.

pub mod coarse_grain;
pub mod discretize;
pub mod error;
pub mod eval;
pub mod io;
pub mod msm;
pub mod rng;
pub mod seqmodel;
pub mod surrogate;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{FrameSeries, Trajectory};

pub use msm::{CountMatrix, SpectralSummary, Timescale, TransitionModel};
pub use nalgebra::DMatrix;
