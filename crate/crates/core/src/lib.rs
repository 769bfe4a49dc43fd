//! Adaptive integration schedules for the thermodynamic variational
//! objective, chosen by a time-varying, permutation-invariant GP bandit.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedule`] – the arm type and the baseline schedule generators
//! * [`kernel`] – spatial × temporal product covariance
//! * [`gp`] – exact GP posterior and hyperparameter fitting
//! * [`acquisition`] – GP-UCB, the exploration weight κ and its maximizer
//! * [`tvo`] – path expectations, SNIS and the left/right Riemann bounds
//! * [`models`] – enumerable latent-variable models and TVO training
//! * [`bandit`] – the training loop that interleaves epochs and bandit rounds
//! * [`regret`] – synthetic time-varying objectives, regret and information gain

pub mod acquisition;
pub mod bandit;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod regret;
pub mod schedule;
pub mod tvo;

pub use error::{Error, Result};
pub use gp::GpState;
pub use kernel::{KernelHyperparams, Point};
pub use schedule::{Bounds, Schedule};
