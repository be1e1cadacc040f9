//! Constrained multi-agent PPO with observation-entropy exploration.
//!
//! The crate is organized around a small set of modules:
//!
//! - [`net`] — hand-rolled differentiable approximators (MLP trunk, GRU cell,
//!   categorical / diagonal-Gaussian heads) with Adam and binary checkpoints.
//! - [`gae`] — generalized advantage estimation over episode slices.
//! - [`env`] — multi-rover and particle worlds with per-step cost channels.
//! - [`oem`] — observation-novelty estimators (visit counts, k-nearest
//!   neighbor) and the reward shaping built on them.
//! - [`constraints`] — constraint specifications, exact rational threshold
//!   splitting, and projected-ascent Lagrange multipliers.
//! - [`trainer`] — rollout collection, clipped policy/value losses, the
//!   per-iteration update loop, greedy evaluation, and checkpoints.
//! - [`tabular`] — exact policy evaluation on small finite MDPs and the
//!   trust-region cost-bound verifier.
//! - [`config`] — the TOML run schema with validation.
//! - [`metrics`] — metrics CSV, run manifests, trajectory dumps, trailing
//!   smoothing, and cross-seed aggregation.
//! - [`harness`] — run archives on disk: training driver, seed sweeps,
//!   resume, checkpoint evaluation, plot-ready aggregation.
//! - [`rng`] — one master seed fanned into named deterministic streams.
//! - [`scalar`], [`error`] — the `Real` float abstraction and the crate-wide
//!   error type.
//!
//! All numeric code is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below pin the `f64` instantiations the binary uses.

pub mod config;
pub mod constraints;
pub mod env;
pub mod error;
pub mod gae;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod oem;
pub mod rng;
pub mod scalar;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations — the precision the CLI, checkpoints, and metrics use.
pub type DenseNet64 = net::DenseNet<f64>;
pub type GruCell64 = net::GruCell<f64>;
pub type Adam64 = net::Adam<f64>;
pub type TabularDecMdp64 = tabular::TabularDecMdp<f64>;
pub type JointPolicyTable64 = tabular::JointPolicyTable<f64>;
pub type RoverWorld64 = env::RoverWorld<f64>;
pub type ParticleWorld64 = env::ParticleWorld<f64>;
pub type Trainer64 = trainer::Trainer<f64>;

/// `f32` instantiations, kept to demonstrate the core is width-agnostic.
pub type DenseNet32 = net::DenseNet<f32>;
pub type GruCell32 = net::GruCell<f32>;
pub type Adam32 = net::Adam<f32>;
