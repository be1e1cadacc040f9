//! Cooperative navigation environments.
//!
//! Both worlds share a small contract ([`World`]): a fixed-length episode, one
//! team reward stream, and one or more *cost channels* reporting safety events
//! both per agent (did agent `i` participate this step?) and for the team
//! (how many events happened this step?). Which scope a training run
//! constrains is decided by the trainer, not the environment.
//!
//! Environments are deterministic given the reset draw and the action
//! sequence; all placement randomness happens in `reset`. That keeps episode
//! replay exact, which the trajectory dumps and several tests rely on.

mod particle;
mod rover;

pub use particle::{ParticleConfig, ParticleTask, ParticleWorld};
pub use rover::{RoverConfig, RoverWorld};

use crate::error::{Error, Result};
use crate::net::ActionValue;
use crate::scalar::Real;
use rand_chacha::ChaCha12Rng;

/// What kind of action head an agent needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpec {
    /// `n` mutually exclusive choices.
    Discrete(usize),
    /// A free vector of the given dimension.
    Continuous(usize),
}

impl ActionSpec {
    /// Reject an action value of the wrong shape for this spec.
    pub fn check<R: Real>(&self, action: &ActionValue<R>) -> Result<()> {
        match (self, action) {
            (ActionSpec::Discrete(n), ActionValue::Discrete(a)) if a < n => Ok(()),
            (ActionSpec::Continuous(d), ActionValue::Continuous(v)) if v.len() == *d => Ok(()),
            _ => Err(Error::usage("action does not match the environment's action spec")),
        }
    }
}

/// Observations handed out at reset and after every step.
#[derive(Debug, Clone)]
pub struct ObsPacket<R> {
    /// One observation vector per cooperating agent.
    pub agent_obs: Vec<Vec<R>>,
    /// Observation for the adversary, when the world has one.
    pub adversary_obs: Option<Vec<R>>,
    /// Per-agent exploration weight at the current state (1 when the world
    /// has no notion of locally important states).
    pub betas: Vec<R>,
}

/// One cost channel's events for a single step.
#[derive(Debug, Clone)]
pub struct CostEvent<R> {
    /// 1 if the agent took part in any counted event this step, else 0.
    pub per_agent: Vec<R>,
    /// Number of counted events this step (a colliding pair is one event).
    pub team: R,
}

/// Everything a step returns.
#[derive(Debug, Clone)]
pub struct StepResult<R> {
    pub obs: ObsPacket<R>,
    /// Team extrinsic reward for this step.
    pub reward: R,
    /// Reward for the adversary's separate learner, when present.
    pub adversary_reward: R,
    /// One entry per cost channel, in [`World::cost_channels`] order.
    pub costs: Vec<CostEvent<R>>,
    /// True exactly at the end of the fixed horizon.
    pub done: bool,
}

/// Common surface of the navigation environments.
pub trait World<R: Real>: Clone + Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_spec(&self) -> ActionSpec;
    fn horizon(&self) -> usize;
    /// Names of the cost channels, fixed per world.
    fn cost_channels(&self) -> Vec<String>;
    /// Per-dimension observation bounds `(lo, hi)` used by count-based
    /// exploration to quantize the observation space.
    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn has_adversary(&self) -> bool {
        false
    }
    fn adversary_obs_dim(&self) -> usize {
        0
    }
    fn adversary_action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete(1)
    }

    /// Start a new episode; all placement randomness draws from `rng`.
    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Result<ObsPacket<R>>;

    /// Advance one step. `adversary_action` must be `Some` iff the world has
    /// an adversary. Deterministic given the current state and actions.
    fn step(
        &mut self,
        actions: &[ActionValue<R>],
        adversary_action: Option<&ActionValue<R>>,
    ) -> Result<StepResult<R>>;

    /// Positions and other display state for trajectory dumps.
    fn snapshot(&self) -> serde_json::Value;
}

/// Either concrete world behind one face, so the trainer stays monomorphic.
#[derive(Debug, Clone)]
pub enum EnvKind<R> {
    Rover(RoverWorld<R>),
    Particle(ParticleWorld<R>),
}

macro_rules! delegate {
    ($self:ident, $w:ident => $body:expr) => {
        match $self {
            EnvKind::Rover($w) => $body,
            EnvKind::Particle($w) => $body,
        }
    };
}

impl<R: Real> World<R> for EnvKind<R> {
    fn n_agents(&self) -> usize {
        delegate!(self, w => w.n_agents())
    }
    fn obs_dim(&self) -> usize {
        delegate!(self, w => w.obs_dim())
    }
    fn action_spec(&self) -> ActionSpec {
        delegate!(self, w => w.action_spec())
    }
    fn horizon(&self) -> usize {
        delegate!(self, w => w.horizon())
    }
    fn cost_channels(&self) -> Vec<String> {
        delegate!(self, w => w.cost_channels())
    }
    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        delegate!(self, w => w.obs_bounds())
    }
    fn has_adversary(&self) -> bool {
        delegate!(self, w => w.has_adversary())
    }
    fn adversary_obs_dim(&self) -> usize {
        delegate!(self, w => w.adversary_obs_dim())
    }
    fn adversary_action_spec(&self) -> ActionSpec {
        delegate!(self, w => w.adversary_action_spec())
    }
    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Result<ObsPacket<R>> {
        delegate!(self, w => w.reset(rng))
    }
    fn step(
        &mut self,
        actions: &[ActionValue<R>],
        adversary_action: Option<&ActionValue<R>>,
    ) -> Result<StepResult<R>> {
        delegate!(self, w => w.step(actions, adversary_action))
    }
    fn snapshot(&self) -> serde_json::Value {
        delegate!(self, w => w.snapshot())
    }
}

/// Euclidean distance between two 2-d points.
pub(crate) fn dist2<R: Real>(a: (R, R), b: (R, R)) -> R {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}
