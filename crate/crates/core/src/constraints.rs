//! Constraint bookkeeping: cost returns, Lagrange multipliers, and the exact
//! team-to-individual threshold split.
//!
//! A constraint watches one of the environment's cost channels and bounds its
//! expected episodic (or discounted) return. Team scope keeps a single
//! multiplier against the team event stream; individual scope gives every
//! agent its own multiplier against its own event stream, with the team
//! threshold divided evenly. The division is done in exact rational
//! arithmetic so the individual thresholds provably sum back to the team
//! threshold for any agent count — floating-point division alone would miss
//! that identity for ratios like 20/3.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, ToPrimitive};

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Who carries the multiplier: the team as a whole or each agent separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Individual,
    Team,
}

/// How a cost stream reduces to a per-episode scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discounting {
    /// Plain sum of the episode's costs (the default: thresholds are read as
    /// "events per episode").
    Episodic,
    /// `sum_t gamma^t c_t`.
    Discounted,
}

/// One constraint as configured for a run.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    /// Cost channel this constraint watches (e.g. "collision").
    pub channel: String,
    pub scope: Scope,
    /// Team-level threshold; individual scope splits it evenly.
    pub threshold: f64,
    pub discounting: Discounting,
    /// Initial multiplier value (0 is a valid choice).
    pub multiplier_init: f64,
    /// Multiplier ascent rate.
    pub lagrange_lr: f64,
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::config(format!(
                "constraint '{}': threshold must be finite and non-negative",
                self.channel
            )));
        }
        if !self.multiplier_init.is_finite() || self.multiplier_init < 0.0 {
            return Err(Error::config(format!(
                "constraint '{}': multiplier_init must be finite and non-negative",
                self.channel
            )));
        }
        if !self.lagrange_lr.is_finite() || self.lagrange_lr < 0.0 {
            return Err(Error::config(format!(
                "constraint '{}': lagrange_lr must be finite and non-negative",
                self.channel
            )));
        }
        Ok(())
    }
}

/// Split a team threshold into `n` exactly-equal rational shares.
///
/// The shares are equal and their exact sum is the team threshold — an
/// identity that holds in rational arithmetic for every `n`, which is the
/// whole point of not doing this in floating point.
pub fn split_threshold(team_threshold: f64, n: usize) -> Result<Vec<BigRational>> {
    if n == 0 {
        return Err(Error::usage("cannot split a threshold across zero agents"));
    }
    let l = BigRational::from_f64(team_threshold)
        .ok_or_else(|| Error::usage("threshold must be finite"))?;
    if l.is_negative() {
        return Err(Error::usage("threshold must be non-negative"));
    }
    let share = l / BigInt::from(n);
    Ok(vec![share; n])
}

/// The `f64` renderings of [`split_threshold`], for use in update rules.
pub fn split_threshold_f64(team_threshold: f64, n: usize) -> Result<Vec<f64>> {
    Ok(split_threshold(team_threshold, n)?
        .into_iter()
        .map(|r| r.to_f64().expect("rational share fits an f64"))
        .collect())
}

/// Reduce one episode's cost stream to a scalar return.
pub fn episode_cost_return<R: Real>(costs: &[R], discounting: Discounting, gamma: R) -> R {
    match discounting {
        Discounting::Episodic => costs.iter().copied().sum(),
        Discounting::Discounted => {
            let mut acc = R::zero();
            let mut w = R::one();
            for c in costs {
                acc = acc + w * *c;
                w = w * gamma;
            }
            acc
        }
    }
}

/// Per-sample Lagrangian penalty `sum_j lambda_j * A_cj`.
pub fn lagrangian_penalty<R: Real>(lambdas: &[R], cost_advantages: &[R]) -> Result<R> {
    if lambdas.len() != cost_advantages.len() {
        return Err(Error::usage(format!(
            "penalty: {} multipliers vs {} cost advantages",
            lambdas.len(),
            cost_advantages.len()
        )));
    }
    Ok(lambdas.iter().zip(cost_advantages.iter()).map(|(l, a)| *l * *a).sum())
}

/// Multiplier state for one constraint: a single entry for team scope, one
/// per agent for individual scope.
#[derive(Debug, Clone)]
pub struct MultiplierState<R> {
    lambda: Vec<R>,
    thresholds: Vec<R>,
    lr: R,
}

impl<R: Real> MultiplierState<R> {
    pub fn new(spec: &ConstraintSpec, n_agents: usize) -> Result<Self> {
        spec.validate()?;
        let thresholds: Vec<R> = match spec.scope {
            Scope::Team => vec![real(spec.threshold)],
            Scope::Individual => split_threshold_f64(spec.threshold, n_agents)?
                .into_iter()
                .map(real)
                .collect(),
        };
        let lambda = vec![real(spec.multiplier_init); thresholds.len()];
        Ok(Self { lambda, thresholds, lr: real(spec.lagrange_lr) })
    }

    pub fn lambda(&self) -> &[R] {
        &self.lambda
    }

    pub fn thresholds(&self) -> &[R] {
        &self.thresholds
    }

    pub fn mean_lambda(&self) -> R {
        let n = real::<R>(self.lambda.len() as f64);
        self.lambda.iter().copied().sum::<R>() / n
    }

    /// Restore persisted multiplier values (checkpoint resume).
    pub fn set_lambda(&mut self, values: &[R]) -> Result<()> {
        if values.len() != self.lambda.len() {
            return Err(Error::usage(format!(
                "expected {} multiplier values, got {}",
                self.lambda.len(),
                values.len()
            )));
        }
        self.lambda.copy_from_slice(values);
        Ok(())
    }

    /// Projected ascent: `lambda_k <- max(0, lambda_k + lr*(J_k - l_k))`,
    /// with `measured[k]` the batch-mean cost return of entry `k`.
    pub fn update(&mut self, measured: &[R]) -> Result<()> {
        if measured.len() != self.lambda.len() {
            return Err(Error::usage(format!(
                "expected {} measured cost returns, got {}",
                self.lambda.len(),
                measured.len()
            )));
        }
        for (k, j) in measured.iter().enumerate() {
            let next = self.lambda[k] + self.lr * (*j - self.thresholds[k]);
            self.lambda[k] = next.max(R::zero());
        }
        Ok(())
    }
}
