//! Generalized advantage estimation over one episode's streams.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Advantages and value-regression targets for a single episode.
///
/// `rewards[t]` is the payoff of step `t` and `values[t]` the critic's
/// estimate at the state where that step was taken. `bootstrap` is the value
/// credited to the state after the last step: zero when the episode truly
/// ended (there is no future), the critic's estimate of the final state when
/// the episode was cut off by a time limit mid-task.
///
/// With `td = r[t] + gamma*V[t+1] - V[t]`, advantages follow
/// `A[t] = td[t] + gamma*lambda*A[t+1]` and targets are `A[t] + V[t]`.
pub fn gae<R: Real>(
    rewards: &[R],
    values: &[R],
    bootstrap: R,
    gamma: R,
    lambda: R,
) -> Result<(Vec<R>, Vec<R>)> {
    if rewards.is_empty() {
        return Err(Error::usage("gae: empty episode"));
    }
    if rewards.len() != values.len() {
        return Err(Error::usage(format!(
            "gae: {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let t_max = rewards.len();
    let mut adv = vec![R::zero(); t_max];
    let mut acc = R::zero();
    for t in (0..t_max).rev() {
        let next_v = if t + 1 == t_max { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values.iter()).map(|(a, v)| *a + *v).collect();
    Ok((adv, targets))
}
