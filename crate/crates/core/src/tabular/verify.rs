//! Trust-region cost bound verification on explicit tabular instances.
//!
//! For a single-agent policy update `pi -> pi_bar` (only agent `i` changes),
//! the bound certified here is
//!
//! ```text
//! J_j(pi_bar) <= J_j(pi) + L_j(pi_bar) + nu_j * sum_h max_s KL(pi^h(s) || pi_bar^h(s))
//! nu_j = 4 * gamma * max_{s,u} |A_j(s, u)| / (1 - gamma)^2
//! ```
//!
//! where every quantity on both sides is computed exactly (linear solves, not
//! rollouts), so a negative slack would be a genuine counterexample rather
//! than sampling noise. The Monte-Carlo return estimator lives here too as an
//! independent cross-check that the exact `J` values mean what they claim.

use super::{JointPolicyTable, TabularDecMdp};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::{real, Real};
use rand::Rng;
use serde::Serialize;

/// Per-state and per-agent divergences between two factored policies.
#[derive(Debug, Clone)]
pub struct DivergenceReport<R> {
    /// Joint KL per state (sum over agents of their per-state KL).
    pub joint_kl: Vec<R>,
    /// Joint total variation per state (on the product distributions).
    pub joint_tv: Vec<R>,
    /// `max_s KL` per agent.
    pub per_agent_max_kl: Vec<R>,
    pub max_joint_kl: R,
    pub max_joint_tv: R,
}

impl<R: Real> DivergenceReport<R> {
    /// The trust-region radius used by the bound.
    pub fn sum_per_agent_max_kl(&self) -> R {
        self.per_agent_max_kl.iter().copied().sum()
    }
}

/// One verified instance of the cost bound, all quantities exact.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub channel: usize,
    pub changed_agent: usize,
    /// `J_j(pi)`.
    pub j_base: f64,
    /// `J_j(pi_bar)` — the left-hand side.
    pub j_new: f64,
    /// Surrogate `L_j` of the single-agent change.
    pub surrogate: f64,
    /// `max_{s,u} |A_j|` under `pi`.
    pub max_abs_advantage: f64,
    /// Penalty coefficient `nu_j`.
    pub nu: f64,
    /// `sum_h max_s KL(pi^h || pi_bar^h)`.
    pub kl_sum: f64,
    /// `j_base + surrogate + nu * kl_sum`.
    pub rhs: f64,
    /// `rhs - j_new`; the bound holds iff this is non-negative.
    pub slack: f64,
}

/// Size limits for randomly generated instances.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLimits {
    pub max_states: usize,
    pub max_agents: usize,
    pub max_actions: usize,
    /// Probability that a given (state, joint action) pair carries cost 1.
    pub cost_density: f64,
    pub gamma: f64,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self { max_states: 5, max_agents: 3, max_actions: 3, cost_density: 0.35, gamma: 0.9 }
    }
}

/// Monte-Carlo estimate of a discounted return, with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
}

/// Divergences between two factored policies over the same (states, actions).
pub fn policy_divergences<R: Real>(
    pi: &JointPolicyTable<R>,
    pi_bar: &JointPolicyTable<R>,
    n_states: usize,
    actions: &[usize],
) -> Result<DivergenceReport<R>> {
    pi.validate()?;
    pi_bar.validate()?;
    if pi.n_agents() != pi_bar.n_agents() {
        return Err(Error::usage("policy tables have different agent counts"));
    }
    let n = actions.len();
    let mut joint_kl = vec![R::zero(); n_states];
    let mut joint_tv = vec![R::zero(); n_states];
    let mut per_agent_max_kl = vec![R::zero(); n];
    for s in 0..n_states {
        // KL of a product factorizes into the sum of per-agent KLs.
        for (h, max_kl) in per_agent_max_kl.iter_mut().enumerate() {
            let kl = kl_divergence(pi.row(h, s), pi_bar.row(h, s))?;
            joint_kl[s] += kl;
            *max_kl = max_kl.max(kl);
        }
        joint_tv[s] = joint_tv_at_state(pi, pi_bar, s, actions);
    }
    let max_joint_kl = joint_kl.iter().copied().fold(R::zero(), R::max);
    let max_joint_tv = joint_tv.iter().copied().fold(R::zero(), R::max);
    Ok(DivergenceReport { joint_kl, joint_tv, per_agent_max_kl, max_joint_kl, max_joint_tv })
}

/// `KL(p || q)` over one discrete row; infinite if `p` puts mass where `q`
/// has none.
fn kl_divergence<R: Real>(p: &[R], q: &[R]) -> Result<R> {
    let mut kl = R::zero();
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv == R::zero() {
            continue;
        }
        if *qv == R::zero() {
            return Err(Error::numeric("kl divergence is infinite (support mismatch)"));
        }
        kl += *pv * (*pv / *qv).ln();
    }
    // Round-off can leave a tiny negative value for near-identical rows.
    Ok(kl.max(R::zero()))
}

/// Total variation between the two product distributions at state `s`.
fn joint_tv_at_state<R: Real>(
    pi: &JointPolicyTable<R>,
    pi_bar: &JointPolicyTable<R>,
    s: usize,
    actions: &[usize],
) -> R {
    let u_n: usize = actions.iter().product();
    let mut acc = R::zero();
    for u in 0..u_n {
        let mut rest = u;
        let mut decoded = vec![0usize; actions.len()];
        for i in (0..actions.len()).rev() {
            decoded[i] = rest % actions[i];
            rest /= actions[i];
        }
        let a = pi.joint_prob(s, &decoded);
        let b = pi_bar.joint_prob(s, &decoded);
        acc += (a - b).abs();
    }
    acc / (R::one() + R::one())
}

/// Evaluate every term of the cost bound for a single-agent update and
/// report the slack. Exact end to end.
pub fn verify_team_bound<R: Real>(
    mdp: &TabularDecMdp<R>,
    pi: &JointPolicyTable<R>,
    pi_bar: &JointPolicyTable<R>,
    changed_agent: usize,
    channel: usize,
) -> Result<BoundCheck> {
    mdp.check_policy(pi)?;
    mdp.check_policy(pi_bar)?;
    if changed_agent >= mdp.n_agents() {
        return Err(Error::usage(format!("agent {changed_agent} out of range")));
    }
    for h in 0..mdp.n_agents() {
        if h == changed_agent {
            continue;
        }
        for s in 0..mdp.n_states() {
            if pi.row(h, s) != pi_bar.row(h, s) {
                return Err(Error::usage(format!(
                    "agent {h} differs between the policies but only agent {changed_agent} \
                     is declared changed"
                )));
            }
        }
    }
    let eval = mdp.exact_cost_values(pi, channel)?;
    let eval_bar = mdp.exact_cost_values(pi_bar, channel)?;
    let surrogate = mdp.surrogate_cost(pi, pi_bar, changed_agent, channel)?;
    let div = policy_divergences(pi, pi_bar, mdp.n_states(), mdp.actions())?;
    let max_abs_adv = eval.a.iter().map(|a| a.abs()).fold(R::zero(), R::max);
    let gamma = mdp.gamma();
    let one_minus = R::one() - gamma;
    let nu = real::<R>(4.0) * gamma * max_abs_adv / (one_minus * one_minus);
    let kl_sum = div.sum_per_agent_max_kl();
    let rhs = eval.j + surrogate + nu * kl_sum;
    Ok(BoundCheck {
        channel,
        changed_agent,
        j_base: eval.j.to_f64c(),
        j_new: eval_bar.j.to_f64c(),
        surrogate: surrogate.to_f64c(),
        max_abs_advantage: max_abs_adv.to_f64c(),
        nu: nu.to_f64c(),
        kl_sum: kl_sum.to_f64c(),
        rhs: rhs.to_f64c(),
        slack: (rhs - eval_bar.j).to_f64c(),
    })
}

/// Draw a random Dec-MDP and base policy. Transition rows and policy rows are
/// Dirichlet(1) samples; policy rows are floored at 1e-6 and renormalized so
/// every KL in the verifier stays finite.
pub fn gen_instance<R: Real>(
    master_seed: u64,
    index: u64,
    limits: &InstanceLimits,
) -> Result<(TabularDecMdp<R>, JointPolicyTable<R>)> {
    let mut rng = stream(master_seed, "tabular-instance", index, 0);
    let n_states = rng.gen_range(2..=limits.max_states);
    let n_agents = rng.gen_range(1..=limits.max_agents);
    let actions: Vec<usize> =
        (0..n_agents).map(|_| rng.gen_range(2..=limits.max_actions)).collect();
    let u_n: usize = actions.iter().product();

    let mut transition = Vec::with_capacity(n_states * u_n * n_states);
    for _ in 0..n_states * u_n {
        transition.extend(dirichlet_row::<R>(&mut rng, n_states, 0.0));
    }
    let reward: Vec<R> = (0..n_states * u_n).map(|_| real(rng.gen_range(-1.0..1.0))).collect();
    let costs = vec![(0..n_states * u_n)
        .map(|_| if rng.gen::<f64>() < limits.cost_density { R::one() } else { R::zero() })
        .collect::<Vec<R>>()];
    let rho0 = dirichlet_row::<R>(&mut rng, n_states, 0.0);
    let mdp = TabularDecMdp::new(
        n_states,
        actions.clone(),
        transition,
        reward,
        costs,
        real(limits.gamma),
        rho0,
    )?;

    let rows = actions
        .iter()
        .map(|&a| {
            let mut rows = Vec::with_capacity(n_states * a);
            for _ in 0..n_states {
                rows.extend(dirichlet_row::<R>(&mut rng, a, 1e-6));
            }
            rows
        })
        .collect();
    let pi = JointPolicyTable::new(n_states, actions, rows)?;
    Ok((mdp, pi))
}

/// Perturb exactly one agent of `pi` by mixing each of its rows toward a
/// fresh Dirichlet draw with a random rate in `[0, 0.5]`. Returns the new
/// table and which agent changed.
pub fn perturb_one_agent<R: Real>(
    pi: &JointPolicyTable<R>,
    master_seed: u64,
    index: u64,
) -> (JointPolicyTable<R>, usize) {
    let mut rng = stream(master_seed, "tabular-perturb", index, 0);
    let agent = rng.gen_range(0..pi.n_agents());
    let mix: R = real(rng.gen_range(0.0..=0.5));
    let mut out = pi.clone();
    let n_actions = pi.actions[agent];
    for s in 0..pi.n_states {
        let fresh = dirichlet_row::<R>(&mut rng, n_actions, 1e-6);
        let row = out.row_mut(agent, s);
        let mut sum = R::zero();
        for (r, f) in row.iter_mut().zip(fresh.iter()) {
            *r = (R::one() - mix) * *r + mix * *f;
            sum += *r;
        }
        for r in row.iter_mut() {
            *r = *r / sum;
        }
    }
    (out, agent)
}

/// Dirichlet(1) row via normalized Exp(1) draws, optionally floored and
/// renormalized.
fn dirichlet_row<R: Real>(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<R> {
    let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v = (*v / sum).max(floor);
    }
    let sum: f64 = row.iter().sum();
    row.into_iter().map(|v| real(v / sum)).collect()
}

/// Estimate `J` for one signal channel by truncated rollouts. `horizon`
/// steps of a gamma-discounted sum truncate at most `gamma^horizon / (1 -
/// gamma)` of mass per episode — pick it so that is far below the standard
/// error.
pub fn mc_cost_return<R: Real>(
    mdp: &TabularDecMdp<R>,
    pi: &JointPolicyTable<R>,
    channel: usize,
    episodes: usize,
    horizon: usize,
    master_seed: u64,
) -> Result<MonteCarloEstimate> {
    mdp.check_policy(pi)?;
    let signal = mdp.cost_tensor(channel)?;
    let u_n = mdp.n_joint_actions();
    let gamma = mdp.gamma().to_f64c();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for ep in 0..episodes {
        let mut rng = stream(master_seed, "tabular-mc", ep as u64, 0);
        let mut s = sample_index(&mut rng, mdp.rho0());
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let mut acts = Vec::with_capacity(mdp.n_agents());
            for h in 0..mdp.n_agents() {
                acts.push(sample_index(&mut rng, pi.row(h, s)));
            }
            let u = mdp.encode_joint(&acts);
            ret += disc * signal[s * u_n + u].to_f64c();
            disc *= gamma;
            let row_start = (s * u_n + u) * mdp.n_states();
            s = sample_index(
                &mut rng,
                &mdp.transition[row_start..row_start + mdp.n_states()],
            );
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
        episodes,
    })
}

/// Inverse-CDF draw from a discrete distribution (accumulated in f64 so the
/// stream consumption is identical for every scalar type).
fn sample_index<R: Real>(rng: &mut impl Rng, probs: &[R]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64c();
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}
