//! Advantage computation and the clipped Lagrangian parameter updates.
//!
//! The policy objective per sample is
//!
//! ```text
//! min(q·A, clip(q, 1−ε, 1+ε)·A)  −  q·Σ_j λ_j·A_cj  +  κ_H·entropy
//! ```
//!
//! maximized by Adam on its negation. `q` is the likelihood ratio against the
//! collection-time log-probability; its gradient flows only through the
//! unclipped branch of the min. Reward advantages are standardized per batch;
//! cost advantages are left raw so the multipliers keep their
//! threshold-relative scale.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::constraints::Scope;
use crate::error::{Error, Result};
use crate::gae::gae;
use crate::net::sample::{CatEval, GaussEval};
use crate::net::{ActionValue, Adam, DenseNet, Head, Tape};
use crate::rng;
use crate::scalar::{real, Real};

use super::rollout::{actor_input, joint_obs, RolloutBatch};
use super::HyperParams;

/// The cost critics of one constraint: a single joint-input network for team
/// scope, one local-input network per agent for individual scope.
pub struct CostCriticSet<R> {
    pub scope: Scope,
    /// Index of the watched channel in the world's cost-channel list.
    pub channel: usize,
    pub nets: Vec<DenseNet<R>>,
    pub opts: Vec<Adam<R>>,
}

/// One constraint's multiplier values as the policy update consumes them:
/// one entry for team scope, one per agent for individual scope.
#[derive(Debug, Clone)]
pub struct MultiplierInfo<R> {
    pub scope: Scope,
    pub lambda: Vec<R>,
}

/// Per-constraint advantages and regression targets.
#[derive(Debug, Clone)]
pub enum ConstraintAdvantages<R> {
    /// `[episode][t]`, shared by every agent's update.
    Team { adv: Vec<Vec<R>>, targets: Vec<Vec<R>> },
    /// `[episode][agent][t]`.
    Individual { adv: Vec<Vec<Vec<R>>>, targets: Vec<Vec<Vec<R>>> },
}

/// Everything the update phase derives from a collected batch.
#[derive(Debug, Clone)]
pub struct Advantages<R> {
    /// `[episode][t]` concatenated observations (inputs of the joint critics).
    pub joint: Vec<Vec<Vec<R>>>,
    /// `[episode][t]` standardized reward advantages.
    pub reward_adv: Vec<Vec<R>>,
    /// `[episode][t]` reward-critic regression targets.
    pub reward_targets: Vec<Vec<R>>,
    /// Per constraint, aligned with the trainer's constraint list.
    pub cost: Vec<ConstraintAdvantages<R>>,
}

/// Critic values, GAE, and batch standardization of the reward advantages.
pub fn compute_advantages<R: Real>(
    batch: &RolloutBatch<R>,
    critic: &DenseNet<R>,
    cost_sets: &[CostCriticSet<R>],
    gamma: R,
    lam: R,
) -> Result<Advantages<R>> {
    let joint: Vec<Vec<Vec<R>>> = batch
        .episodes
        .iter()
        .map(|ep| (0..ep.len()).map(|t| joint_obs(&ep.obs[t])).collect())
        .collect();

    let mut reward_adv = Vec::with_capacity(batch.n_episodes());
    let mut reward_targets = Vec::with_capacity(batch.n_episodes());
    for (e, ep) in batch.episodes.iter().enumerate() {
        let values: Vec<R> = joint[e].iter().map(|x| critic.infer(x)[0]).collect();
        // The horizon end is a true termination, so the bootstrap is zero.
        let (a, t) = gae(&ep.shaped_rewards, &values, R::zero(), gamma, lam)?;
        reward_adv.push(a);
        reward_targets.push(t);
    }
    standardize(&mut reward_adv);

    let mut cost = Vec::with_capacity(cost_sets.len());
    for set in cost_sets {
        match set.scope {
            Scope::Team => {
                let mut adv = Vec::with_capacity(batch.n_episodes());
                let mut targets = Vec::with_capacity(batch.n_episodes());
                for (e, ep) in batch.episodes.iter().enumerate() {
                    let values: Vec<R> = joint[e].iter().map(|x| set.nets[0].infer(x)[0]).collect();
                    let (a, t) = gae(&ep.team_costs[set.channel], &values, R::zero(), gamma, lam)?;
                    adv.push(a);
                    targets.push(t);
                }
                cost.push(ConstraintAdvantages::Team { adv, targets });
            }
            Scope::Individual => {
                let mut adv = Vec::with_capacity(batch.n_episodes());
                let mut targets = Vec::with_capacity(batch.n_episodes());
                for ep in &batch.episodes {
                    let n_agents = ep.obs[0].len();
                    let mut ep_adv = Vec::with_capacity(n_agents);
                    let mut ep_tgt = Vec::with_capacity(n_agents);
                    for i in 0..n_agents {
                        let values: Vec<R> =
                            (0..ep.len()).map(|t| set.nets[i].infer(&ep.obs[t][i])[0]).collect();
                        let costs: Vec<R> =
                            (0..ep.len()).map(|t| ep.agent_costs[set.channel][t][i]).collect();
                        let (a, t) = gae(&costs, &values, R::zero(), gamma, lam)?;
                        ep_adv.push(a);
                        ep_tgt.push(t);
                    }
                    adv.push(ep_adv);
                    targets.push(ep_tgt);
                }
                cost.push(ConstraintAdvantages::Individual { adv, targets });
            }
        }
    }
    Ok(Advantages { joint, reward_adv, reward_targets, cost })
}

/// In-place per-batch standardization to mean 0, standard deviation 1.
pub fn standardize<R: Real>(vals: &mut [Vec<R>]) {
    let n: usize = vals.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let count = real::<R>(n as f64);
    let mean = vals.iter().flatten().copied().sum::<R>() / count;
    let var = vals.iter().flatten().map(|v| (*v - mean) * (*v - mean)).sum::<R>() / count;
    let denom = var.sqrt() + real::<R>(1e-8);
    for row in vals.iter_mut() {
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
}

/// Deterministic Fisher–Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Split `0..n` into `m` contiguous near-equal ranges (empty ones dropped).
pub fn minibatch_slices(n: usize, m: usize) -> Vec<std::ops::Range<usize>> {
    (0..m).map(|b| b * n / m..(b + 1) * n / m).filter(|r| !r.is_empty()).collect()
}

/// The clipped reward surrogate and its derivative with respect to the new
/// log-probability: the gradient flows only when the unclipped branch wins
/// the min (ties included — there the clip is inactive anyway).
pub fn clipped_surrogate<R: Real>(q: R, adv: R, clip: R) -> (R, R) {
    let unclipped = q * adv;
    let clipped = q.max(R::one() - clip).min(R::one() + clip) * adv;
    if unclipped <= clipped {
        (unclipped, q * adv)
    } else {
        (clipped, R::zero())
    }
}

enum HeadEval<R> {
    Cat(CatEval<R>),
    Gauss(GaussEval<R>),
}

impl<R: Real> HeadEval<R> {
    fn logp(&self) -> R {
        match self {
            HeadEval::Cat(e) => e.logp,
            HeadEval::Gauss(e) => e.logp,
        }
    }

    fn entropy(&self) -> R {
        match self {
            HeadEval::Cat(e) => e.entropy,
            HeadEval::Gauss(e) => e.entropy,
        }
    }
}

fn eval_policy_at<R: Real>(
    actor: &DenseNet<R>,
    input: &[R],
    action: &ActionValue<R>,
) -> Result<(Tape<R>, HeadEval<R>)> {
    let (out, tape) = actor.forward(input);
    let eval = match (actor.head(), action) {
        (Head::Linear, ActionValue::Discrete(a)) => HeadEval::Cat(CatEval::new(&out, *a)),
        (Head::Gaussian, ActionValue::Continuous(v)) => {
            HeadEval::Gauss(GaussEval::new(&out, actor.logstd(), v))
        }
        _ => return Err(Error::usage("recorded action does not match the policy head")),
    };
    Ok((tape, eval))
}

/// One policy training sample, fully resolved.
#[derive(Clone)]
pub struct PolicySample<R> {
    pub input: Vec<R>,
    pub action: ActionValue<R>,
    pub logp_old: R,
    pub reward_adv: R,
    /// `Σ_j λ_j·A_cj` at this sample (0 for unconstrained updates).
    pub penalty_adv: R,
    /// Extra scale on both advantage terms (the optional `1/(1+Σλ)`
    /// renormalization; 1 when disabled).
    pub scale: R,
}

fn sample_objective_pieces<R: Real>(
    eval: &HeadEval<R>,
    s: &PolicySample<R>,
    clip: R,
    kappa: R,
) -> (R, R) {
    let q = (eval.logp() - s.logp_old).exp();
    let (surr, d_surr) = clipped_surrogate(q, s.reward_adv * s.scale, clip);
    let penalty = s.penalty_adv * s.scale;
    let objective = surr - q * penalty + kappa * eval.entropy();
    let d_obj_d_logp = d_surr - q * penalty;
    (objective, d_obj_d_logp)
}

/// Mean loss (negated objective) of one minibatch at the current parameters.
pub fn policy_minibatch_loss<R: Real>(
    actor: &DenseNet<R>,
    sample: &dyn Fn(usize) -> PolicySample<R>,
    clip: R,
    kappa: R,
    idxs: &[usize],
) -> Result<R> {
    let mb = real::<R>(idxs.len() as f64);
    let mut loss = R::zero();
    for &s in idxs {
        let s = sample(s);
        let (_, eval) = eval_policy_at(actor, &s.input, &s.action)?;
        let (objective, _) = sample_objective_pieces(&eval, &s, clip, kappa);
        loss -= objective / mb;
    }
    Ok(loss)
}

/// Minibatch loss and its gradient with respect to every actor parameter.
pub fn policy_minibatch_grad<R: Real>(
    actor: &DenseNet<R>,
    sample: &dyn Fn(usize) -> PolicySample<R>,
    clip: R,
    kappa: R,
    idxs: &[usize],
) -> Result<(R, Vec<R>)> {
    let mb = real::<R>(idxs.len() as f64);
    let mut grad = vec![R::zero(); actor.n_params()];
    let mut loss = R::zero();
    let logstd_range = actor.logstd_range();
    for &s in idxs {
        let s = sample(s);
        let (tape, eval) = eval_policy_at(actor, &s.input, &s.action)?;
        let (objective, d_obj_d_logp) = sample_objective_pieces(&eval, &s, clip, kappa);
        loss -= objective / mb;
        // Gradient of the minibatch *loss*: negate and average.
        let g_logp = -d_obj_d_logp / mb;
        let g_ent = -kappa / mb;
        match &eval {
            HeadEval::Cat(e) => {
                let d_logits = e.d_logits(g_logp, g_ent);
                actor.backward(&tape, &d_logits, &mut grad);
            }
            HeadEval::Gauss(e) => {
                let d_mean = e.d_mean(g_logp);
                actor.backward(&tape, &d_mean, &mut grad);
                let range = logstd_range.clone().expect("gaussian head has log-std slots");
                for (g, d) in grad[range].iter_mut().zip(e.d_logstd(g_logp, g_ent)) {
                    *g += d;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// One clipped-objective minibatch step. Returns the minibatch loss and
/// whether the optimizer actually stepped — a non-finite loss or gradient
/// skips the step and leaves every parameter untouched.
pub fn policy_minibatch_step<R: Real>(
    actor: &mut DenseNet<R>,
    opt: &mut Adam<R>,
    sample: &dyn Fn(usize) -> PolicySample<R>,
    clip: R,
    kappa: R,
    idxs: &[usize],
) -> Result<(R, bool)> {
    let (loss, grad) = policy_minibatch_grad(actor, sample, clip, kappa, idxs)?;
    if !loss.is_finite() {
        return Ok((loss, false));
    }
    match opt.step(actor.params_mut(), &grad) {
        Ok(()) => Ok((loss, true)),
        Err(Error::Numeric(_)) => Ok((loss, false)),
        Err(e) => Err(e),
    }
}

/// Resolve the cooperative policy sample `(episode, t, agent)` encoded as
/// `s = (episode * horizon + t) * n_agents + agent`.
fn cooperative_sample<R: Real>(
    batch: &RolloutBatch<R>,
    adv: &Advantages<R>,
    multipliers: &[MultiplierInfo<R>],
    lambda_scaled: bool,
    horizon: usize,
    n_agents: usize,
    s: usize,
) -> PolicySample<R> {
    let ep = s / (horizon * n_agents);
    let rem = s % (horizon * n_agents);
    let (t, i) = (rem / n_agents, rem % n_agents);
    let episode = &batch.episodes[ep];
    let mut penalty_adv = R::zero();
    let mut lambda_sum = R::zero();
    for (m, ca) in multipliers.iter().zip(adv.cost.iter()) {
        let (l, a) = match (m.scope, ca) {
            (Scope::Team, ConstraintAdvantages::Team { adv, .. }) => (m.lambda[0], adv[ep][t]),
            (Scope::Individual, ConstraintAdvantages::Individual { adv, .. }) => {
                (m.lambda[i], adv[ep][i][t])
            }
            _ => unreachable!("multiplier scope and advantage layout are built together"),
        };
        penalty_adv += l * a;
        lambda_sum += l;
    }
    let scale = if lambda_scaled { R::one() / (R::one() + lambda_sum) } else { R::one() };
    PolicySample {
        input: actor_input(&episode.obs[t][i], i, n_agents),
        action: episode.actions[t][i].clone(),
        logp_old: episode.logps[t][i],
        reward_adv: adv.reward_adv[ep][t],
        penalty_adv,
        scale,
    }
}

#[derive(Debug, Clone)]
pub struct PolicyStats {
    /// Mean loss over the minibatches that stepped (NaN if none did).
    pub mean_loss: f64,
    pub skipped: usize,
}

/// Full epoch/minibatch sweep of the cooperative policy.
pub fn policy_epochs<R: Real>(
    actor: &mut DenseNet<R>,
    opt: &mut Adam<R>,
    batch: &RolloutBatch<R>,
    adv: &Advantages<R>,
    multipliers: &[MultiplierInfo<R>],
    hp: &HyperParams,
    kappa: f64,
    seed: u64,
    iteration: u64,
) -> Result<PolicyStats> {
    let horizon = batch.episodes[0].len();
    let n_agents = batch.episodes[0].obs[0].len();
    let n = batch.n_episodes() * horizon * n_agents;
    let clip = real::<R>(hp.clip);
    let kap = real::<R>(kappa);
    let lambda_scaled = hp.lambda_scaled_advantages;
    let sample =
        |s: usize| cooperative_sample(batch, adv, multipliers, lambda_scaled, horizon, n_agents, s);
    let mut losses = Vec::new();
    let mut skipped = 0;
    for epoch in 0..hp.epochs {
        let mut rng = rng::stream(seed, "shuffle-pi", iteration, epoch as u64);
        let perm = shuffled_indices(n, &mut rng);
        for range in minibatch_slices(n, hp.minibatches) {
            let (loss, stepped) =
                policy_minibatch_step(actor, opt, &sample, clip, kap, &perm[range])?;
            if stepped {
                losses.push(loss.to_f64c());
            } else {
                skipped += 1;
                eprintln!(
                    "incident: policy update skipped at iteration {iteration} epoch {epoch} \
                     (non-finite loss or gradient)"
                );
            }
        }
    }
    Ok(PolicyStats { mean_loss: mean_or_nan(&losses), skipped })
}

fn mean_or_nan(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// One half-MSE regression minibatch for a single critic network.
fn regress_minibatch<R: Real>(
    net: &mut DenseNet<R>,
    opt: &mut Adam<R>,
    idxs: &[usize],
    input: &dyn Fn(usize) -> Vec<R>,
    target: &dyn Fn(usize) -> R,
) -> Result<(R, bool)> {
    let mb = real::<R>(idxs.len() as f64);
    let half = real::<R>(0.5);
    let mut grad = vec![R::zero(); net.n_params()];
    let mut loss = R::zero();
    for &s in idxs {
        let x = input(s);
        let (out, tape) = net.forward(&x);
        let diff = out[0] - target(s);
        loss += half * diff * diff / mb;
        net.backward(&tape, &[diff / mb], &mut grad);
    }
    if !loss.is_finite() {
        return Ok((loss, false));
    }
    match opt.step(net.params_mut(), &grad) {
        Ok(()) => Ok((loss, true)),
        Err(Error::Numeric(_)) => Ok((loss, false)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct CriticStats {
    pub value_loss: f64,
    /// One entry per constraint (individual scope averages its agents' nets).
    pub cost_value_losses: Vec<f64>,
    pub skipped: usize,
}

/// Full epoch/minibatch regression sweep for the reward critic and every
/// cost critic. All networks share one minibatch permutation per epoch, so a
/// variant that instantiates fewer critics sees the reward critic's data in
/// exactly the same order.
pub fn critic_epochs<R: Real>(
    critic: &mut DenseNet<R>,
    critic_opt: &mut Adam<R>,
    cost_sets: &mut [CostCriticSet<R>],
    batch: &RolloutBatch<R>,
    adv: &Advantages<R>,
    hp: &HyperParams,
    seed: u64,
    iteration: u64,
) -> Result<CriticStats> {
    let horizon = batch.episodes[0].len();
    let n = batch.n_episodes() * horizon;
    let mut value_losses = Vec::new();
    let mut cost_losses = vec![Vec::new(); cost_sets.len()];
    let mut skipped = 0;
    for epoch in 0..hp.epochs {
        let mut rng = rng::stream(seed, "shuffle-v", iteration, epoch as u64);
        let perm = shuffled_indices(n, &mut rng);
        for range in minibatch_slices(n, hp.minibatches) {
            let idxs = &perm[range];
            let (loss, stepped) = regress_minibatch(
                critic,
                critic_opt,
                idxs,
                &|s| adv.joint[s / horizon][s % horizon].clone(),
                &|s| adv.reward_targets[s / horizon][s % horizon],
            )?;
            if stepped {
                value_losses.push(loss.to_f64c());
            } else {
                skipped += 1;
                eprintln!("incident: reward-critic update skipped at iteration {iteration} epoch {epoch}");
            }
            for (k, set) in cost_sets.iter_mut().enumerate() {
                match &adv.cost[k] {
                    ConstraintAdvantages::Team { targets, .. } => {
                        let (loss, stepped) = regress_minibatch(
                            &mut set.nets[0],
                            &mut set.opts[0],
                            idxs,
                            &|s| adv.joint[s / horizon][s % horizon].clone(),
                            &|s| targets[s / horizon][s % horizon],
                        )?;
                        if stepped {
                            cost_losses[k].push(loss.to_f64c());
                        } else {
                            skipped += 1;
                            eprintln!(
                                "incident: cost-critic update skipped at iteration {iteration} epoch {epoch}"
                            );
                        }
                    }
                    ConstraintAdvantages::Individual { targets, .. } => {
                        for i in 0..set.nets.len() {
                            let (loss, stepped) = regress_minibatch(
                                &mut set.nets[i],
                                &mut set.opts[i],
                                idxs,
                                &|s| batch.episodes[s / horizon].obs[s % horizon][i].clone(),
                                &|s| targets[s / horizon][i][s % horizon],
                            )?;
                            if stepped {
                                cost_losses[k].push(loss.to_f64c());
                            } else {
                                skipped += 1;
                                eprintln!(
                                    "incident: cost-critic update skipped at iteration {iteration} epoch {epoch}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(CriticStats {
        value_loss: mean_or_nan(&value_losses),
        cost_value_losses: cost_losses.iter().map(|l| mean_or_nan(l)).collect(),
        skipped,
    })
}

#[derive(Debug, Clone)]
pub struct AdversaryStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub skipped: usize,
}

/// Plain PPO for the adversary's separate learner: clipped surrogate, no
/// constraints, no entropy bonus, its own shuffle streams.
pub fn adversary_update<R: Real>(
    batch: &RolloutBatch<R>,
    actor: &mut DenseNet<R>,
    actor_opt: &mut Adam<R>,
    critic: &mut DenseNet<R>,
    critic_opt: &mut Adam<R>,
    hp: &HyperParams,
    seed: u64,
    iteration: u64,
) -> Result<AdversaryStats> {
    let gamma = real::<R>(hp.gamma);
    let lam = real::<R>(hp.gae_lambda);
    let mut advs = Vec::with_capacity(batch.n_episodes());
    let mut targets = Vec::with_capacity(batch.n_episodes());
    for ep in &batch.episodes {
        let a = ep
            .adversary
            .as_ref()
            .ok_or_else(|| Error::usage("adversary update needs adversary streams in the batch"))?;
        let values: Vec<R> = a.obs.iter().map(|x| critic.infer(x)[0]).collect();
        let (ad, tg) = gae(&a.rewards, &values, R::zero(), gamma, lam)?;
        advs.push(ad);
        targets.push(tg);
    }
    standardize(&mut advs);

    let horizon = batch.episodes[0].len();
    let n = batch.n_episodes() * horizon;
    let clip = real::<R>(hp.clip);
    let sample = |s: usize| {
        let (ep, t) = (s / horizon, s % horizon);
        let a = batch.episodes[ep].adversary.as_ref().expect("checked above");
        PolicySample {
            input: a.obs[t].clone(),
            action: a.actions[t].clone(),
            logp_old: a.logps[t],
            reward_adv: advs[ep][t],
            penalty_adv: R::zero(),
            scale: R::one(),
        }
    };
    let mut policy_losses = Vec::new();
    let mut value_losses = Vec::new();
    let mut skipped = 0;
    for epoch in 0..hp.epochs {
        let mut rng = rng::stream(seed, "shuffle-adv-pi", iteration, epoch as u64);
        let perm = shuffled_indices(n, &mut rng);
        for range in minibatch_slices(n, hp.minibatches) {
            let (loss, stepped) =
                policy_minibatch_step(actor, actor_opt, &sample, clip, R::zero(), &perm[range])?;
            if stepped {
                policy_losses.push(loss.to_f64c());
            } else {
                skipped += 1;
                eprintln!("incident: adversary policy update skipped at iteration {iteration} epoch {epoch}");
            }
        }
    }
    for epoch in 0..hp.epochs {
        let mut rng = rng::stream(seed, "shuffle-adv-v", iteration, epoch as u64);
        let perm = shuffled_indices(n, &mut rng);
        for range in minibatch_slices(n, hp.minibatches) {
            let (loss, stepped) = regress_minibatch(
                critic,
                critic_opt,
                &perm[range],
                &|s| batch.episodes[s / horizon].adversary.as_ref().expect("checked above").obs[s % horizon].clone(),
                &|s| targets[s / horizon][s % horizon],
            )?;
            if stepped {
                value_losses.push(loss.to_f64c());
            } else {
                skipped += 1;
                eprintln!("incident: adversary critic update skipped at iteration {iteration} epoch {epoch}");
            }
        }
    }
    Ok(AdversaryStats {
        policy_loss: mean_or_nan(&policy_losses),
        value_loss: mean_or_nan(&value_losses),
        skipped,
    })
}
