//! Episode collection and novelty shaping of collected batches.
//!
//! Each episode owns two private random streams derived from the master seed
//! and the `(iteration, episode)` pair — one for world placement, one for
//! action sampling — so a batch's contents depend only on the seed and the
//! network parameters, never on how many workers collected it or in what
//! order they finished. Workers return episodes keyed by index and the batch
//! stores them in index order.

use rayon::prelude::*;

use crate::env::{EnvKind, World};
use crate::error::{Error, Result};
use crate::net::sample::{categorical, gaussian, SampleMode};
use crate::net::{ActionValue, DenseNet, Head};
use crate::oem::{shape_step, Estimator, Mixing, ObservationBuffer};
use crate::rng;
use crate::scalar::Real;

/// The adversary's half of an episode, when the world has one.
#[derive(Debug, Clone)]
pub struct AdversaryEpisode<R> {
    pub obs: Vec<Vec<R>>,
    pub actions: Vec<ActionValue<R>>,
    pub logps: Vec<R>,
    pub rewards: Vec<R>,
}

/// One episode's aligned streams. Index `t` always refers to the state the
/// step-`t` action was taken in; the observation after the final step is not
/// stored (nothing acts there, and the horizon end is a true termination).
#[derive(Debug, Clone)]
pub struct EpisodeData<R> {
    /// `[t][agent][dim]` local observations.
    pub obs: Vec<Vec<Vec<R>>>,
    /// `[t][agent]` exploration weights reported by the world.
    pub betas: Vec<Vec<R>>,
    /// `[t][agent]` sampled actions.
    pub actions: Vec<Vec<ActionValue<R>>>,
    /// `[t][agent]` exact log-probabilities under the collecting policy.
    pub logps: Vec<Vec<R>>,
    /// `[t]` extrinsic team reward (what gets reported).
    pub rewards: Vec<R>,
    /// `[t]` reward stream the critics and advantages actually train on —
    /// equal to `rewards` until novelty shaping rewrites it.
    pub shaped_rewards: Vec<R>,
    /// `[channel][t]` team event counts.
    pub team_costs: Vec<Vec<R>>,
    /// `[channel][t][agent]` per-agent event indicators.
    pub agent_costs: Vec<Vec<Vec<R>>>,
    pub adversary: Option<AdversaryEpisode<R>>,
    /// World display states (`horizon + 1` frames), kept only when dumping
    /// trajectories.
    pub snapshots: Option<Vec<serde_json::Value>>,
}

impl<R: Real> EpisodeData<R> {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Undiscounted sum of the extrinsic rewards.
    pub fn episode_return(&self) -> R {
        self.rewards.iter().copied().sum()
    }
}

/// A batch of whole episodes plus the (currently unused) recurrent carry.
#[derive(Debug, Clone)]
pub struct RolloutBatch<R> {
    pub episodes: Vec<EpisodeData<R>>,
    /// Final hidden states per episode per agent, for recurrent trunks. The
    /// shipped trainer runs feed-forward networks, so this stays `None`; the
    /// field keeps the batch layout stable if a GRU trunk is wired in.
    pub recurrent_state: Option<Vec<Vec<R>>>,
}

impl<R: Real> RolloutBatch<R> {
    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(EpisodeData::len).sum()
    }
}

/// Local observation extended with a one-hot agent id — the only input the
/// (parameter-shared) actor ever sees.
pub fn actor_input<R: Real>(obs: &[R], agent: usize, n_agents: usize) -> Vec<R> {
    let mut v = Vec::with_capacity(obs.len() + n_agents);
    v.extend_from_slice(obs);
    for j in 0..n_agents {
        v.push(if j == agent { R::one() } else { R::zero() });
    }
    v
}

/// Concatenation of every agent's local observation, in agent order — the
/// input of the centralized critics.
pub fn joint_obs<R: Real>(obs_t: &[Vec<R>]) -> Vec<R> {
    let mut v = Vec::with_capacity(obs_t.iter().map(Vec::len).sum());
    for o in obs_t {
        v.extend_from_slice(o);
    }
    v
}

/// Sample one action from a policy head's raw outputs.
fn sample_action<R: Real>(
    net: &DenseNet<R>,
    out: Vec<R>,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> (ActionValue<R>, R) {
    match net.head() {
        Head::Linear => {
            let (a, eval) = categorical(&out, SampleMode::Stochastic, rng);
            (ActionValue::Discrete(a), eval.logp)
        }
        Head::Gaussian => {
            let (a, eval) = gaussian(&out, net.logstd(), SampleMode::Stochastic, rng);
            (ActionValue::Continuous(a), eval.logp)
        }
    }
}

/// Play one full episode and record every stream the update needs.
///
/// Per step, the cooperating agents sample in agent order, then the adversary
/// (when present) — all from this episode's action stream.
pub fn collect_episode<R: Real>(
    env: &EnvKind<R>,
    actor: &DenseNet<R>,
    adv_actor: Option<&DenseNet<R>>,
    seed: u64,
    iteration: u64,
    episode: u64,
    dump: bool,
) -> Result<EpisodeData<R>> {
    let mut world = env.clone();
    let mut env_rng = rng::stream(seed, "env", iteration, episode);
    let mut act_rng = rng::stream(seed, "act", iteration, episode);
    let n = world.n_agents();
    let horizon = world.horizon();
    let n_channels = world.cost_channels().len();
    if world.has_adversary() != adv_actor.is_some() {
        return Err(Error::usage("adversary policy must be present exactly when the world has one"));
    }

    let mut packet = world.reset(&mut env_rng)?;
    let mut ep = EpisodeData {
        obs: Vec::with_capacity(horizon),
        betas: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        logps: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        shaped_rewards: Vec::with_capacity(horizon),
        team_costs: vec![Vec::with_capacity(horizon); n_channels],
        agent_costs: vec![Vec::with_capacity(horizon); n_channels],
        adversary: adv_actor.map(|_| AdversaryEpisode {
            obs: Vec::with_capacity(horizon),
            actions: Vec::with_capacity(horizon),
            logps: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
        }),
        snapshots: dump.then(|| Vec::with_capacity(horizon + 1)),
    };

    for t in 0..horizon {
        if let Some(frames) = ep.snapshots.as_mut() {
            frames.push(world.snapshot());
        }
        let mut actions = Vec::with_capacity(n);
        let mut logps = Vec::with_capacity(n);
        for i in 0..n {
            let input = actor_input(&packet.agent_obs[i], i, n);
            let out = actor.infer(&input);
            let (a, logp) = sample_action(actor, out, &mut act_rng);
            actions.push(a);
            logps.push(logp);
        }
        let adv_action = match (adv_actor, packet.adversary_obs.as_ref()) {
            (Some(net), Some(obs)) => {
                let out = net.infer(obs);
                let (a, logp) = sample_action(net, out, &mut act_rng);
                let adv = ep.adversary.as_mut().expect("adversary episode allocated");
                adv.obs.push(obs.clone());
                adv.logps.push(logp);
                adv.actions.push(a.clone());
                Some(a)
            }
            (None, None) => None,
            _ => return Err(Error::usage("world and adversary policy disagree about observations")),
        };

        let result = world.step(&actions, adv_action.as_ref())?;
        ep.obs.push(std::mem::take(&mut packet.agent_obs));
        ep.betas.push(std::mem::take(&mut packet.betas));
        ep.actions.push(actions);
        ep.logps.push(logps);
        ep.rewards.push(result.reward);
        ep.shaped_rewards.push(result.reward);
        for (c, event) in result.costs.iter().enumerate() {
            ep.team_costs[c].push(event.team);
            ep.agent_costs[c].push(event.per_agent.clone());
        }
        if let Some(adv) = ep.adversary.as_mut() {
            adv.rewards.push(result.adversary_reward);
        }
        if result.done != (t + 1 == horizon) {
            return Err(Error::numeric("world terminated off its declared horizon"));
        }
        packet = result.obs;
    }
    if let Some(frames) = ep.snapshots.as_mut() {
        frames.push(world.snapshot());
    }
    Ok(ep)
}

/// Collect `n_episodes` whole episodes in parallel, merged in episode order.
pub fn collect_batch<R: Real>(
    pool: Option<&rayon::ThreadPool>,
    env: &EnvKind<R>,
    actor: &DenseNet<R>,
    adv_actor: Option<&DenseNet<R>>,
    seed: u64,
    iteration: u64,
    n_episodes: usize,
    dump: bool,
) -> Result<RolloutBatch<R>> {
    let run = || {
        (0..n_episodes as u64)
            .into_par_iter()
            .map(|ep| collect_episode(env, actor, adv_actor, seed, iteration, ep, dump))
            .collect::<Result<Vec<_>>>()
    };
    let episodes = match pool {
        Some(p) => p.install(run)?,
        None => run()?,
    };
    Ok(RolloutBatch { episodes, recurrent_state: None })
}

/// Rewrite each episode's `shaped_rewards` with novelty bonuses.
///
/// Every agent gets a fresh observation buffer per episode; its per-step
/// bonus is weighted by the world's β (when enabled), the weighted bonuses
/// are summed across agents, and the sum is mixed into (or substituted for)
/// the extrinsic team reward. Cost streams and recorded log-probabilities are
/// untouched — shaping happens strictly after the episode was played.
pub fn apply_novelty_shaping<R: Real>(
    pool: Option<&rayon::ThreadPool>,
    batch: &mut RolloutBatch<R>,
    estimator: Estimator,
    mixing: Mixing,
    beta_weighting: bool,
    bounds: &[(R, R)],
) -> Result<()> {
    let shape_one = |ep: &mut EpisodeData<R>| -> Result<()> {
        if ep.is_empty() {
            return Ok(());
        }
        let n = ep.obs[0].len();
        let mut buffers = Vec::with_capacity(n);
        for _ in 0..n {
            buffers.push(ObservationBuffer::new(estimator, bounds.to_vec())?);
        }
        for t in 0..ep.len() {
            let mut step_bonus = R::zero();
            for (i, buf) in buffers.iter_mut().enumerate() {
                let bonus = buf.observe(&ep.obs[t][i]);
                let w = if beta_weighting { ep.betas[t][i] } else { R::one() };
                step_bonus += w * bonus;
            }
            ep.shaped_rewards[t] = shape_step(ep.rewards[t], step_bonus, mixing);
        }
        Ok(())
    };
    let mut run = || batch.episodes.par_iter_mut().map(shape_one).collect::<Result<Vec<_>>>();
    match pool {
        Some(p) => p.install(run)?,
        None => run()?,
    };
    Ok(())
}

/// Transitions needed to cover `batch_size` with whole episodes.
pub fn episodes_per_batch(batch_size: usize, horizon: usize) -> usize {
    batch_size.div_ceil(horizon)
}
