//! The constrained multi-agent PPO trainer.
//!
//! One `Trainer` owns a world, a parameter-shared actor, a centralized reward
//! critic, per-constraint cost critics with Lagrange multipliers, and (for
//! adversarial worlds) the adversary's separate learner. Each iteration:
//!
//! 1. collect a batch of whole episodes (optionally in a worker pool),
//! 2. rewrite the training reward stream with novelty bonuses (exploring
//!    variants only),
//! 3. update every multiplier from the batch-mean cost return,
//! 4. compute advantages (standardized for reward, raw for costs),
//! 5. run the clipped policy epochs, the critic regressions, and the
//!    adversary's own update.
//!
//! All randomness flows through named seed streams keyed by iteration, so a
//! run is reproducible bit for bit regardless of worker count, and a resumed
//! checkpoint continues exactly where the original run would have gone.

pub mod rollout;
pub mod update;

use std::path::Path;
use std::time::Instant;

use crate::constraints::{episode_cost_return, ConstraintSpec, MultiplierState, Scope};
use crate::env::{ActionSpec, EnvKind, World};
use crate::error::{Error, Result};
use crate::net::sample::{categorical, gaussian, SampleMode};
use crate::net::{
    find_entry, read_checkpoint, write_checkpoint, ActionValue, Adam, CheckpointEntry, DenseNet,
    Head,
};
use crate::oem::{Estimator, Mixing, ObservationBuffer};
use crate::rng;
use crate::scalar::{real, Real};

use rollout::{actor_input, apply_novelty_shaping, collect_batch, episodes_per_batch, RolloutBatch};
use update::{
    adversary_update, compute_advantages, critic_epochs, policy_epochs, AdversaryStats,
    CostCriticSet, MultiplierInfo,
};

pub use update::{Advantages, ConstraintAdvantages, CriticStats, PolicyStats};

/// The five trainable algorithm variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Unconstrained baseline: no cost critics, no multipliers, no bonuses.
    Mappo,
    /// Lagrangian constraints, no exploration bonus.
    CMappo,
    /// Lagrangian constraints plus a policy-entropy bonus in the objective.
    CMappoPe,
    /// Individually constrained with observation-novelty reward shaping.
    E2c,
    /// Team-constrained with observation-novelty reward shaping.
    E2cTeam,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Mappo, Variant::CMappo, Variant::CMappoPe, Variant::E2c, Variant::E2cTeam];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mappo => "mappo",
            Variant::CMappo => "c-mappo",
            Variant::CMappoPe => "c-mappo-pe",
            Variant::E2c => "e2c",
            Variant::E2cTeam => "e2c-team",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {name:?}; expected one of mappo, c-mappo, c-mappo-pe, e2c, e2c-team"
                ))
            })
    }

    /// Does this variant carry constraints and their machinery?
    pub fn constrained(self) -> bool {
        !matches!(self, Variant::Mappo)
    }

    /// Does this variant shape rewards with observation-novelty bonuses?
    pub fn explores(self) -> bool {
        matches!(self, Variant::E2c | Variant::E2cTeam)
    }

    /// The constraint scope this variant requires, if it pins one.
    pub fn required_scope(self) -> Option<Scope> {
        match self {
            Variant::E2c => Some(Scope::Individual),
            Variant::E2cTeam => Some(Scope::Team),
            _ => None,
        }
    }
}

/// Optimization hyperparameters shared by every variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// PPO ratio clip ε.
    pub clip: f64,
    /// Discount γ.
    pub gamma: f64,
    /// GAE λ.
    pub gae_lambda: f64,
    /// Policy-entropy coefficient (only the entropy-bonus variant uses it).
    pub entropy_coeff: f64,
    /// Optimization epochs per iteration.
    pub epochs: usize,
    /// Minibatches per epoch.
    pub minibatches: usize,
    /// Transitions per iteration, covered by whole episodes (rounded up).
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Hidden layer widths for every network.
    pub hidden: Vec<usize>,
    /// Rescale both advantage terms by `1/(1+Σλ)` per sample.
    pub lambda_scaled_advantages: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.9,
            gae_lambda: 0.95,
            entropy_coeff: 1e-3,
            epochs: 4,
            minibatches: 4,
            batch_size: 4096,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: vec![128, 128],
            lambda_scaled_advantages: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return Err(Error::config(format!(
                "gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !(self.entropy_coeff >= 0.0 && self.entropy_coeff.is_finite()) {
            return Err(Error::config(format!(
                "entropy_coeff must be finite and non-negative, got {}",
                self.entropy_coeff
            )));
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::config("hidden layer widths must be non-empty and positive"));
        }
        Ok(())
    }
}

/// How the exploring variants estimate and mix observation novelty.
#[derive(Debug, Clone, Copy)]
pub struct OemSettings {
    pub estimator: Estimator,
    pub mixing: Mixing,
    /// Weight each agent's bonus by the world's exploration weight stream
    /// (e.g. nearby point-of-interest value) instead of uniformly.
    pub beta_weighting: bool,
}

/// Everything that defines a training run besides the world itself.
#[derive(Debug, Clone)]
pub struct TrainerSettings {
    pub variant: Variant,
    pub seed: u64,
    pub hypers: HyperParams,
    pub constraints: Vec<ConstraintSpec>,
    pub oem: Option<OemSettings>,
    /// Worker threads for episode collection; 0 uses the global pool.
    pub workers: usize,
    /// Record one world snapshot per state for trajectory dumps.
    pub dump_trajectories: bool,
}

impl TrainerSettings {
    /// Minimal settings for a variant: everything else at defaults.
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            hypers: HyperParams::default(),
            constraints: Vec::new(),
            oem: None,
            workers: 0,
            dump_trajectories: false,
        }
    }
}

/// One iteration's log row — exactly the values the metrics CSV serializes.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: u64,
    /// Episodes collected this iteration.
    pub episodes: usize,
    /// Mean extrinsic episode return (never includes novelty bonuses).
    pub mean_reward: f64,
    /// Mean undiscounted episodic team cost per world channel, every variant.
    pub mean_costs: Vec<(String, f64)>,
    /// One multiplier value per constraint (individual scope: agent mean).
    pub lambdas: Vec<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// One regression loss per constraint.
    pub cost_value_losses: Vec<f64>,
    pub wall_time_s: f64,
}

/// Greedy-policy evaluation summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_reward: f64,
    /// Mean undiscounted episodic team cost per world channel.
    pub mean_costs: Vec<(String, f64)>,
    /// Per-episode extrinsic returns backing `mean_reward` (for dispersion
    /// estimates).
    pub episode_returns: Vec<f64>,
}

struct AdversaryNets<R> {
    actor: DenseNet<R>,
    actor_opt: Adam<R>,
    critic: DenseNet<R>,
    critic_opt: Adam<R>,
}

/// The full training state for one run.
pub struct Trainer<R: Real> {
    settings: TrainerSettings,
    env: EnvKind<R>,
    pool: Option<rayon::ThreadPool>,
    actor: DenseNet<R>,
    actor_opt: Adam<R>,
    critic: DenseNet<R>,
    critic_opt: Adam<R>,
    cost_sets: Vec<CostCriticSet<R>>,
    multipliers: Vec<MultiplierState<R>>,
    adversary: Option<AdversaryNets<R>>,
    oem_bounds: Vec<(R, R)>,
    /// Entropy coefficient actually applied (non-zero for one variant only).
    kappa: f64,
    iteration: u64,
    incidents: u64,
    last_adversary_stats: Option<AdversaryStats>,
}

fn net_widths(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(in_dim);
    w.extend_from_slice(hidden);
    w.push(out_dim);
    w
}

fn head_for(spec: &ActionSpec) -> (Head, usize) {
    match spec {
        ActionSpec::Discrete(n) => (Head::Linear, *n),
        ActionSpec::Continuous(d) => (Head::Gaussian, *d),
    }
}

impl<R: Real> Trainer<R> {
    pub fn new(env: EnvKind<R>, settings: TrainerSettings) -> Result<Self> {
        settings.hypers.validate()?;
        let variant = settings.variant;
        if variant.constrained() && settings.constraints.is_empty() {
            return Err(Error::config(format!(
                "variant {} requires at least one constraint",
                variant.name()
            )));
        }
        if !variant.constrained() && !settings.constraints.is_empty() {
            return Err(Error::config(format!(
                "variant {} is unconstrained but {} constraint(s) were configured",
                variant.name(),
                settings.constraints.len()
            )));
        }
        if variant.explores() != settings.oem.is_some() {
            return Err(Error::config(format!(
                "variant {} {} a novelty estimator configuration",
                variant.name(),
                if variant.explores() { "requires" } else { "does not take" }
            )));
        }
        if let Some(scope) = variant.required_scope() {
            if let Some(bad) = settings.constraints.iter().find(|c| c.scope != scope) {
                return Err(Error::config(format!(
                    "variant {} requires {:?}-scope constraints, but channel {:?} uses {:?}",
                    variant.name(),
                    scope,
                    bad.channel,
                    bad.scope
                )));
            }
        }
        let channels = env.cost_channels();
        for spec in &settings.constraints {
            spec.validate()?;
            if !channels.iter().any(|c| *c == spec.channel) {
                return Err(Error::config(format!(
                    "constraint channel {:?} is not one of the world's channels {:?}",
                    spec.channel, channels
                )));
            }
        }

        let (lo, hi) = env.obs_bounds();
        let oem_bounds: Vec<(R, R)> =
            lo.iter().zip(hi.iter()).map(|(a, b)| (real::<R>(*a), real::<R>(*b))).collect();
        if let Some(oem) = &settings.oem {
            // Validate estimator/bounds pairing up front, not mid-run.
            ObservationBuffer::<R>::new(oem.estimator, oem_bounds.clone())?;
        }

        let n = env.n_agents();
        let obs = env.obs_dim();
        let hp = &settings.hypers;
        let (head, act_dim) = head_for(&env.action_spec());
        let actor = DenseNet::init(
            &net_widths(obs + n, &hp.hidden, act_dim),
            head,
            0.01,
            &mut rng::stream(settings.seed, "init-actor", 0, 0),
        )?;
        let critic = DenseNet::init(
            &net_widths(obs * n, &hp.hidden, 1),
            Head::Linear,
            1.0,
            &mut rng::stream(settings.seed, "init-critic", 0, 0),
        )?;
        let actor_opt = Adam::new(actor.n_params(), real::<R>(hp.actor_lr));
        let critic_opt = Adam::new(critic.n_params(), real::<R>(hp.critic_lr));

        let mut cost_sets = Vec::with_capacity(settings.constraints.len());
        let mut multipliers = Vec::with_capacity(settings.constraints.len());
        for (k, spec) in settings.constraints.iter().enumerate() {
            let channel = channels.iter().position(|c| *c == spec.channel).expect("checked above");
            let in_dims: Vec<usize> = match spec.scope {
                Scope::Team => vec![obs * n],
                Scope::Individual => vec![obs; n],
            };
            let mut nets = Vec::with_capacity(in_dims.len());
            let mut opts = Vec::with_capacity(in_dims.len());
            for (i, in_dim) in in_dims.iter().enumerate() {
                let net = DenseNet::init(
                    &net_widths(*in_dim, &hp.hidden, 1),
                    Head::Linear,
                    1.0,
                    &mut rng::stream(settings.seed, "init-cost", k as u64, i as u64),
                )?;
                opts.push(Adam::new(net.n_params(), real::<R>(hp.critic_lr)));
                nets.push(net);
            }
            cost_sets.push(CostCriticSet { scope: spec.scope, channel, nets, opts });
            multipliers.push(MultiplierState::new(spec, n)?);
        }

        let adversary = if env.has_adversary() {
            let (ahead, adim) = head_for(&env.adversary_action_spec());
            let a_obs = env.adversary_obs_dim();
            let actor = DenseNet::init(
                &net_widths(a_obs, &hp.hidden, adim),
                ahead,
                0.01,
                &mut rng::stream(settings.seed, "init-adv-actor", 0, 0),
            )?;
            let critic = DenseNet::init(
                &net_widths(a_obs, &hp.hidden, 1),
                Head::Linear,
                1.0,
                &mut rng::stream(settings.seed, "init-adv-critic", 0, 0),
            )?;
            let actor_opt = Adam::new(actor.n_params(), real::<R>(hp.actor_lr));
            let critic_opt = Adam::new(critic.n_params(), real::<R>(hp.critic_lr));
            Some(AdversaryNets { actor, actor_opt, critic, critic_opt })
        } else {
            None
        };

        let pool = if settings.workers == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(settings.workers)
                    .build()
                    .map_err(|e| Error::config(format!("worker pool: {e}")))?,
            )
        };
        let kappa = if variant == Variant::CMappoPe { hp.entropy_coeff } else { 0.0 };

        Ok(Self {
            settings,
            env,
            pool,
            actor,
            actor_opt,
            critic,
            critic_opt,
            cost_sets,
            multipliers,
            adversary,
            oem_bounds,
            kappa,
            iteration: 0,
            incidents: 0,
            last_adversary_stats: None,
        })
    }

    /// Collect, update, and log one iteration, returning the batch too.
    pub fn run_iteration_with_batch(&mut self) -> Result<(IterationRow, RolloutBatch<R>)> {
        let start = Instant::now();
        let iteration = self.iteration;
        let hp = self.settings.hypers.clone();
        let n_eps = episodes_per_batch(hp.batch_size, self.env.horizon());
        let mut batch = collect_batch(
            self.pool.as_ref(),
            &self.env,
            &self.actor,
            self.adversary.as_ref().map(|a| &a.actor),
            self.settings.seed,
            iteration,
            n_eps,
            self.settings.dump_trajectories,
        )?;
        if let Some(oem) = &self.settings.oem {
            apply_novelty_shaping(
                self.pool.as_ref(),
                &mut batch,
                oem.estimator,
                oem.mixing,
                oem.beta_weighting,
                &self.oem_bounds,
            )?;
        }

        let k = batch.n_episodes() as f64;
        let mean_reward =
            batch.episodes.iter().map(|e| e.episode_return().to_f64c()).sum::<f64>() / k;
        let channels = self.env.cost_channels();
        let mean_costs: Vec<(String, f64)> = channels
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mean = batch
                    .episodes
                    .iter()
                    .map(|e| e.team_costs[c].iter().copied().sum::<R>().to_f64c())
                    .sum::<f64>()
                    / k;
                (name.clone(), mean)
            })
            .collect();

        // Multipliers move once per iteration, before the policy epochs, on
        // the batch-mean cost return of their own scope.
        let gamma = real::<R>(hp.gamma);
        let kr = real::<R>(k);
        for (idx, spec) in self.settings.constraints.iter().enumerate() {
            let channel = self.cost_sets[idx].channel;
            let measured: Vec<R> = match spec.scope {
                Scope::Team => {
                    let total: R = batch
                        .episodes
                        .iter()
                        .map(|e| episode_cost_return(&e.team_costs[channel], spec.discounting, gamma))
                        .sum();
                    vec![total / kr]
                }
                Scope::Individual => {
                    let n = self.env.n_agents();
                    (0..n)
                        .map(|i| {
                            let total: R = batch
                                .episodes
                                .iter()
                                .map(|e| {
                                    let stream: Vec<R> = (0..e.len())
                                        .map(|t| e.agent_costs[channel][t][i])
                                        .collect();
                                    episode_cost_return(&stream, spec.discounting, gamma)
                                })
                                .sum();
                            total / kr
                        })
                        .collect()
                }
            };
            self.multipliers[idx].update(&measured)?;
        }

        let adv = compute_advantages(
            &batch,
            &self.critic,
            &self.cost_sets,
            gamma,
            real::<R>(hp.gae_lambda),
        )?;
        let infos: Vec<MultiplierInfo<R>> = self
            .multipliers
            .iter()
            .zip(self.settings.constraints.iter())
            .map(|(m, s)| MultiplierInfo { scope: s.scope, lambda: m.lambda().to_vec() })
            .collect();
        let pstats = policy_epochs(
            &mut self.actor,
            &mut self.actor_opt,
            &batch,
            &adv,
            &infos,
            &hp,
            self.kappa,
            self.settings.seed,
            iteration,
        )?;
        let cstats = critic_epochs(
            &mut self.critic,
            &mut self.critic_opt,
            &mut self.cost_sets,
            &batch,
            &adv,
            &hp,
            self.settings.seed,
            iteration,
        )?;
        self.incidents += (pstats.skipped + cstats.skipped) as u64;
        if let Some(a) = self.adversary.as_mut() {
            let astats = adversary_update(
                &batch,
                &mut a.actor,
                &mut a.actor_opt,
                &mut a.critic,
                &mut a.critic_opt,
                &hp,
                self.settings.seed,
                iteration,
            )?;
            self.incidents += astats.skipped as u64;
            self.last_adversary_stats = Some(astats);
        }

        self.iteration += 1;
        let row = IterationRow {
            iteration,
            episodes: batch.n_episodes(),
            mean_reward,
            mean_costs,
            lambdas: self.multipliers.iter().map(|m| m.mean_lambda().to_f64c()).collect(),
            policy_loss: pstats.mean_loss,
            value_loss: cstats.value_loss,
            cost_value_losses: cstats.cost_value_losses,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((row, batch))
    }

    /// Collect, update, and log one iteration.
    pub fn run_iteration(&mut self) -> Result<IterationRow> {
        self.run_iteration_with_batch().map(|(row, _)| row)
    }

    /// Play `episodes` greedy episodes (no exploration noise, adversary
    /// greedy too) and report extrinsic means.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalReport> {
        let channels = self.env.cost_channels();
        let n = self.env.n_agents();
        let mut episode_returns = Vec::with_capacity(episodes);
        let mut total_costs = vec![0.0f64; channels.len()];
        for ep in 0..episodes as u64 {
            let mut world = self.env.clone();
            let mut env_rng = rng::stream(seed, "eval-env", 0, ep);
            // Greedy selection draws nothing, but the samplers take an RNG.
            let mut nil_rng = rng::stream(seed, "eval-nil", 0, ep);
            let mut packet = world.reset(&mut env_rng)?;
            let mut ep_return = 0.0;
            for _ in 0..world.horizon() {
                let mut actions = Vec::with_capacity(n);
                for i in 0..n {
                    let out = self.actor.infer(&actor_input(&packet.agent_obs[i], i, n));
                    actions.push(greedy_action(&self.actor, out, &mut nil_rng));
                }
                let adv_action = match (&self.adversary, &packet.adversary_obs) {
                    (Some(a), Some(obs)) => {
                        Some(greedy_action(&a.actor, a.actor.infer(obs), &mut nil_rng))
                    }
                    (None, None) => None,
                    _ => return Err(Error::usage("adversary presence mismatch during eval")),
                };
                let result = world.step(&actions, adv_action.as_ref())?;
                ep_return += result.reward.to_f64c();
                for (c, event) in result.costs.iter().enumerate() {
                    total_costs[c] += event.team.to_f64c();
                }
                packet = result.obs;
            }
            episode_returns.push(ep_return);
        }
        let k = episodes as f64;
        Ok(EvalReport {
            episodes,
            mean_reward: episode_returns.iter().sum::<f64>() / k,
            mean_costs: channels
                .iter()
                .cloned()
                .zip(total_costs.iter().map(|c| c / k))
                .collect(),
            episode_returns,
        })
    }

    /// Write the complete training state (networks, optimizer moments,
    /// multipliers, iteration counter) to one checkpoint file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = vec![CheckpointEntry::vector("meta", vec![self.iteration as f64])];
        push_net(&mut entries, "actor", &self.actor, &self.actor_opt);
        push_net(&mut entries, "critic", &self.critic, &self.critic_opt);
        for (k, set) in self.cost_sets.iter().enumerate() {
            for (i, (net, opt)) in set.nets.iter().zip(set.opts.iter()).enumerate() {
                push_net(&mut entries, &format!("cost.{k}.{i}"), net, opt);
            }
        }
        for (k, m) in self.multipliers.iter().enumerate() {
            entries.push(CheckpointEntry::vector(
                format!("lambda.{k}"),
                m.lambda().iter().map(|l| l.to_f64c()).collect(),
            ));
        }
        if let Some(a) = &self.adversary {
            push_net(&mut entries, "adv_actor", &a.actor, &a.actor_opt);
            push_net(&mut entries, "adv_critic", &a.critic, &a.critic_opt);
        }
        write_checkpoint(path, &entries)
    }

    /// Restore state written by [`Trainer::save_checkpoint`] into a trainer
    /// built from the same world and settings.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let meta = find_entry(&entries, "meta")?;
        let it = *meta.data.first().ok_or_else(|| Error::format("empty meta entry"))?;
        if !(it.is_finite() && it >= 0.0 && it.fract() == 0.0) {
            return Err(Error::format(format!("checkpoint iteration {it} is not a whole number")));
        }
        load_net(&entries, "actor", &mut self.actor, &mut self.actor_opt)?;
        load_net(&entries, "critic", &mut self.critic, &mut self.critic_opt)?;
        for (k, set) in self.cost_sets.iter_mut().enumerate() {
            for (i, (net, opt)) in set.nets.iter_mut().zip(set.opts.iter_mut()).enumerate() {
                load_net(&entries, &format!("cost.{k}.{i}"), net, opt)?;
            }
        }
        for (k, m) in self.multipliers.iter_mut().enumerate() {
            let entry = find_entry(&entries, &format!("lambda.{k}"))?;
            let lambda: Vec<R> = entry.data.iter().map(|l| real::<R>(*l)).collect();
            m.set_lambda(&lambda)?;
        }
        if let Some(a) = self.adversary.as_mut() {
            load_net(&entries, "adv_actor", &mut a.actor, &mut a.actor_opt)?;
            load_net(&entries, "adv_critic", &mut a.critic, &mut a.critic_opt)?;
        }
        self.iteration = it as u64;
        Ok(())
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn settings(&self) -> &TrainerSettings {
        &self.settings
    }

    pub fn env(&self) -> &EnvKind<R> {
        &self.env
    }

    pub fn actor(&self) -> &DenseNet<R> {
        &self.actor
    }

    pub fn critic(&self) -> &DenseNet<R> {
        &self.critic
    }

    pub fn cost_sets(&self) -> &[CostCriticSet<R>] {
        &self.cost_sets
    }

    pub fn multipliers(&self) -> &[MultiplierState<R>] {
        &self.multipliers
    }

    /// The entropy coefficient actually applied in the policy objective.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Updates skipped so far because of non-finite losses.
    pub fn incidents(&self) -> u64 {
        self.incidents
    }

    pub fn last_adversary_stats(&self) -> Option<&AdversaryStats> {
        self.last_adversary_stats.as_ref()
    }

    pub fn episodes_per_iteration(&self) -> usize {
        episodes_per_batch(self.settings.hypers.batch_size, self.env.horizon())
    }
}

fn greedy_action<R: Real>(
    net: &DenseNet<R>,
    out: Vec<R>,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> ActionValue<R> {
    match net.head() {
        Head::Linear => {
            let (a, _) = categorical(&out, SampleMode::Greedy, rng);
            ActionValue::Discrete(a)
        }
        Head::Gaussian => {
            let (a, _) = gaussian(&out, net.logstd(), SampleMode::Greedy, rng);
            ActionValue::Continuous(a)
        }
    }
}

fn push_net<R: Real>(
    entries: &mut Vec<CheckpointEntry>,
    name: &str,
    net: &DenseNet<R>,
    opt: &Adam<R>,
) {
    entries.push(CheckpointEntry::vector(
        name,
        net.params().iter().map(|p| p.to_f64c()).collect(),
    ));
    let (t, m, v) = opt.state();
    entries.push(CheckpointEntry::vector(
        format!("{name}.adam.m"),
        m.iter().map(|x| x.to_f64c()).collect(),
    ));
    entries.push(CheckpointEntry::vector(
        format!("{name}.adam.v"),
        v.iter().map(|x| x.to_f64c()).collect(),
    ));
    entries.push(CheckpointEntry::vector(format!("{name}.adam.t"), vec![t as f64]));
}

fn load_net<R: Real>(
    entries: &[CheckpointEntry],
    name: &str,
    net: &mut DenseNet<R>,
    opt: &mut Adam<R>,
) -> Result<()> {
    let params = find_entry(entries, name)?;
    if params.data.len() != net.n_params() {
        return Err(Error::format(format!(
            "checkpoint entry {name:?} holds {} parameters, the network needs {}",
            params.data.len(),
            net.n_params()
        )));
    }
    for (p, v) in net.params_mut().iter_mut().zip(params.data.iter()) {
        *p = real::<R>(*v);
    }
    let m: Vec<R> =
        find_entry(entries, &format!("{name}.adam.m"))?.data.iter().map(|x| real::<R>(*x)).collect();
    let v: Vec<R> =
        find_entry(entries, &format!("{name}.adam.v"))?.data.iter().map(|x| real::<R>(*x)).collect();
    let t_entry = find_entry(entries, &format!("{name}.adam.t"))?;
    let t = *t_entry.data.first().ok_or_else(|| Error::format("empty optimizer step entry"))?;
    if !(t.is_finite() && t >= 0.0 && t.fract() == 0.0) {
        return Err(Error::format(format!("optimizer step count {t} is not a whole number")));
    }
    opt.restore(t as u64, &m, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Discounting;
    use crate::env::{ParticleConfig, ParticleTask, ParticleWorld, RoverConfig, RoverWorld};

    fn tiny_rover() -> EnvKind<f64> {
        let cfg = RoverConfig {
            n_rovers: 3,
            n_pois: 4,
            arena_size: 10.0,
            spawn_radius: 2.0,
            horizon: 10,
            ..RoverConfig::default()
        };
        EnvKind::Rover(RoverWorld::new(cfg).unwrap())
    }

    fn tiny_hypers() -> HyperParams {
        HyperParams {
            batch_size: 40,
            hidden: vec![16, 16],
            epochs: 2,
            minibatches: 2,
            ..HyperParams::default()
        }
    }

    fn collision_constraint(scope: Scope) -> ConstraintSpec {
        ConstraintSpec {
            channel: "collision".into(),
            scope,
            threshold: 1.0,
            discounting: Discounting::Episodic,
            multiplier_init: 1.0,
            lagrange_lr: 0.05,
        }
    }

    fn oem_count() -> OemSettings {
        OemSettings {
            estimator: Estimator::Count { quantization: 1 },
            mixing: Mixing::Pure,
            beta_weighting: true,
        }
    }

    fn settings(variant: Variant, seed: u64) -> TrainerSettings {
        let mut s = TrainerSettings::new(variant, seed);
        s.hypers = tiny_hypers();
        match variant {
            Variant::Mappo => {}
            Variant::CMappo | Variant::CMappoPe => {
                s.constraints = vec![collision_constraint(Scope::Individual)];
            }
            Variant::E2c => {
                s.constraints = vec![collision_constraint(Scope::Individual)];
                s.oem = Some(oem_count());
            }
            Variant::E2cTeam => {
                s.constraints = vec![collision_constraint(Scope::Team)];
                s.oem = Some(oem_count());
            }
        }
        s
    }

    fn rows_equal(a: &IterationRow, b: &IterationRow) -> bool {
        a.iteration == b.iteration
            && a.episodes == b.episodes
            && a.mean_reward.to_bits() == b.mean_reward.to_bits()
            && a.mean_costs.len() == b.mean_costs.len()
            && a.mean_costs.iter().zip(&b.mean_costs).all(|(x, y)| {
                x.0 == y.0 && x.1.to_bits() == y.1.to_bits()
            })
            && a.lambdas.iter().zip(&b.lambdas).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.policy_loss.to_bits() == b.policy_loss.to_bits()
            && a.value_loss.to_bits() == b.value_loss.to_bits()
            && a.cost_value_losses.iter().zip(&b.cost_value_losses).all(|(x, y)| {
                x.to_bits() == y.to_bits()
            })
    }

    #[test]
    fn variant_gating_builds_exactly_the_right_machinery() {
        let env = tiny_rover();
        let n = env.n_agents();
        let obs = env.obs_dim();

        let t = Trainer::new(env.clone(), settings(Variant::Mappo, 1)).unwrap();
        assert!(t.cost_sets().is_empty());
        assert!(t.multipliers().is_empty());
        assert_eq!(t.kappa(), 0.0);

        let t = Trainer::new(env.clone(), settings(Variant::E2cTeam, 1)).unwrap();
        assert_eq!(t.multipliers().len(), 1);
        assert_eq!(t.multipliers()[0].lambda().len(), 1);
        assert_eq!(t.cost_sets().len(), 1);
        assert_eq!(t.cost_sets()[0].nets.len(), 1);
        assert_eq!(t.cost_sets()[0].nets[0].in_dim(), obs * n);

        let t = Trainer::new(env.clone(), settings(Variant::E2c, 1)).unwrap();
        assert_eq!(t.multipliers()[0].lambda().len(), n);
        assert_eq!(t.cost_sets()[0].nets.len(), n);
        assert_eq!(t.cost_sets()[0].nets[0].in_dim(), obs);

        let t = Trainer::new(env.clone(), settings(Variant::CMappoPe, 1)).unwrap();
        assert_eq!(t.kappa(), t.settings().hypers.entropy_coeff);
        let t = Trainer::new(env.clone(), settings(Variant::CMappo, 1)).unwrap();
        assert_eq!(t.kappa(), 0.0);

        // Invalid combinations are rejected up front.
        let mut bad = settings(Variant::Mappo, 1);
        bad.constraints = vec![collision_constraint(Scope::Team)];
        assert!(Trainer::new(env.clone(), bad).is_err());
        let mut bad = settings(Variant::CMappo, 1);
        bad.constraints.clear();
        assert!(Trainer::new(env.clone(), bad).is_err());
        let mut bad = settings(Variant::E2c, 1);
        bad.oem = None;
        assert!(Trainer::new(env.clone(), bad).is_err());
        let mut bad = settings(Variant::E2c, 1);
        bad.constraints = vec![collision_constraint(Scope::Team)];
        assert!(Trainer::new(env.clone(), bad).is_err());
        let mut bad = settings(Variant::CMappo, 1);
        bad.oem = Some(oem_count());
        assert!(Trainer::new(env.clone(), bad).is_err());
        let mut bad = settings(Variant::CMappo, 1);
        bad.constraints[0].channel = "no-such-channel".into();
        assert!(Trainer::new(env, bad).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(Variant::from_name("ppo").is_err());
    }

    #[test]
    fn hyperparameter_validation_rejects_bad_ranges() {
        let good = HyperParams::default();
        good.validate().unwrap();
        for bad in [
            HyperParams { clip: 0.0, ..good.clone() },
            HyperParams { clip: 1.0, ..good.clone() },
            HyperParams { gamma: 1.0, ..good.clone() },
            HyperParams { gamma: -0.1, ..good.clone() },
            HyperParams { gae_lambda: 1.2, ..good.clone() },
            HyperParams { entropy_coeff: -1e-3, ..good.clone() },
            HyperParams { epochs: 0, ..good.clone() },
            HyperParams { minibatches: 0, ..good.clone() },
            HyperParams { batch_size: 0, ..good.clone() },
            HyperParams { actor_lr: 0.0, ..good.clone() },
            HyperParams { critic_lr: f64::NAN, ..good.clone() },
            HyperParams { hidden: vec![], ..good.clone() },
            HyperParams { hidden: vec![16, 0], ..good.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn multiplier_moves_before_the_policy_update_by_the_projected_rule() {
        let env = tiny_rover();
        let mut s = settings(Variant::CMappo, 11);
        s.constraints = vec![ConstraintSpec {
            channel: "collision".into(),
            scope: Scope::Team,
            threshold: 0.25,
            discounting: Discounting::Episodic,
            multiplier_init: 1.0,
            lagrange_lr: 0.5,
        }];
        let mut t = Trainer::new(env, s).unwrap();
        let (row, batch) = t.run_iteration_with_batch().unwrap();
        // Recompute the batch-mean episodic team cost from the raw batch.
        let j: f64 = batch
            .episodes
            .iter()
            .map(|e| e.team_costs[0].iter().sum::<f64>())
            .sum::<f64>()
            / batch.n_episodes() as f64;
        let expect = (1.0 + 0.5 * (j - 0.25)).max(0.0);
        assert_eq!(row.lambdas[0].to_bits(), expect.to_bits());
        assert_eq!(t.multipliers()[0].lambda()[0].to_bits(), expect.to_bits());
    }

    #[test]
    fn identical_runs_are_bitwise_identical_across_worker_counts() {
        let env = tiny_rover();
        let mut rows: Vec<Vec<IterationRow>> = Vec::new();
        let mut params: Vec<Vec<f64>> = Vec::new();
        for workers in [0usize, 1, 3] {
            let mut s = settings(Variant::E2cTeam, 21);
            s.workers = workers;
            let mut t = Trainer::new(env.clone(), s).unwrap();
            let r: Vec<IterationRow> =
                (0..2).map(|_| t.run_iteration().unwrap()).collect();
            rows.push(r);
            params.push(t.actor().params().to_vec());
        }
        for other in 1..rows.len() {
            for (a, b) in rows[0].iter().zip(rows[other].iter()) {
                assert!(rows_equal(a, b), "worker-count variant changed a row");
            }
            assert_eq!(
                params[0].iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                params[other].iter().map(|p| p.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn lambda_zero_constrained_run_matches_unconstrained_on_shared_columns() {
        let env = tiny_rover();
        let mut constrained = settings(Variant::CMappo, 31);
        constrained.constraints = vec![ConstraintSpec {
            channel: "collision".into(),
            scope: Scope::Team,
            threshold: 0.5,
            discounting: Discounting::Episodic,
            multiplier_init: 0.0,
            lagrange_lr: 0.0,
        }];
        let mut a = Trainer::new(env.clone(), constrained).unwrap();
        let mut b = Trainer::new(env, settings(Variant::Mappo, 31)).unwrap();
        for _ in 0..3 {
            let ra = a.run_iteration().unwrap();
            let rb = b.run_iteration().unwrap();
            assert_eq!(ra.mean_reward.to_bits(), rb.mean_reward.to_bits());
            assert_eq!(ra.mean_costs[0].1.to_bits(), rb.mean_costs[0].1.to_bits());
            assert_eq!(ra.policy_loss.to_bits(), rb.policy_loss.to_bits());
            assert_eq!(ra.value_loss.to_bits(), rb.value_loss.to_bits());
            assert_eq!(ra.lambdas, vec![0.0]);
            assert!(rb.lambdas.is_empty());
        }
        let pa: Vec<u64> = a.actor().params().iter().map(|p| p.to_bits()).collect();
        let pb: Vec<u64> = b.actor().params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(pa, pb);
        let ca: Vec<u64> = a.critic().params().iter().map(|p| p.to_bits()).collect();
        let cb: Vec<u64> = b.critic().params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(ca, cb);
    }

    #[test]
    fn zero_psi_mixing_reduces_the_exploring_variant_to_its_constrained_core() {
        let env = tiny_rover();
        let mut exploring = settings(Variant::E2c, 37);
        exploring.oem = Some(OemSettings {
            estimator: Estimator::Count { quantization: 1 },
            mixing: Mixing::Mixed { psi: 0.0 },
            beta_weighting: true,
        });
        let mut a = Trainer::new(env.clone(), exploring).unwrap();
        let mut b = Trainer::new(env, settings(Variant::CMappo, 37)).unwrap();
        for _ in 0..3 {
            let ra = a.run_iteration().unwrap();
            let rb = b.run_iteration().unwrap();
            assert!(rows_equal(&ra, &rb));
        }
        let pa: Vec<u64> = a.actor().params().iter().map(|p| p.to_bits()).collect();
        let pb: Vec<u64> = b.actor().params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn checkpoint_resume_continues_the_run_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.ckpt");
        let env = tiny_rover();

        let mut full = Trainer::new(env.clone(), settings(Variant::E2cTeam, 51)).unwrap();
        let mut expected = Vec::new();
        for i in 0..4 {
            if i == 2 {
                // Nothing: the interrupted run saves here instead.
            }
            expected.push(full.run_iteration().unwrap());
        }

        let mut first = Trainer::new(env.clone(), settings(Variant::E2cTeam, 51)).unwrap();
        first.run_iteration().unwrap();
        first.run_iteration().unwrap();
        first.save_checkpoint(&path).unwrap();
        drop(first);

        let mut resumed = Trainer::new(env, settings(Variant::E2cTeam, 51)).unwrap();
        resumed.load_checkpoint(&path).unwrap();
        assert_eq!(resumed.iteration(), 2);
        let r2 = resumed.run_iteration().unwrap();
        let r3 = resumed.run_iteration().unwrap();
        assert!(rows_equal(&r2, &expected[2]), "{r2:?} vs {:?}", expected[2]);
        assert!(rows_equal(&r3, &expected[3]));
    }

    #[test]
    fn checkpoint_round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.ckpt");
        let cfg = ParticleConfig { horizon: 8, ..ParticleConfig::for_task(ParticleTask::KeepAway) };
        let env = EnvKind::Particle(ParticleWorld::<f64>::new(cfg).unwrap());
        let mut s = settings(Variant::CMappo, 61);
        s.constraints = vec![ConstraintSpec {
            channel: "coop_collision".into(),
            scope: Scope::Individual,
            threshold: 0.6,
            discounting: Discounting::Discounted,
            multiplier_init: 1.0,
            lagrange_lr: 0.05,
        }];
        s.hypers.batch_size = 32;
        let mut t = Trainer::new(env.clone(), s.clone()).unwrap();
        t.run_iteration().unwrap();
        t.save_checkpoint(&path).unwrap();

        let mut fresh = Trainer::new(env, s).unwrap();
        fresh.load_checkpoint(&path).unwrap();
        assert_eq!(fresh.iteration(), 1);
        assert_eq!(fresh.actor().params(), t.actor().params());
        assert_eq!(fresh.critic().params(), t.critic().params());
        for (a, b) in fresh.cost_sets().iter().zip(t.cost_sets().iter()) {
            for (x, y) in a.nets.iter().zip(b.nets.iter()) {
                assert_eq!(x.params(), y.params());
            }
        }
        assert_eq!(fresh.multipliers()[0].lambda(), t.multipliers()[0].lambda());
        // Adversary nets participate too (keep-away has one).
        assert!(fresh.last_adversary_stats().is_none());
        let ra = fresh.run_iteration().unwrap();
        let rb = t.run_iteration().unwrap();
        assert!(rows_equal(&ra, &rb));
    }

    #[test]
    fn evaluation_is_deterministic_and_reports_every_channel() {
        let env = tiny_rover();
        let t = Trainer::new(env, settings(Variant::Mappo, 71)).unwrap();
        let a = t.evaluate(4, 9).unwrap();
        let b = t.evaluate(4, 9).unwrap();
        assert_eq!(a.mean_reward.to_bits(), b.mean_reward.to_bits());
        assert_eq!(a.episodes, 4);
        assert_eq!(a.mean_costs.len(), 1);
        assert_eq!(a.mean_costs[0].0, "collision");
        let c = t.evaluate(4, 10).unwrap();
        // Different eval seed, different initial states.
        assert_ne!(a.mean_reward.to_bits(), c.mean_reward.to_bits());
    }

    #[test]
    fn exploring_variant_shapes_rewards_but_reports_extrinsic_ones() {
        let env = tiny_rover();
        let mut t = Trainer::new(env, settings(Variant::E2c, 81)).unwrap();
        let (row, batch) = t.run_iteration_with_batch().unwrap();
        let extrinsic: f64 = batch
            .episodes
            .iter()
            .map(|e| e.rewards.iter().sum::<f64>())
            .sum::<f64>()
            / batch.n_episodes() as f64;
        assert_eq!(row.mean_reward.to_bits(), extrinsic.to_bits());
        // Pure mixing replaced the training stream with bonuses, which are
        // positive from the first visit on.
        let ep = &batch.episodes[0];
        assert!(ep.shaped_rewards.iter().any(|r| r.to_bits() != 0f64.to_bits()));
        assert!(ep.shaped_rewards[0] > 0.0);
    }
}
