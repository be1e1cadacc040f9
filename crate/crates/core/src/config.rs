//! The TOML run-configuration schema and its mapping onto engine settings.
//!
//! One file describes one experiment: which variant, which world, which
//! constraints, which novelty estimator, the optimization hyperparameters,
//! the seed list, and the iteration budget. Every block rejects unknown keys
//! so a typo fails the parse (with the file's line and column) instead of
//! silently running defaults.

use serde::Deserialize;

use crate::constraints::{ConstraintSpec, Discounting, Scope};
use crate::env::{EnvKind, ParticleConfig, ParticleTask, ParticleWorld, RoverConfig, RoverWorld};
use crate::error::{Error, Result};
use crate::oem::{Estimator, Mixing};
use crate::scalar::Real;
use crate::trainer::{HyperParams, OemSettings, Trainer, TrainerSettings, Variant};

/// A fully parsed experiment description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment name; becomes the output directory, so it must be a plain
    /// path segment.
    pub name: String,
    /// One of `mappo`, `c-mappo`, `c-mappo-pe`, `e2c`, `e2c-team`.
    pub variant: String,
    /// Master seeds; `train` uses the first, `sweep` fans out over all.
    pub seeds: Vec<u64>,
    /// Training iterations per seed.
    pub iterations: u64,
    /// Episode-collection worker threads; 0 uses the global pool.
    #[serde(default)]
    pub workers: usize,
    /// Write an intermediate checkpoint every this many iterations (0: only
    /// the final one).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Record world snapshots and write a line-delimited trajectory dump.
    #[serde(default)]
    pub dump_trajectories: bool,
    pub env: EnvBlock,
    #[serde(default)]
    pub hyper: HyperBlock,
    #[serde(default, rename = "constraint")]
    pub constraints: Vec<ConstraintBlock>,
    #[serde(default)]
    pub oem: Option<OemBlock>,
}

/// World selection plus per-kind overrides. All keys are optional except
/// `kind`; unset keys keep the world's defaults. Keys belonging to the other
/// kind are rejected at validation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvBlock {
    /// `rover` or `particle`.
    pub kind: String,
    pub horizon: Option<usize>,

    // Rover keys.
    pub n_rovers: Option<usize>,
    pub n_pois: Option<usize>,
    pub arena_size: Option<f64>,
    pub coupling: Option<usize>,
    pub poi_radius: Option<f64>,
    pub collision_radius: Option<f64>,
    pub max_step: Option<f64>,
    pub spawn_radius: Option<f64>,
    pub observation_radius: Option<f64>,
    pub poi_min_separation: Option<f64>,
    pub poi_value_min: Option<u32>,
    pub poi_value_max: Option<u32>,

    // Particle keys.
    /// `deception`, `keep_away`, or `predator_prey`.
    pub task: Option<String>,
    pub n_good: Option<usize>,
    pub n_landmarks: Option<usize>,
    pub dt: Option<f64>,
    pub damping: Option<f64>,
    pub contact_force: Option<f64>,
    pub contact_margin: Option<f64>,
    pub include_adversary_contacts: Option<bool>,
    pub good_accel: Option<f64>,
    pub good_max_speed: Option<f64>,
    pub adv_accel: Option<f64>,
    pub adv_max_speed: Option<f64>,
    pub good_radius: Option<f64>,
    pub adv_radius: Option<f64>,
}

/// Optimization hyperparameters; every key optional, defaults match
/// [`HyperParams::default`].
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperBlock {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coeff: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub lambda_scaled_advantages: bool,
}

impl Default for HyperBlock {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            clip: h.clip,
            gamma: h.gamma,
            gae_lambda: h.gae_lambda,
            entropy_coeff: h.entropy_coeff,
            epochs: h.epochs,
            minibatches: h.minibatches,
            batch_size: h.batch_size,
            actor_lr: h.actor_lr,
            critic_lr: h.critic_lr,
            hidden: h.hidden,
            lambda_scaled_advantages: h.lambda_scaled_advantages,
        }
    }
}

impl HyperBlock {
    pub fn to_hypers(&self) -> HyperParams {
        HyperParams {
            clip: self.clip,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            entropy_coeff: self.entropy_coeff,
            epochs: self.epochs,
            minibatches: self.minibatches,
            batch_size: self.batch_size,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            hidden: self.hidden.clone(),
            lambda_scaled_advantages: self.lambda_scaled_advantages,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeName {
    Team,
    Individual,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountingName {
    #[default]
    Episodic,
    Discounted,
}

/// One `[[constraint]]` table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    /// Must name one of the world's cost channels.
    pub channel: String,
    pub scope: ScopeName,
    /// Team-level budget; individual scope splits it evenly across agents.
    pub threshold: f64,
    #[serde(default)]
    pub discounting: DiscountingName,
    #[serde(default = "default_multiplier_init")]
    pub multiplier_init: f64,
    #[serde(default = "default_lagrange_lr")]
    pub lagrange_lr: f64,
}

fn default_multiplier_init() -> f64 {
    1.0
}

fn default_lagrange_lr() -> f64 {
    0.05
}

impl ConstraintBlock {
    pub fn to_spec(&self) -> ConstraintSpec {
        ConstraintSpec {
            channel: self.channel.clone(),
            scope: match self.scope {
                ScopeName::Team => Scope::Team,
                ScopeName::Individual => Scope::Individual,
            },
            threshold: self.threshold,
            discounting: match self.discounting {
                DiscountingName::Episodic => Discounting::Episodic,
                DiscountingName::Discounted => Discounting::Discounted,
            },
            multiplier_init: self.multiplier_init,
            lagrange_lr: self.lagrange_lr,
        }
    }
}

/// The `[oem]` table for the exploring variants.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OemBlock {
    /// `count` or `knn`.
    pub estimator: String,
    /// Count estimator only; defaults to 1 (binary split per component).
    pub quantization: Option<u8>,
    /// Nearest-neighbor estimator only; defaults to 5.
    pub k: Option<usize>,
    /// `pure` (bonus replaces the training reward) or `mixed`.
    #[serde(default = "default_mixing")]
    pub mixing: String,
    /// Mixed weighting only; required when `mixing = "mixed"`.
    pub psi: Option<f64>,
    /// Weight each agent's bonus by the world's exploration-weight stream.
    #[serde(default)]
    pub beta_weighting: bool,
}

fn default_mixing() -> String {
    "pure".into()
}

impl OemBlock {
    pub fn to_settings(&self) -> Result<OemSettings> {
        let estimator = match self.estimator.as_str() {
            "count" => {
                if self.k.is_some() {
                    return Err(Error::config("the count estimator does not take `k`"));
                }
                Estimator::Count { quantization: self.quantization.unwrap_or(1) }
            }
            "knn" => {
                if self.quantization.is_some() {
                    return Err(Error::config("the knn estimator does not take `quantization`"));
                }
                Estimator::Knn { k: self.k.unwrap_or(5) }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown novelty estimator {other:?}; expected `count` or `knn`"
                )))
            }
        };
        let mixing = match self.mixing.as_str() {
            "pure" => {
                if self.psi.is_some() {
                    return Err(Error::config("pure mixing does not take `psi`"));
                }
                Mixing::Pure
            }
            "mixed" => {
                let psi = self
                    .psi
                    .ok_or_else(|| Error::config("mixed mixing requires `psi`"))?;
                if !psi.is_finite() || psi < 0.0 {
                    return Err(Error::config(format!(
                        "psi must be finite and non-negative, got {psi}"
                    )));
                }
                Mixing::Mixed { psi }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown mixing {other:?}; expected `pure` or `mixed`"
                )))
            }
        };
        Ok(OemSettings { estimator, mixing, beta_weighting: self.beta_weighting })
    }
}

/// Parse a configuration file's text. Parse errors keep the TOML line and
/// column.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
    Ok(cfg)
}

/// Read and parse a configuration file, returning the raw bytes too (the
/// manifest hashes them verbatim).
pub fn load_run_config(path: &std::path::Path) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = parse_run_config(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

fn ensure_absent(kind: &str, set_keys: &[(&str, bool)]) -> Result<()> {
    for (name, is_set) in set_keys {
        if *is_set {
            return Err(Error::config(format!("env kind {kind:?} does not take `{name}`")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn variant(&self) -> Result<Variant> {
        Variant::from_name(&self.variant)
    }

    /// Instantiate the configured world.
    pub fn build_env<R: Real>(&self) -> Result<EnvKind<R>> {
        let e = &self.env;
        match e.kind.as_str() {
            "rover" => {
                ensure_absent(
                    "rover",
                    &[
                        ("task", e.task.is_some()),
                        ("n_good", e.n_good.is_some()),
                        ("n_landmarks", e.n_landmarks.is_some()),
                        ("dt", e.dt.is_some()),
                        ("damping", e.damping.is_some()),
                        ("contact_force", e.contact_force.is_some()),
                        ("contact_margin", e.contact_margin.is_some()),
                        ("include_adversary_contacts", e.include_adversary_contacts.is_some()),
                        ("good_accel", e.good_accel.is_some()),
                        ("good_max_speed", e.good_max_speed.is_some()),
                        ("adv_accel", e.adv_accel.is_some()),
                        ("adv_max_speed", e.adv_max_speed.is_some()),
                        ("good_radius", e.good_radius.is_some()),
                        ("adv_radius", e.adv_radius.is_some()),
                    ],
                )?;
                let d = RoverConfig::default();
                let value_range = (
                    e.poi_value_min.unwrap_or(d.poi_value_range.0),
                    e.poi_value_max.unwrap_or(d.poi_value_range.1),
                );
                let cfg = RoverConfig {
                    n_rovers: e.n_rovers.unwrap_or(d.n_rovers),
                    n_pois: e.n_pois.unwrap_or(d.n_pois),
                    arena_size: e.arena_size.unwrap_or(d.arena_size),
                    coupling: e.coupling.unwrap_or(d.coupling),
                    poi_radius: e.poi_radius.unwrap_or(d.poi_radius),
                    collision_radius: e.collision_radius.unwrap_or(d.collision_radius),
                    max_step: e.max_step.unwrap_or(d.max_step),
                    horizon: e.horizon.unwrap_or(d.horizon),
                    spawn_radius: e.spawn_radius.unwrap_or(d.spawn_radius),
                    observation_radius: e.observation_radius.unwrap_or(d.observation_radius),
                    poi_min_separation: e.poi_min_separation.unwrap_or(d.poi_min_separation),
                    poi_value_range: value_range,
                };
                Ok(EnvKind::Rover(RoverWorld::new(cfg)?))
            }
            "particle" => {
                ensure_absent(
                    "particle",
                    &[
                        ("n_rovers", e.n_rovers.is_some()),
                        ("n_pois", e.n_pois.is_some()),
                        ("arena_size", e.arena_size.is_some()),
                        ("coupling", e.coupling.is_some()),
                        ("poi_radius", e.poi_radius.is_some()),
                        ("collision_radius", e.collision_radius.is_some()),
                        ("max_step", e.max_step.is_some()),
                        ("spawn_radius", e.spawn_radius.is_some()),
                        ("observation_radius", e.observation_radius.is_some()),
                        ("poi_min_separation", e.poi_min_separation.is_some()),
                        ("poi_value_min", e.poi_value_min.is_some()),
                        ("poi_value_max", e.poi_value_max.is_some()),
                    ],
                )?;
                let task = match e.task.as_deref() {
                    Some("deception") => ParticleTask::Deception,
                    Some("keep_away") => ParticleTask::KeepAway,
                    Some("predator_prey") => ParticleTask::PredatorPrey,
                    Some(other) => {
                        return Err(Error::config(format!(
                            "unknown particle task {other:?}; expected deception, keep_away, or predator_prey"
                        )))
                    }
                    None => return Err(Error::config("particle env requires `task`")),
                };
                let d = ParticleConfig::for_task(task);
                let cfg = ParticleConfig {
                    task,
                    n_good: e.n_good.unwrap_or(d.n_good),
                    n_landmarks: e.n_landmarks.unwrap_or(d.n_landmarks),
                    horizon: e.horizon.unwrap_or(d.horizon),
                    dt: e.dt.unwrap_or(d.dt),
                    damping: e.damping.unwrap_or(d.damping),
                    contact_force: e.contact_force.unwrap_or(d.contact_force),
                    contact_margin: e.contact_margin.unwrap_or(d.contact_margin),
                    include_adversary_contacts: e
                        .include_adversary_contacts
                        .unwrap_or(d.include_adversary_contacts),
                    good_accel: e.good_accel.unwrap_or(d.good_accel),
                    good_max_speed: e.good_max_speed.unwrap_or(d.good_max_speed),
                    adv_accel: e.adv_accel.unwrap_or(d.adv_accel),
                    adv_max_speed: e.adv_max_speed.unwrap_or(d.adv_max_speed),
                    good_radius: e.good_radius.unwrap_or(d.good_radius),
                    adv_radius: e.adv_radius.unwrap_or(d.adv_radius),
                };
                Ok(EnvKind::Particle(ParticleWorld::new(cfg)?))
            }
            other => Err(Error::config(format!(
                "unknown env kind {other:?}; expected `rover` or `particle`"
            ))),
        }
    }

    /// Engine settings for one seed of this experiment.
    pub fn trainer_settings(&self, seed: u64) -> Result<TrainerSettings> {
        Ok(TrainerSettings {
            variant: self.variant()?,
            seed,
            hypers: self.hyper.to_hypers(),
            constraints: self.constraints.iter().map(ConstraintBlock::to_spec).collect(),
            oem: self.oem.as_ref().map(OemBlock::to_settings).transpose()?,
            workers: self.workers,
            dump_trajectories: self.dump_trajectories,
        })
    }

    /// Full semantic validation: checks every cheap rule, then dry-builds the
    /// world and the trainer so variant gating, channel names, and network
    /// shapes are verified exactly as a real run would.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::config(format!(
                "experiment name {:?} must be a plain path segment ([A-Za-z0-9._-])",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seed list contains duplicates"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iteration budget must be at least 1"));
        }
        let env = self.build_env::<f64>()?;
        let settings = self.trainer_settings(self.seeds[0])?;
        Trainer::new(env, settings)?;
        Ok(())
    }
}
