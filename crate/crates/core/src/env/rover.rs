//! Multi-rover exploration world.
//!
//! Rovers move in a square arena by continuous `(dx, dy)` displacements.
//! Points of interest (POIs) carry integer values; a POI is *observed* once
//! at least `coupling` rovers stand within `poi_radius` of it simultaneously,
//! at any state of the episode. The team reward is terminal-only: the value
//! sum of every POI observed at least once. The single cost channel counts
//! rover-rover collisions (`dist < 2 * collision_radius`), one event per
//! colliding pair per step.
//!
//! Each rover observes ten numbers: four quadrant-binned POI densities, four
//! quadrant-binned rover densities, and its own arena-normalized position.
//! Densities sum `value / max(dist, 1)` over entities in the quadrant within
//! `observation_radius`, squashed by `x / (1 + x)` into `[0, 1)`.
//!
//! The per-agent exploration weight is the largest POI value within
//! `poi_radius` of the rover (1 when no POI is close), so novelty near
//! high-value targets counts for more.

use super::{dist2, ActionSpec, CostEvent, ObsPacket, StepResult, World};
use crate::error::{Error, Result};
use crate::net::ActionValue;
use crate::scalar::{real, Real};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

/// Geometry and scoring parameters for [`RoverWorld`].
#[derive(Debug, Clone)]
pub struct RoverConfig {
    pub n_rovers: usize,
    pub n_pois: usize,
    /// Side length of the square arena.
    pub arena_size: f64,
    /// Rovers that must stand within `poi_radius` simultaneously.
    pub coupling: usize,
    /// Scoring (and exploration-weight) radius around each POI.
    pub poi_radius: f64,
    /// Two rovers collide when closer than twice this.
    pub collision_radius: f64,
    /// Per-component displacement limit per step.
    pub max_step: f64,
    pub horizon: usize,
    /// Rovers spawn uniformly in a disc of this radius around the center.
    pub spawn_radius: f64,
    /// Sensing range for the density observations.
    pub observation_radius: f64,
    /// Minimum pairwise POI distance at placement.
    pub poi_min_separation: f64,
    /// Inclusive range POI values are drawn from.
    pub poi_value_range: (u32, u32),
}

impl Default for RoverConfig {
    fn default() -> Self {
        Self {
            n_rovers: 4,
            n_pois: 8,
            arena_size: 30.0,
            coupling: 2,
            poi_radius: 2.0,
            collision_radius: 0.5,
            max_step: 1.0,
            horizon: 80,
            spawn_radius: 5.0,
            observation_radius: 30.0,
            poi_min_separation: 2.0,
            poi_value_range: (1, 5),
        }
    }
}

impl RoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rovers == 0 || self.n_pois == 0 {
            return Err(Error::config("need at least one rover and one poi"));
        }
        if self.coupling == 0 || self.coupling > self.n_rovers {
            return Err(Error::config(format!(
                "coupling {} must lie in 1..={}",
                self.coupling, self.n_rovers
            )));
        }
        let positive = [
            ("arena_size", self.arena_size),
            ("poi_radius", self.poi_radius),
            ("collision_radius", self.collision_radius),
            ("max_step", self.max_step),
            ("spawn_radius", self.spawn_radius),
            ("observation_radius", self.observation_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.poi_min_separation < 0.0 || !self.poi_min_separation.is_finite() {
            return Err(Error::config("poi_min_separation must be non-negative"));
        }
        if self.spawn_radius > self.arena_size / 2.0 {
            return Err(Error::config("spawn disc does not fit in the arena"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.poi_value_range.0 < 1 || self.poi_value_range.0 > self.poi_value_range.1 {
            return Err(Error::config("poi_value_range must satisfy 1 <= lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Poi<R> {
    pos: (R, R),
    value: R,
    observed: bool,
}

/// Read-only POI view for inspection and trajectory dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiView<R> {
    pub pos: (R, R),
    pub value: R,
    pub observed: bool,
}

#[derive(Debug, Clone)]
pub struct RoverWorld<R> {
    cfg: RoverConfig,
    rovers: Vec<(R, R)>,
    pois: Vec<Poi<R>>,
    t: usize,
    started: bool,
}

impl<R: Real> RoverWorld<R> {
    pub fn new(cfg: RoverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, rovers: Vec::new(), pois: Vec::new(), t: 0, started: false })
    }

    pub fn config(&self) -> &RoverConfig {
        &self.cfg
    }

    pub fn rover_positions(&self) -> Vec<(R, R)> {
        self.rovers.clone()
    }

    pub fn pois(&self) -> Vec<PoiView<R>> {
        self.pois
            .iter()
            .map(|p| PoiView { pos: p.pos, value: p.value, observed: p.observed })
            .collect()
    }

    /// Mark every POI whose coupling requirement is met at the current state.
    fn score_coupling(&mut self) {
        let radius = real::<R>(self.cfg.poi_radius);
        for poi in self.pois.iter_mut() {
            if poi.observed {
                continue;
            }
            let near = self.rovers.iter().filter(|r| dist2(**r, poi.pos) <= radius).count();
            if near >= self.cfg.coupling {
                poi.observed = true;
            }
        }
    }

    fn observe(&self) -> ObsPacket<R> {
        let arena = real::<R>(self.cfg.arena_size);
        let sense = real::<R>(self.cfg.observation_radius);
        let poi_radius = real::<R>(self.cfg.poi_radius);
        let mut agent_obs = Vec::with_capacity(self.rovers.len());
        let mut betas = Vec::with_capacity(self.rovers.len());
        for (i, &me) in self.rovers.iter().enumerate() {
            let mut poi_density = [R::zero(); 4];
            let mut rover_density = [R::zero(); 4];
            for poi in &self.pois {
                let d = dist2(me, poi.pos);
                if d <= sense {
                    poi_density[quadrant(me, poi.pos)] += poi.value / d.max(R::one());
                }
            }
            for (j, &other) in self.rovers.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = dist2(me, other);
                if d <= sense {
                    rover_density[quadrant(me, other)] += R::one() / d.max(R::one());
                }
            }
            let mut obs = Vec::with_capacity(10);
            obs.extend(poi_density.iter().map(|&x| x / (R::one() + x)));
            obs.extend(rover_density.iter().map(|&x| x / (R::one() + x)));
            obs.push(me.0 / arena);
            obs.push(me.1 / arena);
            agent_obs.push(obs);

            let beta = self
                .pois
                .iter()
                .filter(|p| dist2(me, p.pos) <= poi_radius)
                .map(|p| p.value)
                .fold(R::zero(), R::max);
            betas.push(if beta == R::zero() { R::one() } else { beta });
        }
        ObsPacket { agent_obs, adversary_obs: None, betas }
    }

    fn collision_events(&self) -> CostEvent<R> {
        let limit = real::<R>(2.0 * self.cfg.collision_radius);
        let n = self.rovers.len();
        let mut per_agent = vec![R::zero(); n];
        let mut team = R::zero();
        for i in 0..n {
            for j in i + 1..n {
                if dist2(self.rovers[i], self.rovers[j]) < limit {
                    team += R::one();
                    per_agent[i] = R::one();
                    per_agent[j] = R::one();
                }
            }
        }
        CostEvent { per_agent, team }
    }
}

/// Quadrant of `p` relative to `me`: x-sign picks the pair, y-sign the member.
fn quadrant<R: Real>(me: (R, R), p: (R, R)) -> usize {
    let east = p.0 >= me.0;
    let north = p.1 >= me.1;
    match (east, north) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

impl<R: Real> World<R> for RoverWorld<R> {
    fn n_agents(&self) -> usize {
        self.cfg.n_rovers
    }

    fn obs_dim(&self) -> usize {
        10
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous(2)
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn cost_channels(&self) -> Vec<String> {
        vec!["collision".to_string()]
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 10], vec![1.0; 10])
    }

    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Result<ObsPacket<R>> {
        let arena = self.cfg.arena_size;
        // POIs first: uniform in the arena, rejecting draws closer than the
        // minimum separation to an already placed POI.
        self.pois.clear();
        let max_attempts = 1000 * self.cfg.n_pois;
        let mut attempts = 0;
        while self.pois.len() < self.cfg.n_pois {
            if attempts >= max_attempts {
                return Err(Error::config(format!(
                    "could not place {} pois with separation {} in a {arena} x {arena} arena",
                    self.cfg.n_pois, self.cfg.poi_min_separation
                )));
            }
            attempts += 1;
            let pos = (rng.gen_range(0.0..arena), rng.gen_range(0.0..arena));
            let sep = real::<R>(self.cfg.poi_min_separation);
            let pos_r = (real::<R>(pos.0), real::<R>(pos.1));
            if self.pois.iter().any(|p| dist2(p.pos, pos_r) < sep) {
                continue;
            }
            let (lo, hi) = self.cfg.poi_value_range;
            let value = rng.gen_range(lo..=hi);
            self.pois.push(Poi { pos: pos_r, value: real(value as f64), observed: false });
        }
        // Rovers: uniform in the central spawn disc, kept a collision apart.
        self.rovers.clear();
        let center = arena / 2.0;
        let min_gap = real::<R>(2.0 * self.cfg.collision_radius);
        let mut attempts = 0;
        while self.rovers.len() < self.cfg.n_rovers {
            if attempts >= 1000 * self.cfg.n_rovers {
                return Err(Error::config(format!(
                    "could not place {} rovers a collision apart in a spawn disc of radius {}",
                    self.cfg.n_rovers, self.cfg.spawn_radius
                )));
            }
            attempts += 1;
            let r = self.cfg.spawn_radius * rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let pos = (real::<R>(center + r * theta.cos()), real::<R>(center + r * theta.sin()));
            if self.rovers.iter().any(|&q| dist2(q, pos) < min_gap) {
                continue;
            }
            self.rovers.push(pos);
        }
        self.t = 0;
        self.started = true;
        // The spawn state itself can already satisfy a coupling.
        self.score_coupling();
        Ok(self.observe())
    }

    fn step(
        &mut self,
        actions: &[ActionValue<R>],
        adversary_action: Option<&ActionValue<R>>,
    ) -> Result<StepResult<R>> {
        if !self.started || self.t >= self.cfg.horizon {
            return Err(Error::usage("step called on a finished or unreset episode"));
        }
        if adversary_action.is_some() {
            return Err(Error::usage("rover world has no adversary"));
        }
        if actions.len() != self.cfg.n_rovers {
            return Err(Error::usage("one action per rover required"));
        }
        let spec = self.action_spec();
        let arena = real::<R>(self.cfg.arena_size);
        let max_step = real::<R>(self.cfg.max_step);
        for (rover, action) in self.rovers.iter_mut().zip(actions.iter()) {
            spec.check(action)?;
            let ActionValue::Continuous(delta) = action else { unreachable!() };
            let dx = delta[0].max(-max_step).min(max_step);
            let dy = delta[1].max(-max_step).min(max_step);
            rover.0 = (rover.0 + dx).max(R::zero()).min(arena);
            rover.1 = (rover.1 + dy).max(R::zero()).min(arena);
        }
        self.score_coupling();
        let costs = vec![self.collision_events()];
        self.t += 1;
        let done = self.t == self.cfg.horizon;
        let reward = if done {
            // fold, not sum: an empty float sum is -0.0, and a sparse reward
            // stream should hold plain zeros.
            self.pois.iter().filter(|p| p.observed).map(|p| p.value).fold(R::zero(), |a, v| a + v)
        } else {
            R::zero()
        };
        Ok(StepResult {
            obs: self.observe(),
            reward,
            adversary_reward: R::zero(),
            costs,
            done,
        })
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "t": self.t,
            "rovers": self.rovers.iter().map(|r| vec![r.0.to_f64c(), r.1.to_f64c()]).collect::<Vec<_>>(),
            "pois": self.pois.iter().map(|p| json!({
                "pos": vec![p.pos.0.to_f64c(), p.pos.1.to_f64c()],
                "value": p.value.to_f64c(),
                "observed": p.observed,
            })).collect::<Vec<_>>(),
        })
    }
}
