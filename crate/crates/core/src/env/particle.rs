//! Particle tasks: a small team of cooperators sharing a box with one
//! adversary, in the style of classic 2-d point-mass testbeds.
//!
//! Physics, per entity and step (mass 1, `dt` = 0.1, `damping` = 0.25):
//!
//! ```text
//! v <- v * (1 - damping) + (f_action + f_contact) * dt
//! |v| clamped to the role's max speed, p <- p + v * dt, p clamped to the box
//! ```
//!
//! Actions are discrete: no-op / +x / -x / +y / -y, scaled by the role's
//! acceleration. Overlapping bodies push each other apart through a softplus
//! contact force; the *event* predicate (for rewards and costs) is the hard
//! overlap test `dist < r_i + r_j`.
//!
//! Three tasks, differing only in reward wiring:
//!
//! - `deception` — one of the landmarks is secretly the target. Cooperators
//!   (who see a target one-hot) earn `-min_i d(coop_i, target) + d(adv,
//!   target)`; the adversary, who is never shown the target, earns `-d(adv,
//!   target)` and must infer it from the team's behavior.
//! - `keep_away` — same layout; cooperators earn `-min_i d(coop_i, target)`,
//!   the adversary earns the negation (it wants the team pushed off).
//! - `predator_prey` — the cooperators chase the (faster) adversary. Each
//!   contact with the prey pays the team `10` and the prey `-10`, plus a
//!   `0.1 * min_i d(coop_i, prey)` shaping term with the same zero sum.
//!
//! The single cost channel counts contacts among cooperators — one event per
//! overlapping pair per step — and, when `include_adversary_contacts` is on,
//! each cooperator-adversary contact as well.

use super::{dist2, ActionSpec, CostEvent, ObsPacket, StepResult, World};
use crate::error::{Error, Result};
use crate::net::ActionValue;
use crate::scalar::{real, Real};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

/// Which reward wiring the world uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticleTask {
    Deception,
    KeepAway,
    PredatorPrey,
}

impl ParticleTask {
    pub fn name(&self) -> &'static str {
        match self {
            ParticleTask::Deception => "deception",
            ParticleTask::KeepAway => "keep_away",
            ParticleTask::PredatorPrey => "predator_prey",
        }
    }
}

/// Parameters for [`ParticleWorld`]. [`ParticleConfig::for_task`] fills the
/// per-role movement numbers with task defaults; override afterwards if a run
/// needs to.
#[derive(Debug, Clone)]
pub struct ParticleConfig {
    pub task: ParticleTask,
    pub n_good: usize,
    pub n_landmarks: usize,
    pub horizon: usize,
    pub dt: f64,
    pub damping: f64,
    pub contact_force: f64,
    pub contact_margin: f64,
    /// Count cooperator-adversary overlaps on the cost channel too. Usually
    /// off for `predator_prey`, where touching the adversary is the point.
    pub include_adversary_contacts: bool,
    pub good_accel: f64,
    pub good_max_speed: f64,
    pub adv_accel: f64,
    pub adv_max_speed: f64,
    pub good_radius: f64,
    pub adv_radius: f64,
}

impl ParticleConfig {
    pub fn for_task(task: ParticleTask) -> Self {
        let (good_accel, good_max_speed, adv_accel, adv_max_speed) = match task {
            // The adversary infers rather than outruns.
            ParticleTask::Deception => (5.0, 10.0, 4.0, 10.0),
            ParticleTask::KeepAway => (5.0, 10.0, 5.0, 10.0),
            // Slower, cooperating predators versus a faster prey.
            ParticleTask::PredatorPrey => (3.0, 1.0, 4.0, 1.3),
        };
        Self {
            task,
            n_good: 3,
            n_landmarks: 3,
            horizon: 80,
            dt: 0.1,
            damping: 0.25,
            contact_force: 100.0,
            contact_margin: 0.001,
            include_adversary_contacts: !matches!(task, ParticleTask::PredatorPrey),
            good_accel,
            good_max_speed,
            adv_accel,
            adv_max_speed,
            good_radius: 0.05,
            adv_radius: 0.075,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_good == 0 {
            return Err(Error::config("need at least one cooperating agent"));
        }
        if self.n_landmarks == 0 {
            return Err(Error::config("need at least one landmark"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        let positive = [
            ("dt", self.dt),
            ("contact_force", self.contact_force),
            ("contact_margin", self.contact_margin),
            ("good_accel", self.good_accel),
            ("good_max_speed", self.good_max_speed),
            ("adv_accel", self.adv_accel),
            ("adv_max_speed", self.adv_max_speed),
            ("good_radius", self.good_radius),
            ("adv_radius", self.adv_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config("damping must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Body<R> {
    pos: (R, R),
    vel: (R, R),
    radius: R,
    accel: R,
    max_speed: R,
}

#[derive(Debug, Clone)]
pub struct ParticleWorld<R> {
    cfg: ParticleConfig,
    goods: Vec<Body<R>>,
    adversary: Body<R>,
    landmarks: Vec<(R, R)>,
    /// Index of the target landmark; `None` for `predator_prey`.
    target: Option<usize>,
    t: usize,
    started: bool,
}

impl<R: Real> ParticleWorld<R> {
    pub fn new(cfg: ParticleConfig) -> Result<Self> {
        cfg.validate()?;
        let blank = Body {
            pos: (R::zero(), R::zero()),
            vel: (R::zero(), R::zero()),
            radius: R::zero(),
            accel: R::zero(),
            max_speed: R::zero(),
        };
        Ok(Self {
            goods: Vec::new(),
            adversary: blank,
            landmarks: Vec::new(),
            target: None,
            t: 0,
            started: false,
            cfg,
        })
    }

    pub fn config(&self) -> &ParticleConfig {
        &self.cfg
    }

    pub fn target_index(&self) -> Option<usize> {
        self.target
    }

    pub fn good_positions(&self) -> Vec<(R, R)> {
        self.goods.iter().map(|b| b.pos).collect()
    }

    pub fn good_velocities(&self) -> Vec<(R, R)> {
        self.goods.iter().map(|b| b.vel).collect()
    }

    pub fn adversary_position(&self) -> (R, R) {
        self.adversary.pos
    }

    pub fn landmark_positions(&self) -> Vec<(R, R)> {
        self.landmarks.clone()
    }

    #[cfg(test)]
    fn set_target_for_test(&mut self, idx: usize) {
        self.target = Some(idx);
    }

    fn body(cfg: &ParticleConfig, good: bool) -> Body<R> {
        Body {
            pos: (R::zero(), R::zero()),
            vel: (R::zero(), R::zero()),
            radius: real(if good { cfg.good_radius } else { cfg.adv_radius }),
            accel: real(if good { cfg.good_accel } else { cfg.adv_accel }),
            max_speed: real(if good { cfg.good_max_speed } else { cfg.adv_max_speed }),
        }
    }

    /// Hard overlap test used for reward and cost events.
    fn touching(a: &Body<R>, b: &Body<R>) -> bool {
        dist2(a.pos, b.pos) < a.radius + b.radius
    }

    /// Softplus repulsion between two overlapping-or-near bodies, returned as
    /// the force on `a` (negate for `b`). Zero once the gap exceeds ~30
    /// margins, so well-separated bodies are numerically untouched.
    fn contact_force(&self, a: &Body<R>, b: &Body<R>) -> (R, R) {
        let k = real::<R>(self.cfg.contact_margin);
        let strength = real::<R>(self.cfg.contact_force);
        let d = dist2(a.pos, b.pos);
        let dist_min = a.radius + b.radius;
        let s = -(d - dist_min) / k;
        if s < real::<R>(-30.0) {
            return (R::zero(), R::zero());
        }
        // softplus(s) = max(s, 0) + ln(1 + exp(-|s|)), stable at both ends.
        let softplus = s.max(R::zero()) + (R::one() + (-s.abs()).exp()).ln();
        let penetration = softplus * k;
        if d == R::zero() {
            // Coincident centers have no direction; push along +x by
            // convention so the pair still separates.
            return (strength * penetration, R::zero());
        }
        let scale = strength * penetration / d;
        (scale * (a.pos.0 - b.pos.0), scale * (a.pos.1 - b.pos.1))
    }

    fn integrate(body: &mut Body<R>, force: (R, R), dt: R, damping: R) {
        body.vel.0 = body.vel.0 * (R::one() - damping) + force.0 * dt;
        body.vel.1 = body.vel.1 * (R::one() - damping) + force.1 * dt;
        let speed = (body.vel.0 * body.vel.0 + body.vel.1 * body.vel.1).sqrt();
        if speed > body.max_speed {
            let scale = body.max_speed / speed;
            body.vel.0 *= scale;
            body.vel.1 *= scale;
        }
        body.pos.0 = (body.pos.0 + body.vel.0 * dt).max(-R::one()).min(R::one());
        body.pos.1 = (body.pos.1 + body.vel.1 * dt).max(-R::one()).min(R::one());
    }

    fn action_force(action: usize, accel: R) -> (R, R) {
        match action {
            0 => (R::zero(), R::zero()),
            1 => (accel, R::zero()),
            2 => (-accel, R::zero()),
            3 => (R::zero(), accel),
            4 => (R::zero(), -accel),
            _ => unreachable!("spec check bounds the action index"),
        }
    }

    fn min_good_dist_to(&self, point: (R, R)) -> R {
        self.goods
            .iter()
            .map(|b| dist2(b.pos, point))
            .fold(R::infinity(), R::min)
    }

    /// Rewards `(team, adversary)` for the current (post-move) state.
    fn rewards(&self) -> (R, R) {
        match self.cfg.task {
            ParticleTask::Deception => {
                let target = self.landmarks[self.target.expect("deception has a target")];
                let team_term = -self.min_good_dist_to(target);
                let adv_dist = dist2(self.adversary.pos, target);
                (team_term + adv_dist, -adv_dist)
            }
            ParticleTask::KeepAway => {
                let target = self.landmarks[self.target.expect("keep_away has a target")];
                let d = self.min_good_dist_to(target);
                (-d, d)
            }
            ParticleTask::PredatorPrey => {
                let contacts = self
                    .goods
                    .iter()
                    .filter(|g| Self::touching(g, &self.adversary))
                    .count();
                let capture = real::<R>(10.0) * real::<R>(contacts as f64);
                let shaping = real::<R>(0.1) * self.min_good_dist_to(self.adversary.pos);
                (capture - shaping, shaping - capture)
            }
        }
    }

    fn cost_events(&self) -> CostEvent<R> {
        let n = self.goods.len();
        let mut per_agent = vec![R::zero(); n];
        let mut team = R::zero();
        for i in 0..n {
            for j in i + 1..n {
                if Self::touching(&self.goods[i], &self.goods[j]) {
                    team += R::one();
                    per_agent[i] = R::one();
                    per_agent[j] = R::one();
                }
            }
        }
        if self.cfg.include_adversary_contacts {
            for (i, g) in self.goods.iter().enumerate() {
                if Self::touching(g, &self.adversary) {
                    team += R::one();
                    per_agent[i] = R::one();
                }
            }
        }
        CostEvent { per_agent, team }
    }

    fn observe(&self) -> ObsPacket<R> {
        let one_hot_len = self.cfg.n_landmarks;
        let mut agent_obs = Vec::with_capacity(self.goods.len());
        for (i, me) in self.goods.iter().enumerate() {
            let mut obs = Vec::with_capacity(self.obs_dim());
            obs.push(me.vel.0);
            obs.push(me.vel.1);
            obs.push(me.pos.0);
            obs.push(me.pos.1);
            for lm in &self.landmarks {
                obs.push(lm.0 - me.pos.0);
                obs.push(lm.1 - me.pos.1);
            }
            for (j, other) in self.goods.iter().enumerate() {
                if j == i {
                    continue;
                }
                obs.push(other.pos.0 - me.pos.0);
                obs.push(other.pos.1 - me.pos.1);
            }
            obs.push(self.adversary.pos.0 - me.pos.0);
            obs.push(self.adversary.pos.1 - me.pos.1);
            for l in 0..one_hot_len {
                obs.push(if Some(l) == self.target { R::one() } else { R::zero() });
            }
            agent_obs.push(obs);
        }
        // The adversary's view carries no target identity, by construction.
        let me = &self.adversary;
        let mut adv = Vec::with_capacity(self.adversary_obs_dim());
        adv.push(me.vel.0);
        adv.push(me.vel.1);
        adv.push(me.pos.0);
        adv.push(me.pos.1);
        for lm in &self.landmarks {
            adv.push(lm.0 - me.pos.0);
            adv.push(lm.1 - me.pos.1);
        }
        for g in &self.goods {
            adv.push(g.pos.0 - me.pos.0);
            adv.push(g.pos.1 - me.pos.1);
        }
        ObsPacket {
            agent_obs,
            adversary_obs: Some(adv),
            betas: vec![R::one(); self.goods.len()],
        }
    }

    /// Quantization bound on a role's speed: the terminal velocity under
    /// constant full thrust, `accel * dt / damping`, capped by the role's
    /// hard speed limit. Contact kicks can briefly exceed it; the observation
    /// quantizer clamps.
    fn speed_bound(&self, accel: f64, max_speed: f64) -> f64 {
        max_speed.min(accel * self.cfg.dt / self.cfg.damping)
    }
}

impl<R: Real> World<R> for ParticleWorld<R> {
    fn n_agents(&self) -> usize {
        self.cfg.n_good
    }

    fn obs_dim(&self) -> usize {
        // vel + pos + landmark deltas + other agents (peers and adversary)
        // + target one-hot.
        4 + 2 * self.cfg.n_landmarks + 2 * self.cfg.n_good + self.cfg.n_landmarks
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete(5)
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn cost_channels(&self) -> Vec<String> {
        vec!["coop_collision".to_string()]
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let v = self.speed_bound(self.cfg.good_accel, self.cfg.good_max_speed);
        let mut lo = vec![-v, -v, -1.0, -1.0];
        let mut hi = vec![v, v, 1.0, 1.0];
        let n_rel = self.cfg.n_landmarks + self.cfg.n_good;
        lo.extend(std::iter::repeat(-2.0).take(2 * n_rel));
        hi.extend(std::iter::repeat(2.0).take(2 * n_rel));
        lo.extend(std::iter::repeat(0.0).take(self.cfg.n_landmarks));
        hi.extend(std::iter::repeat(1.0).take(self.cfg.n_landmarks));
        (lo, hi)
    }

    fn has_adversary(&self) -> bool {
        true
    }

    fn adversary_obs_dim(&self) -> usize {
        4 + 2 * self.cfg.n_landmarks + 2 * self.cfg.n_good
    }

    fn adversary_action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete(5)
    }

    fn reset(&mut self, rng: &mut ChaCha12Rng) -> Result<ObsPacket<R>> {
        let landmark_pts = place_separated(rng, 0.3, self.cfg.n_landmarks)?;
        self.target = match self.cfg.task {
            ParticleTask::PredatorPrey => None,
            _ => Some(rng.gen_range(0..self.cfg.n_landmarks)),
        };
        let agent_pts = place_separated(rng, 0.2, self.cfg.n_good + 1)?;

        self.landmarks = landmark_pts.into_iter().map(|p| (real(p.0), real(p.1))).collect();
        self.goods = (0..self.cfg.n_good)
            .map(|i| {
                let mut b = Self::body(&self.cfg, true);
                b.pos = (real(agent_pts[i].0), real(agent_pts[i].1));
                b
            })
            .collect();
        self.adversary = {
            let mut b = Self::body(&self.cfg, false);
            let p = agent_pts[self.cfg.n_good];
            b.pos = (real(p.0), real(p.1));
            b
        };
        self.t = 0;
        self.started = true;
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
        if actions.len() != self.cfg.n_good {
            return Err(Error::usage("one action per cooperating agent required"));
        }
        let Some(adv_action) = adversary_action else {
            return Err(Error::usage("particle world needs an adversary action"));
        };
        let spec = self.action_spec();
        let mut forces = Vec::with_capacity(self.cfg.n_good);
        for (body, action) in self.goods.iter().zip(actions.iter()) {
            spec.check(action)?;
            let ActionValue::Discrete(a) = action else { unreachable!() };
            forces.push(Self::action_force(*a, body.accel));
        }
        self.adversary_action_spec().check(adv_action)?;
        let ActionValue::Discrete(a) = adv_action else {
            return Err(Error::usage("adversary action must be discrete"));
        };
        let mut adv_force = Self::action_force(*a, self.adversary.accel);

        // Pairwise contact forces over all bodies (landmarks do not collide).
        let n = self.goods.len();
        for i in 0..n {
            for j in i + 1..n {
                let f = self.contact_force(&self.goods[i], &self.goods[j]);
                forces[i].0 += f.0;
                forces[i].1 += f.1;
                forces[j].0 -= f.0;
                forces[j].1 -= f.1;
            }
            let f = self.contact_force(&self.goods[i], &self.adversary);
            forces[i].0 += f.0;
            forces[i].1 += f.1;
            adv_force.0 -= f.0;
            adv_force.1 -= f.1;
        }

        let dt = real::<R>(self.cfg.dt);
        let damping = real::<R>(self.cfg.damping);
        for (body, force) in self.goods.iter_mut().zip(forces.into_iter()) {
            Self::integrate(body, force, dt, damping);
        }
        Self::integrate(&mut self.adversary, adv_force, dt, damping);

        let (reward, adversary_reward) = self.rewards();
        let costs = vec![self.cost_events()];
        self.t += 1;
        let done = self.t == self.cfg.horizon;
        Ok(StepResult { obs: self.observe(), reward, adversary_reward, costs, done })
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "t": self.t,
            "task": self.cfg.task.name(),
            "good": self.goods.iter().map(|b| json!({
                "pos": vec![b.pos.0.to_f64c(), b.pos.1.to_f64c()],
                "vel": vec![b.vel.0.to_f64c(), b.vel.1.to_f64c()],
            })).collect::<Vec<_>>(),
            "adversary": {
                "pos": vec![self.adversary.pos.0.to_f64c(), self.adversary.pos.1.to_f64c()],
                "vel": vec![self.adversary.vel.0.to_f64c(), self.adversary.vel.1.to_f64c()],
            },
            "landmarks": self.landmarks.iter().map(|l| vec![l.0.to_f64c(), l.1.to_f64c()]).collect::<Vec<_>>(),
            "target": self.target,
        })
    }
}

/// Rejection-sample `n` points in the spawn square, pairwise at least
/// `min_sep` apart.
fn place_separated(
    rng: &mut ChaCha12Rng,
    min_sep: f64,
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    const SPAWN: f64 = 0.8;
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        if attempts >= 1000 * n {
            return Err(Error::config(format!(
                "could not place {n} bodies with separation {min_sep} in the box"
            )));
        }
        attempts += 1;
        let p = (rng.gen_range(-SPAWN..SPAWN), rng.gen_range(-SPAWN..SPAWN));
        if placed
            .iter()
            .all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_sep)
        {
            placed.push(p);
        }
    }
    Ok(placed)
}
