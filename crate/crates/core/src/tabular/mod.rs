//! Exact machinery for small finite multi-agent MDPs with shared state.
//!
//! States and per-agent actions are explicitly enumerated; joint actions are
//! mixed-radix indices over the agents (agent 0 most significant). Policy
//! evaluation is a direct linear solve of `(I - gamma * P_pi) V = c_pi` with
//! a residual check, so values, advantages, occupancies, and expected returns
//! here are exact up to solver round-off — they are the reference the
//! trust-region cost bound is verified against, not estimates.

mod verify;

pub use verify::{
    gen_instance, mc_cost_return, perturb_one_agent, policy_divergences, verify_team_bound,
    BoundCheck, DivergenceReport, InstanceLimits, MonteCarloEstimate,
};

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Explicit finite Dec-MDP tensors.
#[derive(Debug, Clone)]
pub struct TabularDecMdp<R> {
    n_states: usize,
    /// Action count per agent.
    actions: Vec<usize>,
    /// `P[s][u][s']` flattened as `s * U * S + u * S + s'`.
    transition: Vec<R>,
    /// `r[s][u]` flattened as `s * U + u`.
    reward: Vec<R>,
    /// Per constraint channel: binary `c[s][u]`, same layout as `reward`.
    costs: Vec<Vec<R>>,
    gamma: R,
    /// Initial state distribution.
    rho0: Vec<R>,
}

/// Per-agent policy tables: `rows[agent][s * actions[agent] + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicyTable<R> {
    rows: Vec<Vec<R>>,
    actions: Vec<usize>,
    n_states: usize,
}

/// Exact evaluation of one scalar signal under a fixed joint policy.
#[derive(Debug, Clone)]
pub struct PolicyEval<R> {
    /// `V(s)`.
    pub v: Vec<R>,
    /// `Q(s, u)` in `s * U + u` layout.
    pub q: Vec<R>,
    /// `A(s, u) = Q(s, u) - V(s)`.
    pub a: Vec<R>,
    /// `J = <rho0, V>`.
    pub j: R,
}

impl<R: Real> TabularDecMdp<R> {
    pub fn new(
        n_states: usize,
        actions: Vec<usize>,
        transition: Vec<R>,
        reward: Vec<R>,
        costs: Vec<Vec<R>>,
        gamma: R,
        rho0: Vec<R>,
    ) -> Result<Self> {
        let mdp = Self { n_states, actions, transition, reward, costs, gamma, rho0 };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let tol = real::<R>(1e-12);
        if self.n_states == 0 || self.actions.is_empty() || self.actions.iter().any(|&a| a == 0) {
            return Err(Error::usage("mdp needs at least one state and one action per agent"));
        }
        if !(self.gamma > R::zero() && self.gamma < R::one()) {
            return Err(Error::usage("discount must lie strictly between 0 and 1"));
        }
        let (s_n, u_n) = (self.n_states, self.n_joint_actions());
        if self.transition.len() != s_n * u_n * s_n {
            return Err(Error::usage("transition tensor has the wrong size"));
        }
        if self.reward.len() != s_n * u_n {
            return Err(Error::usage("reward tensor has the wrong size"));
        }
        for (j, c) in self.costs.iter().enumerate() {
            if c.len() != s_n * u_n {
                return Err(Error::usage(format!("cost tensor {j} has the wrong size")));
            }
            if c.iter().any(|v| !(*v == R::zero() || *v == R::one())) {
                return Err(Error::usage(format!("cost tensor {j} must be binary")));
            }
        }
        if self.rho0.len() != s_n {
            return Err(Error::usage("initial distribution has the wrong size"));
        }
        check_distribution(&self.rho0, tol, "initial distribution")?;
        for s in 0..s_n {
            for u in 0..u_n {
                let row = &self.transition[(s * u_n + u) * s_n..(s * u_n + u + 1) * s_n];
                check_distribution(row, tol, &format!("transition row (s={s}, u={u})"))?;
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn n_joint_actions(&self) -> usize {
        self.actions.iter().product()
    }

    pub fn gamma(&self) -> R {
        self.gamma
    }

    pub fn rho0(&self) -> &[R] {
        &self.rho0
    }

    pub fn n_cost_channels(&self) -> usize {
        self.costs.len()
    }

    pub fn reward_tensor(&self) -> &[R] {
        &self.reward
    }

    pub fn cost_tensor(&self, j: usize) -> Result<&[R]> {
        self.costs.get(j).map(Vec::as_slice).ok_or_else(|| {
            Error::usage(format!("cost channel {j} out of range ({})", self.costs.len()))
        })
    }

    pub fn transition_prob(&self, s: usize, u: usize, s2: usize) -> R {
        self.transition[(s * self.n_joint_actions() + u) * self.n_states + s2]
    }

    /// Decode a joint action index into per-agent actions (agent 0 most
    /// significant).
    pub fn decode_joint(&self, mut u: usize) -> Vec<usize> {
        let mut out = vec![0; self.actions.len()];
        for i in (0..self.actions.len()).rev() {
            out[i] = u % self.actions[i];
            u /= self.actions[i];
        }
        out
    }

    /// Inverse of [`Self::decode_joint`].
    pub fn encode_joint(&self, per_agent: &[usize]) -> usize {
        let mut u = 0;
        for (i, a) in per_agent.iter().enumerate() {
            u = u * self.actions[i] + a;
        }
        u
    }

    /// State-to-state transition matrix induced by a joint policy
    /// (`S x S` row-major).
    pub fn policy_transition(&self, pi: &JointPolicyTable<R>) -> Vec<R> {
        let (s_n, u_n) = (self.n_states, self.n_joint_actions());
        let mut p = vec![R::zero(); s_n * s_n];
        for s in 0..s_n {
            for u in 0..u_n {
                let w = pi.joint_prob(s, &self.decode_joint(u));
                if w == R::zero() {
                    continue;
                }
                let row = &self.transition[(s * u_n + u) * s_n..(s * u_n + u + 1) * s_n];
                for (tp, pr) in p[s * s_n..(s + 1) * s_n].iter_mut().zip(row.iter()) {
                    *tp += w * *pr;
                }
            }
        }
        p
    }

    /// Expected per-state signal under the policy: `x_pi(s) = E_u[x(s, u)]`.
    fn policy_signal(&self, pi: &JointPolicyTable<R>, signal: &[R]) -> Vec<R> {
        let (s_n, u_n) = (self.n_states, self.n_joint_actions());
        let mut out = vec![R::zero(); s_n];
        for s in 0..s_n {
            for u in 0..u_n {
                out[s] += pi.joint_prob(s, &self.decode_joint(u)) * signal[s * u_n + u];
            }
        }
        out
    }

    /// Exact `V`, `Q`, `A`, and `J` of an arbitrary per-(state, joint action)
    /// signal under `pi`, by direct linear solve.
    pub fn exact_values(&self, pi: &JointPolicyTable<R>, signal: &[R]) -> Result<PolicyEval<R>> {
        self.check_policy(pi)?;
        let (s_n, u_n) = (self.n_states, self.n_joint_actions());
        if signal.len() != s_n * u_n {
            return Err(Error::usage("signal tensor has the wrong size"));
        }
        let p_pi = self.policy_transition(pi);
        let x_pi = self.policy_signal(pi, signal);
        // A = I - gamma * P_pi.
        let mut a_mat = vec![R::zero(); s_n * s_n];
        for s in 0..s_n {
            for s2 in 0..s_n {
                let ident = if s == s2 { R::one() } else { R::zero() };
                a_mat[s * s_n + s2] = ident - self.gamma * p_pi[s * s_n + s2];
            }
        }
        let v = solve_linear(&a_mat, &x_pi, s_n)?;
        check_residual(&a_mat, &v, &x_pi, s_n)?;
        let mut q = vec![R::zero(); s_n * u_n];
        for s in 0..s_n {
            for u in 0..u_n {
                let row = &self.transition[(s * u_n + u) * s_n..(s * u_n + u + 1) * s_n];
                let mut exp_v = R::zero();
                for (pr, vv) in row.iter().zip(v.iter()) {
                    exp_v += *pr * *vv;
                }
                q[s * u_n + u] = signal[s * u_n + u] + self.gamma * exp_v;
            }
        }
        let a = q
            .iter()
            .enumerate()
            .map(|(idx, qv)| *qv - v[idx / u_n])
            .collect();
        let j = self.rho0.iter().zip(v.iter()).map(|(r, vv)| *r * *vv).sum();
        Ok(PolicyEval { v, q, a, j })
    }

    /// Exact values of cost channel `j`.
    pub fn exact_cost_values(&self, pi: &JointPolicyTable<R>, j: usize) -> Result<PolicyEval<R>> {
        let signal = self.cost_tensor(j)?.to_vec();
        self.exact_values(pi, &signal)
    }

    /// Unnormalized discounted state occupancy of `pi`:
    /// `d(s) = sum_t gamma^t P(s_t = s)`, the solution of
    /// `(I - gamma * P_pi^T) d = rho0`.
    pub fn occupancy(&self, pi: &JointPolicyTable<R>) -> Result<Vec<R>> {
        self.check_policy(pi)?;
        let s_n = self.n_states;
        let p_pi = self.policy_transition(pi);
        let mut a_mat = vec![R::zero(); s_n * s_n];
        for s in 0..s_n {
            for s2 in 0..s_n {
                let ident = if s == s2 { R::one() } else { R::zero() };
                // Transposed: entry (s, s2) reads P_pi[s2][s].
                a_mat[s * s_n + s2] = ident - self.gamma * p_pi[s2 * s_n + s];
            }
        }
        let d = solve_linear(&a_mat, &self.rho0, s_n)?;
        check_residual(&a_mat, &d, &self.rho0, s_n)?;
        Ok(d)
    }

    /// Surrogate cost of replacing agent `i`'s policy while everyone else
    /// keeps playing `pi`:
    /// `L = sum_s d_pi(s) * E_{u^-i ~ pi, u^i ~ pi_bar}[A_j(s, u)]`,
    /// with `d_pi` the unnormalized discounted occupancy of `pi` and `A_j`
    /// the exact advantages of cost channel `j` under `pi`.
    pub fn surrogate_cost(
        &self,
        pi: &JointPolicyTable<R>,
        pi_bar: &JointPolicyTable<R>,
        agent: usize,
        j: usize,
    ) -> Result<R> {
        self.check_policy(pi_bar)?;
        if agent >= self.n_agents() {
            return Err(Error::usage(format!("agent {agent} out of range")));
        }
        let eval = self.exact_cost_values(pi, j)?;
        let d = self.occupancy(pi)?;
        let (s_n, u_n) = (self.n_states, self.n_joint_actions());
        let mut total = R::zero();
        for s in 0..s_n {
            if d[s] == R::zero() {
                continue;
            }
            let mut per_state = R::zero();
            for u in 0..u_n {
                let acts = self.decode_joint(u);
                let mut w = R::one();
                for (h, a) in acts.iter().enumerate() {
                    let table = if h == agent { pi_bar } else { pi };
                    w = w * table.prob(h, s, *a);
                }
                per_state += w * eval.a[s * u_n + u];
            }
            total += d[s] * per_state;
        }
        Ok(total)
    }

    pub fn check_policy(&self, pi: &JointPolicyTable<R>) -> Result<()> {
        if pi.actions != self.actions || pi.n_states != self.n_states {
            return Err(Error::usage("policy table shape does not match the mdp"));
        }
        pi.validate()
    }
}

impl<R: Real> JointPolicyTable<R> {
    pub fn new(n_states: usize, actions: Vec<usize>, rows: Vec<Vec<R>>) -> Result<Self> {
        let table = Self { rows, actions, n_states };
        table.validate()?;
        Ok(table)
    }

    /// Uniform policy for every agent.
    pub fn uniform(n_states: usize, actions: &[usize]) -> Self {
        let rows = actions
            .iter()
            .map(|&a| vec![R::one() / real::<R>(a as f64); n_states * a])
            .collect();
        Self { rows, actions: actions.to_vec(), n_states }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = real::<R>(1e-9);
        if self.rows.len() != self.actions.len() {
            return Err(Error::usage("policy table agent count mismatch"));
        }
        for (i, rows) in self.rows.iter().enumerate() {
            if rows.len() != self.n_states * self.actions[i] {
                return Err(Error::usage(format!("agent {i} policy table has the wrong size")));
            }
            for s in 0..self.n_states {
                let row = &rows[s * self.actions[i]..(s + 1) * self.actions[i]];
                check_distribution(row, tol, &format!("policy row (agent={i}, s={s})"))?;
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn prob(&self, agent: usize, s: usize, a: usize) -> R {
        self.rows[agent][s * self.actions[agent] + a]
    }

    pub fn row(&self, agent: usize, s: usize) -> &[R] {
        &self.rows[agent][s * self.actions[agent]..(s + 1) * self.actions[agent]]
    }

    pub fn row_mut(&mut self, agent: usize, s: usize) -> &mut [R] {
        &mut self.rows[agent][s * self.actions[agent]..(s + 1) * self.actions[agent]]
    }

    /// Product over agents of their action probabilities.
    pub fn joint_prob(&self, s: usize, per_agent: &[usize]) -> R {
        let mut w = R::one();
        for (i, a) in per_agent.iter().enumerate() {
            w = w * self.prob(i, s, *a);
        }
        w
    }
}

fn check_distribution<R: Real>(row: &[R], tol: R, what: &str) -> Result<()> {
    if row.iter().any(|p| *p < R::zero() || !p.is_finite()) {
        return Err(Error::usage(format!("{what} has negative or non-finite entries")));
    }
    let sum: R = row.iter().copied().sum();
    if (sum - R::one()).abs() > tol {
        return Err(Error::usage(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Dense Gaussian elimination with partial pivoting (`a` is `n x n`
/// row-major, consumed as a copy). Fine at the handful-of-states scale this
/// module targets.
pub(crate) fn solve_linear<R: Real>(a: &[R], b: &[R], n: usize) -> Result<Vec<R>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < real::<R>(1e-300) {
            return Err(Error::numeric("linear solve: singular matrix"));
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == R::zero() {
                continue;
            }
            for c in col..n {
                let v = m[col * n + c];
                m[r * n + c] = m[r * n + c] - f * v;
            }
            let xv = x[col];
            x[r] = x[r] - f * xv;
        }
    }
    for r in (0..n).rev() {
        let mut acc = x[r];
        for c in r + 1..n {
            acc = acc - m[r * n + c] * x[c];
        }
        x[r] = acc / m[r * n + r];
    }
    Ok(x)
}

/// Residual check `max_s |(A x - b)[s]| < tol`; the tolerance is 1e-10 at
/// `f64` precision and scales with machine epsilon for narrower scalars.
fn check_residual<R: Real>(a: &[R], x: &[R], b: &[R], n: usize) -> Result<()> {
    let tol = real::<R>(1e-10).max(R::epsilon() * real::<R>(1e4));
    let mut worst = R::zero();
    for r in 0..n {
        let mut acc = -b[r];
        for c in 0..n {
            acc += a[r * n + c] * x[c];
        }
        worst = worst.max(acc.abs());
    }
    if worst > tol {
        return Err(Error::numeric(format!("linear solve residual {worst:e} exceeds {tol:e}")));
    }
    Ok(())
}
