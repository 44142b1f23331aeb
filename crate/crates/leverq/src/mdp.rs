//! Tabular discounted MDPs with state-action value matrices.
//!
//! The model is deliberately explicit: transition probabilities and mean
//! rewards are dense tables, policies are deterministic action vectors, and
//! every exact quantity (policy values, Bellman images, optimal values) is
//! computed by direct linear algebra so that sampled estimators elsewhere in
//! the crate can be tested against ground truth.

use crate::linalg::{LinalgError, Matrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from MDP construction, generation, and evaluation.
#[derive(Debug, Error)]
pub enum MdpError {
    #[error("discount factor must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("r_max must be positive, got {0}")]
    InvalidRmax(f64),
    #[error("state and action counts must be positive")]
    EmptyModel,
    #[error("transition table has length {got}, expected {expected}")]
    TransitionShape { got: usize, expected: usize },
    #[error("transition row (s={s}, a={a}) sums to {sum}, expected 1 within 1e-9")]
    TransitionRowSum { s: usize, a: usize, sum: f64 },
    #[error("transition row (s={s}, a={a}) has a negative probability {p}")]
    NegativeProbability { s: usize, a: usize, p: f64 },
    #[error("mean reward table has length {got}, expected {expected}")]
    RewardLength { got: usize, expected: usize },
    #[error(
        "mean rewards (plus bounded noise half-width) reach {reach}, exceeding r_max = {r_max}"
    )]
    RewardExceedsBound { reach: f64, r_max: f64 },
    #[error("policy length {got} does not match state count {expected}")]
    PolicyLength { got: usize, expected: usize },
    #[error("policy action {action} at state {state} is out of range (A = {n_actions})")]
    PolicyAction { state: usize, action: usize, n_actions: usize },
    #[error("generator rank {rank} must be in 1..=min(S, A) = {max}")]
    GeneratorRank { rank: usize, max: usize },
    #[error("value vector length {got} does not match state count {expected}")]
    ValueLength { got: usize, expected: usize },
    #[error("linear system for policy evaluation is singular")]
    SingularSystem,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Reward observation noise attached to an MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardNoise {
    /// Observations equal the mean reward.
    None,
    /// Additive centred Gaussian noise with standard deviation `sigma`.
    Gaussian { sigma: f64 },
    /// Additive uniform noise on `[-width/2, +width/2]`; observations stay
    /// within `[-r_max, r_max]` by construction.
    BoundedUniform { width: f64 },
}

impl RewardNoise {
    /// Half-width of the noise support for bounded models, zero otherwise.
    fn bounded_half_width(&self) -> f64 {
        match self {
            RewardNoise::BoundedUniform { width } => width / 2.0,
            _ => 0.0,
        }
    }
}

/// Deterministic policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub Vec<usize>);

impl Policy {
    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Serialized form of [`TabularMdp`]; the public JSON schema.
///
/// * `transitions` is flattened in `[s][a][s']` order with length `S*A*S`.
/// * `mean_rewards` is flattened row-major in `[s][a]` order with length `S*A`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    noise: RewardNoise,
    transitions: Vec<f64>,
    mean_rewards: Vec<f64>,
}

/// Tabular discounted MDP with dense transitions and mean rewards.
///
/// Invariants enforced at construction: `gamma` in `(0,1)`, `r_max > 0`,
/// every transition row is a probability distribution (non-negative, summing
/// to one within `1e-9`), and mean rewards (plus the half-width of bounded
/// noise) stay within `[-r_max, r_max]`.
#[derive(Debug, Clone, Serialize)]
#[serde(into = "RawMdp")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    noise: RewardNoise,
    /// `[s][a][s']`-flattened transition probabilities.
    transitions: Vec<f64>,
    mean_rewards: Matrix,
    /// Per-(s, a) cumulative sums of the transition row, for sampling.
    cdf: Vec<f64>,
}

impl From<TabularMdp> for RawMdp {
    fn from(m: TabularMdp) -> RawMdp {
        RawMdp {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            r_max: m.r_max,
            noise: m.noise,
            transitions: m.transitions,
            mean_rewards: m.mean_rewards.as_slice().to_vec(),
        }
    }
}

impl TryFrom<RawMdp> for TabularMdp {
    type Error = MdpError;

    fn try_from(raw: RawMdp) -> Result<Self, MdpError> {
        let expected = raw.n_states * raw.n_actions;
        let rewards = Matrix::from_vec(raw.n_states, raw.n_actions, raw.mean_rewards)
            .map_err(|e| match e {
                LinalgError::ShapeMismatch { len, .. } => {
                    MdpError::RewardLength { got: len, expected }
                }
                other => MdpError::Linalg(other),
            })?;
        TabularMdp::new(raw.gamma, raw.r_max, raw.noise, raw.transitions, rewards)
    }
}

impl<'de> Deserialize<'de> for TabularMdp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawMdp::deserialize(d)?;
        TabularMdp::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl TabularMdp {
    /// Validates and builds an MDP. `transitions` is `[s][a][s']`-flattened.
    pub fn new(
        gamma: f64,
        r_max: f64,
        noise: RewardNoise,
        transitions: Vec<f64>,
        mean_rewards: Matrix,
    ) -> Result<Self, MdpError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MdpError::InvalidGamma(gamma));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(MdpError::InvalidRmax(r_max));
        }
        let n_states = mean_rewards.rows();
        let n_actions = mean_rewards.cols();
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::EmptyModel);
        }
        let expected = n_states * n_actions * n_states;
        if transitions.len() != expected {
            return Err(MdpError::TransitionShape { got: transitions.len(), expected });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transitions[(s * n_actions + a) * n_states..][..n_states];
                let mut sum = 0.0;
                for &p in row {
                    if p < -1e-12 {
                        return Err(MdpError::NegativeProbability { s, a, p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(MdpError::TransitionRowSum { s, a, sum });
                }
            }
        }
        let reach = mean_rewards.max_abs() + noise.bounded_half_width();
        if reach > r_max + 1e-9 {
            return Err(MdpError::RewardExceedsBound { reach, r_max });
        }
        let mut cdf = vec![0.0; expected];
        for row_start in (0..expected).step_by(n_states) {
            let mut acc = 0.0;
            for i in 0..n_states {
                acc += transitions[row_start + i].max(0.0);
                cdf[row_start + i] = acc;
            }
        }
        Ok(Self { n_states, n_actions, gamma, r_max, noise, transitions, mean_rewards, cdf })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn mean_rewards(&self) -> &Matrix {
        &self.mean_rewards
    }

    /// Upper bound `r_max / (1 - gamma)` on any policy value magnitude.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// Transition probability `p(s' | s, a)`.
    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    /// The transition tensor flattened to an `(S*A) x S` matrix, row `(s, a)`
    /// holding `p(. | s, a)`.
    pub fn transition_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n_states * self.n_actions, self.n_states, self.transitions.clone())
            .expect("transition table length is validated")
    }

    fn check_policy(&self, policy: &Policy) -> Result<(), MdpError> {
        if policy.len() != self.n_states {
            return Err(MdpError::PolicyLength { got: policy.len(), expected: self.n_states });
        }
        for (s, &a) in policy.0.iter().enumerate() {
            if a >= self.n_actions {
                return Err(MdpError::PolicyAction { state: s, action: a, n_actions: self.n_actions });
            }
        }
        Ok(())
    }

    /// Exact policy value `V^pi`, solving `(I - gamma * P_pi) V = r_pi`.
    pub fn exact_policy_v(&self, policy: &Policy) -> Result<Vec<f64>, MdpError> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut a_mat = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in 0..n {
            let act = policy.action(s);
            for next in 0..n {
                let p = self.transition(s, act, next);
                a_mat[(s, next)] = if s == next { 1.0 } else { 0.0 } - self.gamma * p;
            }
            b[s] = self.mean_rewards.get(s, act);
        }
        let lu = a_mat.lu();
        let v = lu.solve(&b).ok_or(MdpError::SingularSystem)?;
        Ok(v.iter().copied().collect())
    }

    /// Exact state-action values `Q^pi(s, a) = r(s, a) + gamma * E[V^pi(s')]`.
    pub fn exact_policy_q(&self, policy: &Policy) -> Result<Matrix, MdpError> {
        let v = self.exact_policy_v(policy)?;
        Ok(self.bellman_f(&v).expect("value length matches state count"))
    }

    /// One-step Bellman image `F(V)(s, a) = r(s, a) + gamma * sum_s' p(s'|s,a) V(s')`.
    pub fn bellman_f(&self, v: &[f64]) -> Result<Matrix, MdpError> {
        if v.len() != self.n_states {
            return Err(MdpError::ValueLength { got: v.len(), expected: self.n_states });
        }
        Ok(Matrix::from_fn(self.n_states, self.n_actions, |s, a| {
            let row = &self.transitions[(s * self.n_actions + a) * self.n_states..][..self.n_states];
            let exp: f64 = row.iter().zip(v).map(|(p, val)| p * val).sum();
            self.mean_rewards.get(s, a) + self.gamma * exp
        }))
    }

    /// Optimal Bellman operator `T*(V)(s) = max_a F(V)(s, a)`.
    pub fn bellman_optimal(&self, v: &[f64]) -> Result<Vec<f64>, MdpError> {
        let q = self.bellman_f(v)?;
        Ok((0..self.n_states).map(|s| row_max(q.row(s))).collect())
    }

    /// Greedy policy with respect to a state-action value matrix; ties break
    /// toward the lowest action index.
    pub fn greedy_policy(q: &Matrix) -> Policy {
        Policy(
            (0..q.rows())
                .map(|s| {
                    let row = q.row(s);
                    let mut best = 0usize;
                    for (a, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = a;
                        }
                    }
                    best
                })
                .collect(),
        )
    }

    /// Synchronous value iteration from `v0`, recording the condition number
    /// of every Bellman image `F(V^(t))` along the way (including the iterate
    /// at which the stopping rule fires). Stops when the sup-norm update falls
    /// below `tol` or after `max_iters` images.
    pub fn value_iteration(&self, v0: &[f64], tol: f64, max_iters: usize) -> Result<ViTrace, MdpError> {
        if v0.len() != self.n_states {
            return Err(MdpError::ValueLength { got: v0.len(), expected: self.n_states });
        }
        let mut v = v0.to_vec();
        let mut cond_numbers = Vec::new();
        let mut values = vec![v.clone()];
        let mut converged = false;
        for _ in 0..max_iters {
            let q = self.bellman_f(&v)?;
            cond_numbers.push(q.cond_number()?);
            let next: Vec<f64> = (0..self.n_states).map(|s| row_max(q.row(s))).collect();
            let delta = v
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            values.push(v.clone());
            if delta < tol {
                converged = true;
                break;
            }
        }
        Ok(ViTrace { values, cond_numbers, converged })
    }

    /// Exact optimal values and an optimal policy, via policy iteration with
    /// exact evaluation (finite convergence; ties break to the lowest index).
    pub fn exact_optimal(&self) -> Result<(Vec<f64>, Policy), MdpError> {
        let mut policy = Policy(vec![0; self.n_states]);
        for _ in 0..self.n_states * self.n_actions + 1 {
            let v = self.exact_policy_v(&policy)?;
            let q = self.bellman_f(&v)?;
            let improved = Self::greedy_policy(&q);
            // Keep the incumbent action when it remains among the argmaxes, so
            // stabilisation is detected instead of oscillating between ties.
            let mut next = improved;
            for s in 0..self.n_states {
                let cur = policy.action(s);
                if q.get(s, cur) >= q.get(s, next.action(s)) - 1e-12 {
                    next.0[s] = cur;
                }
            }
            if next == policy {
                return Ok((v, policy));
            }
            policy = next;
        }
        let v = self.exact_policy_v(&policy)?;
        Ok((v, policy))
    }

    /// Smallest horizon guaranteeing `||Q^pi - Q^pi_tau||_inf <= eps`:
    /// `ceil((1/(1-gamma)) * ln(r_max / ((1-gamma) * eps)))`, floored at zero.
    pub fn truncation_horizon(gamma: f64, r_max: f64, eps: f64) -> usize {
        let arg = r_max / ((1.0 - gamma) * eps);
        if arg <= 1.0 {
            return 0;
        }
        ((1.0 / (1.0 - gamma)) * arg.ln()).ceil() as usize
    }

    /// Exact truncated value matrix `Q^pi_tau(s, a) = E[sum_{t=0}^tau gamma^t r_t]`,
    /// computed by the finite-horizon recursion (no sampling).
    pub fn truncated_q_exact(&self, policy: &Policy, tau: usize) -> Result<Matrix, MdpError> {
        self.check_policy(policy)?;
        let mut q = self.mean_rewards.clone();
        for _ in 0..tau {
            let v: Vec<f64> = (0..self.n_states).map(|s| q.get(s, policy.action(s))).collect();
            q = self.bellman_f(&v)?;
        }
        Ok(q)
    }

    /// Samples a successor state from `p(. | s, a)`.
    pub fn sample_next_state(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.cdf[(s * self.n_actions + a) * self.n_states..][..self.n_states];
        let total = row[self.n_states - 1];
        let u: f64 = rng.gen::<f64>() * total;
        row.partition_point(|&c| c <= u).min(self.n_states - 1)
    }

    /// Samples a reward observation at `(s, a)` under the configured noise.
    pub fn sample_reward(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mean = self.mean_rewards.get(s, a);
        match self.noise {
            RewardNoise::None => mean,
            RewardNoise::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sigma * z
            }
            RewardNoise::BoundedUniform { width } => {
                let r = mean + rng.gen_range(-width / 2.0..=width / 2.0);
                debug_assert!(r.abs() <= self.r_max + 1e-9);
                r
            }
        }
    }

    /// Discounted return of one trajectory of `tau + 1` reward observations,
    /// starting at `(s, a)` and then following `policy`.
    pub fn rollout_return(
        &self,
        policy: &Policy,
        s: usize,
        a: usize,
        tau: usize,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let mut state = s;
        let mut action = a;
        let mut total = 0.0;
        let mut discount = 1.0;
        for t in 0..=tau {
            total += discount * self.sample_reward(state, action, rng);
            if t < tau {
                state = self.sample_next_state(state, action, rng);
                action = policy.action(state);
                discount *= self.gamma;
            }
        }
        total
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Trace of a value-iteration run: all iterates, and the condition number of
/// each Bellman image `F(V^(t))` in visit order.
#[derive(Debug, Clone)]
pub struct ViTrace {
    pub values: Vec<Vec<f64>>,
    pub cond_numbers: Vec<f64>,
    pub converged: bool,
}

impl ViTrace {
    /// Largest recorded condition number and the iteration index attaining it.
    pub fn max_cond(&self) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &c) in self.cond_numbers.iter().enumerate() {
            if c > best.0 {
                best = (c, i);
            }
        }
        best
    }
}

/// The two-state, two-action reference MDP used by the golden diagnostics:
/// `gamma = 0.87`, mean rewards `[[-0.46, -0.48], [-0.14, 0.28]]`, and the
/// transition rows listed in [`toy_mdp`]'s source. Rewards are noiseless.
pub fn toy_mdp() -> TabularMdp {
    let rewards = Matrix::from_vec(2, 2, vec![-0.46, -0.48, -0.14, 0.28]).unwrap();
    let transitions = vec![
        // s = 0: a = 0 then a = 1
        0.40, 0.60, 0.25, 0.75, //
        // s = 1: a = 0 then a = 1
        0.15, 0.85, 0.29, 0.71,
    ];
    TabularMdp::new(0.87, 0.48, RewardNoise::None, transitions, rewards)
        .expect("reference instance is valid")
}

/// Parameters for [`generate_lowrank_mdp`].
///
/// Transitions are a rank-`rank` mixture `p(.|s,a) = sum_k w_k(s,a) q_k(.)`
/// with Dirichlet mixture weights and Dirichlet base distributions; mean
/// rewards are a product of two Gaussian factors rescaled so the largest
/// magnitude equals `r_max` (minus the bounded-noise half-width when the
/// noise model is bounded, so observations stay within `[-r_max, r_max]`).
/// `zeta > 0` blends in a full-rank perturbation of both tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub rank: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub noise: RewardNoise,
    /// Dirichlet concentration for the per-(s, a) mixture weights.
    #[serde(default = "default_alpha")]
    pub weight_alpha: f64,
    /// Dirichlet concentration for the base next-state distributions.
    #[serde(default = "default_alpha")]
    pub base_alpha: f64,
    /// Full-rank perturbation level in `[0, 1)`; zero keeps exact rank bounds.
    #[serde(default)]
    pub zeta: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

/// Draws a random low-rank MDP according to `spec`, deterministically in
/// `seed`. The flattened `(S*A) x S` transition matrix and the mean reward
/// matrix both have rank at most `spec.rank` when `zeta = 0`.
pub fn generate_lowrank_mdp(spec: &GeneratorSpec, seed: u64) -> Result<TabularMdp, MdpError> {
    let (s_n, a_n, d) = (spec.n_states, spec.n_actions, spec.rank);
    if s_n == 0 || a_n == 0 {
        return Err(MdpError::EmptyModel);
    }
    if d == 0 || d > s_n.min(a_n) {
        return Err(MdpError::GeneratorRank { rank: d, max: s_n.min(a_n) });
    }
    if !(spec.zeta >= 0.0 && spec.zeta < 1.0) {
        return Err(MdpError::InvalidGamma(spec.zeta));
    }
    let mut rng = crate::seeding::child_rng(seed, &[0x6d64_7067, d as u64]);

    let bases: Vec<Vec<f64>> = (0..d).map(|_| dirichlet(spec.base_alpha, s_n, &mut rng)).collect();
    let mut transitions = vec![0.0; s_n * a_n * s_n];
    for s in 0..s_n {
        for a in 0..a_n {
            let w = dirichlet(spec.weight_alpha, d, &mut rng);
            let row = &mut transitions[(s * a_n + a) * s_n..][..s_n];
            for (k, base) in bases.iter().enumerate() {
                for (slot, &b) in row.iter_mut().zip(base) {
                    *slot += w[k] * b;
                }
            }
            if spec.zeta > 0.0 {
                let perturb = dirichlet(1.0, s_n, &mut rng);
                for (slot, &p) in row.iter_mut().zip(&perturb) {
                    *slot = (1.0 - spec.zeta) * *slot + spec.zeta * p;
                }
            }
        }
    }

    let gs: Vec<f64> = (0..s_n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ga: Vec<f64> = (0..a_n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rewards = Matrix::from_fn(s_n, a_n, |s, a| {
        (0..d).map(|k| gs[s * d + k] * ga[a * d + k]).sum()
    });
    if spec.zeta > 0.0 {
        let noise_mat = Matrix::from_fn(s_n, a_n, |_, _| StandardNormal.sample(&mut rng));
        let scale = rewards.max_abs().max(1e-300) / noise_mat.max_abs().max(1e-300);
        rewards = Matrix::from_fn(s_n, a_n, |s, a| {
            (1.0 - spec.zeta) * rewards.get(s, a) + spec.zeta * scale * noise_mat.get(s, a)
        });
    }
    let target = spec.r_max - spec.noise.bounded_half_width();
    if target <= 0.0 {
        return Err(MdpError::RewardExceedsBound {
            reach: spec.noise.bounded_half_width(),
            r_max: spec.r_max,
        });
    }
    let max = rewards.max_abs();
    if max == 0.0 {
        return Err(MdpError::InvalidRmax(0.0));
    }
    let rewards = Matrix::from_fn(s_n, a_n, |s, a| rewards.get(s, a) * target / max);

    TabularMdp::new(spec.gamma, spec.r_max, spec.noise, transitions, rewards)
}
