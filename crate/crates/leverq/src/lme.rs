//! Leveraged matrix estimation: recover a low-rank matrix from a budget of
//! noisy entry observations.
//!
//! The estimator runs in two phases. Phase 1 spends half the budget on
//! uniformly started observations to build a coarse matrix estimate, reads off
//! an estimated rank from a singular-value threshold, and converts the leading
//! singular subspaces into leverage-score estimates for rows and columns.
//! Phase 2 samples anchor rows and columns according to those scores, spends
//! the remaining budget on the anchored cross of the matrix, and completes the
//! remaining entries with a diagonally weighted CUR formula whose
//! pseudo-inverse is capped at the estimated rank.
//!
//! Observations come through the [`EntryOracle`] trait, so the same pipeline
//! runs over Monte-Carlo rollouts of an MDP policy ([`MdpRolloutOracle`]), a
//! noisy matrix lookup ([`DirectMatrixOracle`]), or any custom source.

use crate::linalg::{LinalgError, Matrix, PinvOptions};
use crate::mdp::{Policy, RewardNoise, TabularMdp};
use crate::seeding::child_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from planning and running the estimator.
#[derive(Debug, Error)]
pub enum LmeError {
    #[error(
        "budget {got} cannot cover {what}; the smallest feasible budget at this \
         trajectory cost is {required}"
    )]
    BudgetTooSmall { got: u64, required: u64, what: String },
    #[error("anchor sampling produced an empty {axis} set in 16 attempts")]
    EmptyAnchors { axis: &'static str },
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A source of unbiased noisy observations of matrix entries.
///
/// `cost_per_sample` is the number of budget units one observation consumes
/// (trajectory length for rollout oracles, one for direct lookups).
/// `reward_scale` and `discount` feed the singular-value threshold: they bound
/// the magnitude of one reward observation and give the discounting under
/// which observations were generated (zero when there is none).
pub trait EntryOracle: Sync {
    fn dims(&self) -> (usize, usize);
    fn cost_per_sample(&self) -> u64;
    fn reward_scale(&self) -> f64;
    fn discount(&self) -> f64;
    fn sample(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> f64;

    /// Truncation horizon behind the per-sample cost; zero for one-shot
    /// oracles, `cost_per_sample - 1` for trajectory oracles.
    fn tau_hint(&self) -> usize {
        self.cost_per_sample().saturating_sub(1) as usize
    }

    /// Mean of `n` observations of entry `(s, a)`. Implementations may use a
    /// closed form when the sum of `n` draws has a known distribution.
    fn sample_mean(&self, s: usize, a: usize, n: u64, rng: &mut ChaCha8Rng) -> f64 {
        let mut total = 0.0;
        for _ in 0..n {
            total += self.sample(s, a, rng);
        }
        total / n as f64
    }
}

/// Observes discounted truncated returns of a fixed policy: one sample at
/// `(s, a)` is the return of a fresh `tau + 1`-step trajectory starting there.
pub struct MdpRolloutOracle<'a> {
    mdp: &'a TabularMdp,
    policy: &'a Policy,
    tau: usize,
}

impl<'a> MdpRolloutOracle<'a> {
    pub fn new(mdp: &'a TabularMdp, policy: &'a Policy, tau: usize) -> Self {
        Self { mdp, policy, tau }
    }

    /// Chooses the truncation horizon for a budget of `t` transitions:
    /// `tau = ceil((1/(1-gamma)) * ln(t / (1-gamma)))`, so the truncation bias
    /// stays below `r_max / t`.
    pub fn for_budget(mdp: &'a TabularMdp, policy: &'a Policy, t: u64) -> Self {
        let gamma = mdp.gamma();
        let arg = t as f64 / (1.0 - gamma);
        let tau = if arg <= 1.0 { 0 } else { ((1.0 / (1.0 - gamma)) * arg.ln()).ceil() as usize };
        Self { mdp, policy, tau }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }
}

impl EntryOracle for MdpRolloutOracle<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.mdp.n_states(), self.mdp.n_actions())
    }

    fn cost_per_sample(&self) -> u64 {
        self.tau as u64 + 1
    }

    fn reward_scale(&self) -> f64 {
        self.mdp.r_max()
    }

    fn discount(&self) -> f64 {
        self.mdp.gamma()
    }

    fn sample(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.mdp.rollout_return(self.policy, s, a, self.tau, rng)
    }
}

/// Observes entries of a fixed matrix under additive noise; one observation
/// costs one budget unit.
pub struct DirectMatrixOracle {
    matrix: Matrix,
    noise: RewardNoise,
    scale: f64,
}

impl DirectMatrixOracle {
    /// `scale` bounds observation magnitudes and calibrates the
    /// rank-estimation threshold; it defaults to `max|M|` when not given.
    pub fn new(matrix: Matrix, noise: RewardNoise, scale: Option<f64>) -> Self {
        let default = matrix.max_abs().max(f64::MIN_POSITIVE);
        Self { matrix, noise, scale: scale.unwrap_or(default) }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

impl EntryOracle for DirectMatrixOracle {
    fn dims(&self) -> (usize, usize) {
        (self.matrix.rows(), self.matrix.cols())
    }

    fn cost_per_sample(&self) -> u64 {
        1
    }

    fn reward_scale(&self) -> f64 {
        self.scale
    }

    fn discount(&self) -> f64 {
        0.0
    }

    fn sample(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mean = self.matrix.get(s, a);
        match self.noise {
            RewardNoise::None => mean,
            RewardNoise::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sigma * z
            }
            RewardNoise::BoundedUniform { width } => mean + rng.gen_range(-width / 2.0..=width / 2.0),
        }
    }

    fn sample_mean(&self, s: usize, a: usize, n: u64, rng: &mut ChaCha8Rng) -> f64 {
        let mean = self.matrix.get(s, a);
        match self.noise {
            // The sum of n independent draws has a closed form for these
            // models, which keeps very large budgets cheap.
            RewardNoise::None => mean,
            RewardNoise::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sigma / (n as f64).sqrt() * z
            }
            RewardNoise::BoundedUniform { .. } => {
                let mut total = 0.0;
                for _ in 0..n {
                    total += self.sample(s, a, rng);
                }
                total / n as f64
            }
        }
    }
}

/// How anchor rows and columns are drawn from the estimated leverage scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Independently include index `i` with probability `min(1, K * score_i)`.
    Bernoulli,
    /// Draw exactly `K` distinct indices, proportionally to the scores.
    FixedK,
}

/// Tunable knobs of the estimator. Defaults follow the analysis; `beta_scale`
/// rescales the rank-estimation threshold (the constant-free formula is far
/// too conservative at small problem sizes), and `rank_override` skips rank
/// estimation entirely when the target rank is known.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmeConfig {
    pub beta_scale: f64,
    pub anchor_mode: AnchorMode,
    /// Fixed rank to use instead of the thresholded estimate.
    pub rank_override: Option<usize>,
    /// Fixed anchor-count target instead of the `64 * d * ln(64 d / delta)` rule.
    pub k_override: Option<usize>,
    /// Relative singular-value cutoff of the CUR pseudo-inverse.
    pub pinv_rtol: f64,
}

impl Default for LmeConfig {
    fn default() -> Self {
        Self {
            beta_scale: 1.0,
            anchor_mode: AnchorMode::Bernoulli,
            rank_override: None,
            k_override: None,
            pinv_rtol: 1e-10,
        }
    }
}

/// Budget layout for one estimator run over an oracle with a fixed
/// per-observation cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Total budget `T`, in oracle cost units.
    pub budget: u64,
    pub delta: f64,
    /// Cost of one observation (`tau + 1` for rollout oracles).
    pub cost_per_sample: u64,
    /// Truncation horizon behind `cost_per_sample` (zero for direct oracles).
    pub tau: usize,
    /// Truncation bias matched by the horizon rule: `reward_scale / T`.
    pub eps_trunc: f64,
    /// Number of uniformly started phase-1 observations, `floor(T / (2 cost))`.
    pub n_phase1: u64,
    /// Singular-value threshold before the configured `beta_scale`.
    pub beta: f64,
}

/// Anchor-count and per-entry sample counts for a given estimated rank.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnchorBudget {
    /// Anchor-count target `K`.
    pub k: usize,
    /// Whether the `64 d ln(64 d / delta)` rule exceeded `min(S, A)` and was clamped.
    pub clamped: bool,
    /// Samples per entry of the anchor intersection.
    pub n1: u64,
    /// Samples per entry of the rest of the anchored cross.
    pub n2: u64,
}

impl SamplingPlan {
    /// Lays out the budget for an oracle of the given dims and cost. Fails
    /// when phase 1 cannot start at least one observation per entry.
    pub fn build(
        dims: (usize, usize),
        budget: u64,
        delta: f64,
        reward_scale: f64,
        discount: f64,
        cost_per_sample: u64,
        tau: usize,
    ) -> Result<Self, LmeError> {
        let plan = Self::build_phase2_only(dims, budget, delta, reward_scale, discount, cost_per_sample, tau)?;
        let cells = (plan.n_rows * plan.n_cols) as u64;
        if plan.n_phase1 < cells {
            return Err(LmeError::BudgetTooSmall {
                got: budget,
                required: 2 * cost_per_sample * cells,
                what: format!("one phase-1 observation per entry ({cells} entries)"),
            });
        }
        Ok(plan)
    }

    /// Plan layout for estimators that never run phase 1 (the budget check
    /// for uniform entry coverage is skipped; `n_phase1` is still recorded).
    pub fn build_phase2_only(
        (n_rows, n_cols): (usize, usize),
        budget: u64,
        delta: f64,
        reward_scale: f64,
        discount: f64,
        cost_per_sample: u64,
        tau: usize,
    ) -> Result<Self, LmeError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(LmeError::InvalidDelta(delta));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(LmeError::BadConfig("matrix dimensions must be positive".into()));
        }
        if cost_per_sample == 0 {
            return Err(LmeError::BadConfig("per-sample cost must be positive".into()));
        }
        let n_phase1 = budget / (2 * cost_per_sample);
        let t = budget as f64;
        let s = n_rows as f64;
        let a = n_cols as f64;
        let log_term = ((s + a) * t / ((1.0 - discount) * delta)).ln();
        let beta = (reward_scale.powi(2) * s * a * (s + a) / ((1.0 - discount).powi(3) * t)
            * log_term.powi(4))
        .sqrt()
            + reward_scale * (s * a).sqrt() / t;
        Ok(Self {
            n_rows,
            n_cols,
            budget,
            delta,
            cost_per_sample,
            tau,
            eps_trunc: reward_scale / t,
            n_phase1,
            beta,
        })
    }

    /// Anchor-count rule `K = ceil(64 d ln(64 d / delta))`, clamped to
    /// `min(S, A)`. The boolean reports whether clamping happened.
    pub fn anchor_count(&self, d_hat: usize, k_override: Option<usize>) -> Result<(usize, bool), LmeError> {
        let max_k = self.n_rows.min(self.n_cols);
        match k_override {
            Some(k) if k == 0 || k > max_k => Err(LmeError::BadConfig(format!(
                "anchor-count override {k} is outside 1..={max_k}"
            ))),
            Some(k) => Ok((k, false)),
            None => {
                let d = d_hat.max(1) as f64;
                let raw = (64.0 * d * (64.0 * d / self.delta).ln()).ceil() as usize;
                Ok((raw.min(max_k), raw > max_k))
            }
        }
    }

    /// Anchor count plus the per-entry phase-2 sample counts for that count.
    pub fn anchor_budget(&self, d_hat: usize, k_override: Option<usize>) -> Result<AnchorBudget, LmeError> {
        let (k, clamped) = self.anchor_count(d_hat, k_override)?;
        let (n1, n2) = self.cross_budget(k, k)?;
        Ok(AnchorBudget { k, clamped, n1, n2 })
    }

    /// Per-entry sample counts for an anchored cross with `rows` anchor rows
    /// and `cols` anchor columns: a quarter of the budget spread over the
    /// intersection, a quarter over the rest of the cross, remainders unspent.
    /// The rest-of-cross count never exceeds the intersection count.
    pub fn cross_budget(&self, rows: usize, cols: usize) -> Result<(u64, u64), LmeError> {
        self.cross_budget_from(self.budget / 2, rows, cols)
    }

    /// Like [`cross_budget`](Self::cross_budget) but spreading an explicit
    /// budget `pool` over the cross instead of the plan's phase-2 half. Used
    /// by estimators that skip phase 1 and give the cross the whole budget.
    pub fn cross_budget_from(&self, pool: u64, rows: usize, cols: usize) -> Result<(u64, u64), LmeError> {
        let c = self.cost_per_sample;
        let n_square = (rows * cols) as u64;
        let n_plus = (rows * (self.n_cols - cols) + (self.n_rows - rows) * cols) as u64;
        let n1 = pool / (2 * c * n_square);
        if n1 == 0 {
            return Err(LmeError::BudgetTooSmall {
                got: pool,
                required: 2 * c * n_square,
                what: format!("one observation per anchor-intersection entry ({n_square} entries)"),
            });
        }
        let n2 = if n_plus == 0 {
            0
        } else {
            let raw = pool / (2 * c * n_plus);
            if raw == 0 {
                return Err(LmeError::BudgetTooSmall {
                    got: pool,
                    required: 2 * c * n_plus,
                    what: format!("one observation per anchored-cross entry ({n_plus} entries)"),
                });
            }
            raw.min(n1)
        };
        Ok((n1, n2))
    }
}

/// Everything phase 1 learned: the coarse estimate, its spectrum, the rank
/// decision, and the leverage-score estimates.
#[derive(Debug, Clone)]
pub struct Phase1Output {
    /// Importance-weighted uniform-start estimate of the matrix.
    pub q_tilde: Matrix,
    pub singular_values: Vec<f64>,
    /// Threshold actually compared against (plan beta times `beta_scale`).
    pub beta_used: f64,
    /// Count of singular values at or above the threshold.
    pub d_hat_raw: usize,
    /// Working rank: the raw count, floored at one, or the configured override.
    pub d_hat: usize,
    /// True when the raw count was zero and the floor kicked in.
    pub rank_fallback: bool,
    /// Estimated row leverage scores (sum to one).
    pub leverage_rows: Vec<f64>,
    /// Estimated column leverage scores (sum to one).
    pub leverage_cols: Vec<f64>,
    /// Phase-1 observation counts per entry.
    pub counts: Vec<u64>,
}

/// Splits `n` uniform draws over `cells` equally likely cells, returning
/// per-cell counts (multinomial with uniform probabilities).
pub fn uniform_multinomial(n: u64, cells: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut counts = vec![0u64; cells];
    let mut remaining = n;
    for i in 0..cells {
        let left = (cells - i) as f64;
        if remaining == 0 {
            break;
        }
        if i == cells - 1 {
            counts[i] = remaining;
            break;
        }
        let draw = Binomial::new(remaining, 1.0 / left)
            .expect("probability in range")
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
    }
    counts
}

/// Phase 1: spend `plan.n_phase1` uniformly started observations, form the
/// importance-weighted estimate, threshold its spectrum, and estimate
/// leverage scores.
pub fn phase1_estimate<O: EntryOracle>(
    oracle: &O,
    plan: &SamplingPlan,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Phase1Output, LmeError> {
    let (s_n, a_n) = (plan.n_rows, plan.n_cols);
    let cells = s_n * a_n;
    let mut alloc_rng = child_rng(root_seed, &[1, 0]);
    let counts = uniform_multinomial(plan.n_phase1, cells, &mut alloc_rng);

    let sums: Vec<f64> = counts
        .par_iter()
        .enumerate()
        .map(|(idx, &c)| {
            if c == 0 {
                return 0.0;
            }
            let (s, a) = (idx / a_n, idx % a_n);
            let mut rng = child_rng(root_seed, &[2, s as u64, a as u64]);
            oracle.sample_mean(s, a, c, &mut rng) * c as f64
        })
        .collect();

    let scale = cells as f64 / plan.n_phase1 as f64;
    let q_tilde = Matrix::from_vec(s_n, a_n, sums.iter().map(|v| v * scale).collect())
        .expect("plan dims match data");

    let svd = q_tilde.svd()?;
    let beta_used = plan.beta * config.beta_scale;
    let d_hat_raw = svd.singular_values.iter().filter(|&&v| v >= beta_used).count();
    let (d_hat, rank_fallback) = match config.rank_override {
        Some(d) if d == 0 || d > s_n.min(a_n) => {
            return Err(LmeError::BadConfig(format!(
                "rank override {d} is outside 1..={}",
                s_n.min(a_n)
            )))
        }
        Some(d) => (d, false),
        None => rank_from_threshold(&svd.singular_values, beta_used),
    };

    let leverage_rows = floored_scores(&svd.u, d_hat, false);
    let leverage_cols = floored_scores(&svd.vt, d_hat, true);

    Ok(Phase1Output {
        q_tilde,
        singular_values: svd.singular_values,
        beta_used,
        d_hat_raw,
        d_hat,
        rank_fallback,
        leverage_rows,
        leverage_cols,
        counts,
    })
}

/// Threshold rule for the estimated rank: the number of singular values at
/// or above `beta`, falling back to one (flagged `true`) when none clears
/// the threshold.
pub fn rank_from_threshold(singular_values: &[f64], beta: f64) -> (usize, bool) {
    let raw = singular_values.iter().filter(|&&v| v >= beta).count();
    if raw == 0 {
        (1, true)
    } else {
        (raw, false)
    }
}

/// Leverage estimates from a singular block: squared row norms of the leading
/// `d` vectors, floored at `d / n`, then normalised to sum to one. Pass the
/// left block as-is and the right block (`vt`) with `transposed = true`.
pub fn floored_scores(block: &Matrix, d: usize, transposed: bool) -> Vec<f64> {
    let n = if transposed { block.cols() } else { block.rows() };
    let floor = d as f64 / n as f64;
    let mut scores: Vec<f64> = (0..n)
        .map(|i| {
            let energy: f64 = (0..d)
                .map(|j| if transposed { block.get(j, i) } else { block.get(i, j) }.powi(2))
                .sum();
            energy.max(floor)
        })
        .collect();
    let total: f64 = scores.iter().sum();
    for s in &mut scores {
        *s /= total;
    }
    scores
}

/// Anchor index set with its importance-correction weights.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    /// Sorted selected indices.
    pub indices: Vec<usize>,
    /// One weight per selected index: `1 / min(1, sqrt(K * score))`.
    pub weights: Vec<f64>,
}

/// Draws anchors from normalised `scores` with target count `k`.
pub fn sample_anchors(
    scores: &[f64],
    k: usize,
    mode: AnchorMode,
    axis: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<AnchorSet, LmeError> {
    let kf = k as f64;
    let weight = |score: f64| 1.0 / (kf * score).sqrt().min(1.0);
    match mode {
        AnchorMode::Bernoulli => {
            for _ in 0..16 {
                let indices: Vec<usize> = (0..scores.len())
                    .filter(|&i| rng.gen::<f64>() < (kf * scores[i]).min(1.0))
                    .collect();
                if !indices.is_empty() {
                    let weights = indices.iter().map(|&i| weight(scores[i])).collect();
                    return Ok(AnchorSet { indices, weights });
                }
            }
            Err(LmeError::EmptyAnchors { axis })
        }
        AnchorMode::FixedK => {
            let mut available: Vec<usize> = (0..scores.len()).collect();
            let mut indices = Vec::with_capacity(k);
            for _ in 0..k.min(scores.len()) {
                let total: f64 = available.iter().map(|&i| scores[i]).sum();
                let chosen_pos = if total <= 0.0 {
                    rng.gen_range(0..available.len())
                } else {
                    let mut u = rng.gen::<f64>() * total;
                    let mut pos = available.len() - 1;
                    for (p, &i) in available.iter().enumerate() {
                        u -= scores[i];
                        if u <= 0.0 {
                            pos = p;
                            break;
                        }
                    }
                    pos
                };
                indices.push(available.swap_remove(chosen_pos));
            }
            indices.sort_unstable();
            let weights = indices.iter().map(|&i| weight(scores[i])).collect();
            Ok(AnchorSet { indices, weights })
        }
    }
}

/// Per-entry estimates gathered over the anchored cross in phase 2.
#[derive(Debug, Clone)]
pub struct CrossSamples {
    /// Estimated entries; only positions on the cross are meaningful.
    pub estimates: Matrix,
    /// Budget units consumed.
    pub consumed: u64,
}

/// Phase 2a: samples every entry of the anchored cross, `n1` observations per
/// intersection entry and `n2` per remaining cross entry.
pub fn sample_cross<O: EntryOracle>(
    oracle: &O,
    rows: &AnchorSet,
    cols: &AnchorSet,
    n1: u64,
    n2: u64,
    root_seed: u64,
) -> CrossSamples {
    let (s_n, a_n) = oracle.dims();
    let cost = oracle.cost_per_sample();
    let in_rows: Vec<bool> = member_mask(s_n, &rows.indices);
    let in_cols: Vec<bool> = member_mask(a_n, &cols.indices);
    let jobs: Vec<(usize, usize, u64)> = (0..s_n * a_n)
        .filter_map(|idx| {
            let (s, a) = (idx / a_n, idx % a_n);
            match (in_rows[s], in_cols[a]) {
                (true, true) => Some((s, a, n1)),
                (true, false) | (false, true) => (n2 > 0).then_some((s, a, n2)),
                (false, false) => None,
            }
        })
        .collect();
    let results: Vec<(usize, usize, f64, u64)> = jobs
        .par_iter()
        .map(|&(s, a, n)| {
            let mut rng = child_rng(root_seed, &[4, s as u64, a as u64]);
            (s, a, oracle.sample_mean(s, a, n, &mut rng), n)
        })
        .collect();
    let mut estimates = Matrix::zeros(s_n, a_n);
    let mut consumed = 0u64;
    for (s, a, mean, n) in results {
        estimates.set(s, a, mean);
        consumed += n * cost;
    }
    CrossSamples { estimates, consumed }
}

fn member_mask(n: usize, indices: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in indices {
        mask[i] = true;
    }
    mask
}

/// Phase 2b: weighted CUR completion. Entries on the anchored cross keep
/// their direct estimates; every other entry is
/// `Q(s, J) R (L Q(I, J) R)^+ L Q(I, a)` with the pseudo-inverse capped at
/// `d_hat`. Returns the completed matrix and whether the anchor intersection
/// looked rank-deficient relative to `d_hat`.
pub fn cur_complete(
    cross: &Matrix,
    rows: &AnchorSet,
    cols: &AnchorSet,
    d_hat: usize,
    pinv_rtol: f64,
) -> Result<(Matrix, bool), LinalgError> {
    let skeleton = cross.select(&rows.indices, &cols.indices);
    let weighted = skeleton.scale_rows(&rows.weights).scale_cols(&cols.weights);
    let rank_deficient = weighted.numeric_rank(None)? < d_hat.min(rows.indices.len()).min(cols.indices.len());
    let mid = weighted.pseudo_inverse(&PinvOptions { rtol: pinv_rtol, rank_cap: Some(d_hat) })?;

    // Left factor: Q(:, J) R (S x |J|); right factor: L Q(I, :) (|I| x A).
    let all_rows: Vec<usize> = (0..cross.rows()).collect();
    let all_cols: Vec<usize> = (0..cross.cols()).collect();
    let left = cross.select(&all_rows, &cols.indices).scale_cols(&cols.weights);
    let right = cross.select(&rows.indices, &all_cols).scale_rows(&rows.weights);
    let completed = left.matmul(&mid)?.matmul(&right)?;

    let mut out = completed;
    for &s in &rows.indices {
        for a in 0..cross.cols() {
            out.set(s, a, cross.get(s, a));
        }
    }
    for &a in &cols.indices {
        for s in 0..cross.rows() {
            out.set(s, a, cross.get(s, a));
        }
    }
    Ok((out, rank_deficient))
}

/// Full record of one estimator run, serialisable for experiment output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmeReport {
    pub n_rows: usize,
    pub n_cols: usize,
    pub budget: u64,
    pub delta: f64,
    pub tau: usize,
    pub cost_per_sample: u64,
    pub n_phase1: u64,
    pub beta: f64,
    pub beta_scale: f64,
    pub d_hat_raw: usize,
    pub d_hat: usize,
    pub rank_fallback: bool,
    pub k_target: usize,
    pub k_clamped: bool,
    pub anchor_rows: Vec<usize>,
    pub anchor_cols: Vec<usize>,
    pub n1: u64,
    pub n2: u64,
    pub budget_consumed: u64,
    pub warnings: Vec<String>,
}

/// Result of [`lme`]: the estimate and the run record.
#[derive(Debug, Clone)]
pub struct LmeOutput {
    pub q_hat: Matrix,
    pub report: LmeReport,
}

/// Runs the full two-phase estimator over `oracle` with a budget of `budget`
/// cost units and failure probability parameter `delta`, deterministically in
/// `root_seed`.
pub fn lme<O: EntryOracle>(
    oracle: &O,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<LmeOutput, LmeError> {
    let plan = SamplingPlan::build(
        oracle.dims(),
        budget,
        delta,
        oracle.reward_scale(),
        oracle.discount(),
        oracle.cost_per_sample(),
        oracle.tau_hint(),
    )?;
    let mut warnings = Vec::new();

    let phase1 = phase1_estimate(oracle, &plan, config, root_seed)?;
    if phase1.rank_fallback {
        warnings.push("no singular value cleared the threshold; using rank 1".to_string());
    }

    let anchor_budget = plan.anchor_budget(phase1.d_hat, config.k_override)?;
    if anchor_budget.clamped {
        warnings.push(format!(
            "anchor-count rule exceeded min(S, A); clamped to {}",
            anchor_budget.k
        ));
    }

    let mut anchor_rng = child_rng(root_seed, &[3]);
    let rows = sample_anchors(
        &phase1.leverage_rows,
        anchor_budget.k,
        config.anchor_mode,
        "row",
        &mut anchor_rng,
    )?;
    let cols = sample_anchors(
        &phase1.leverage_cols,
        anchor_budget.k,
        config.anchor_mode,
        "column",
        &mut anchor_rng,
    )?;

    // Per-entry counts are re-derived from the realised anchor sets so that
    // consumption stays within the budget even when Bernoulli draws return
    // more than K anchors.
    let (n1, n2) = plan.cross_budget(rows.indices.len(), cols.indices.len())?;
    let cross = sample_cross(oracle, &rows, &cols, n1, n2, root_seed);
    let (q_hat, rank_deficient) =
        cur_complete(&cross.estimates, &rows, &cols, phase1.d_hat, config.pinv_rtol)?;
    if rank_deficient {
        warnings.push(format!(
            "anchor intersection has numeric rank below the working rank {}",
            phase1.d_hat
        ));
    }

    let budget_consumed = plan.n_phase1 * plan.cost_per_sample + cross.consumed;
    debug_assert!(budget_consumed <= budget);

    Ok(LmeOutput {
        q_hat,
        report: LmeReport {
            n_rows: plan.n_rows,
            n_cols: plan.n_cols,
            budget,
            delta,
            tau: plan.tau,
            cost_per_sample: plan.cost_per_sample,
            n_phase1: plan.n_phase1,
            beta: plan.beta,
            beta_scale: config.beta_scale,
            d_hat_raw: phase1.d_hat_raw,
            d_hat: phase1.d_hat,
            rank_fallback: phase1.rank_fallback,
            k_target: anchor_budget.k,
            k_clamped: anchor_budget.clamped,
            anchor_rows: rows.indices,
            anchor_cols: cols.indices,
            n1,
            n2,
            budget_consumed,
            warnings,
        },
    })
}
