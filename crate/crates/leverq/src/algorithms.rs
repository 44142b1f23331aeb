//! Policy iteration and value iteration driven by estimated action-value
//! matrices.
//!
//! [`lora_pi`] runs approximate policy iteration: each epoch estimates the
//! action-value matrix of the current policy from rollouts — with the
//! leveraged estimator or one of the baseline evaluators — and improves
//! greedily. [`lora_vi`] is the value-iteration variant: each epoch estimates
//! the Bellman image `F(V)` from one-step samples and takes row maxima.
//! [`check_api_bound`] verifies the approximate-policy-iteration convergence
//! inequality and the greedy-improvement sandwich on a finished run.

use crate::linalg::{LinalgError, Matrix};
use crate::lme::{
    cur_complete, floored_scores, lme, sample_anchors, sample_cross, AnchorMode, AnchorSet,
    EntryOracle, LmeConfig, LmeError, LmeReport, MdpRolloutOracle, SamplingPlan,
};
use crate::mdp::{MdpError, Policy, TabularMdp};
use crate::seeding::{child_rng, child_seed};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from configuring or running the iteration algorithms.
#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("epoch {epoch} evaluation failed: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: LmeError,
    },
    #[error(transparent)]
    Lme(#[from] LmeError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Matrix estimators available to the iteration algorithms. The leveraged
/// estimator is the default; the others are baselines for comparisons, and
/// `Exact` short-circuits sampling with the ground-truth matrix (zero budget)
/// for reduction checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    LmeLeveraged,
    /// Anchors drawn uniformly without replacement, no phase 1, no weighting.
    CurUniformAnchors,
    /// Anchors drawn from exact leverage scores of the true matrix.
    CurOracleAnchors,
    /// Every entry sampled equally often.
    FullMatrixMc,
    /// Every entry sampled equally often, then truncated to the leading
    /// components.
    SvdDenoise,
    Exact,
}

/// How the total budget is split across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BudgetSchedule {
    /// Every epoch gets `floor(T / N_epochs)`.
    Uniform,
    /// Epoch `t` gets `base * ratio^t`, scaled down proportionally when the
    /// raw total exceeds the budget.
    Geometric { base: f64, ratio: f64 },
}

impl BudgetSchedule {
    /// Splits `total` budget units over `n` epochs; the split always sums to
    /// at most `total`.
    pub fn split(&self, total: u64, n: usize) -> Vec<u64> {
        match *self {
            BudgetSchedule::Uniform => vec![total / n as u64; n],
            BudgetSchedule::Geometric { base, ratio } => {
                let raw: Vec<f64> = (1..=n as i32).map(|t| base * ratio.powi(t)).collect();
                let raw_total: f64 = raw.iter().sum();
                let scale = if raw_total > total as f64 { total as f64 / raw_total } else { 1.0 };
                raw.iter().map(|&r| (r * scale).floor() as u64).collect()
            }
        }
    }
}

/// Inputs of one iteration run. The discount factor and reward bound come
/// from the MDP itself; everything else is configured here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// Total sampling budget `T`, in transition units.
    pub budget: u64,
    /// Target accuracy of the returned policy's value.
    pub eps: f64,
    /// Failure probability parameter.
    pub delta: f64,
    /// Starting policy (policy iteration); all-first-action when omitted.
    pub initial_policy: Option<Vec<usize>>,
    /// Starting values (value iteration); all-zero when omitted.
    pub initial_v: Option<Vec<f64>>,
    pub evaluator: EvaluatorKind,
    pub schedule: BudgetSchedule,
    /// Knobs passed through to the matrix estimator.
    pub estimator: LmeConfig,
    /// Hard cap on the epoch count (guards against tiny `eps`).
    pub max_epochs: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            budget: 1_000_000,
            eps: 0.1,
            delta: 0.1,
            initial_policy: None,
            initial_v: None,
            evaluator: EvaluatorKind::LmeLeveraged,
            schedule: BudgetSchedule::Uniform,
            estimator: LmeConfig::default(),
            max_epochs: 500,
        }
    }
}

impl LoraConfig {
    fn validate(&self, mdp: &TabularMdp) -> Result<(), AlgoError> {
        if !(self.eps > 0.0) {
            return Err(AlgoError::BadConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(AlgoError::BadConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.max_epochs == 0 {
            return Err(AlgoError::BadConfig("max_epochs must be positive".into()));
        }
        if let BudgetSchedule::Geometric { base, ratio } = self.schedule {
            if !(base > 0.0 && ratio > 0.0 && base.is_finite() && ratio.is_finite()) {
                return Err(AlgoError::BadConfig(format!(
                    "geometric schedule needs positive finite base and ratio, got base {base}, ratio {ratio}"
                )));
            }
        }
        if let Some(p) = &self.initial_policy {
            if p.len() != mdp.n_states() {
                return Err(AlgoError::BadConfig(format!(
                    "initial policy has {} entries for {} states",
                    p.len(),
                    mdp.n_states()
                )));
            }
            if let Some(&a) = p.iter().find(|&&a| a >= mdp.n_actions()) {
                return Err(AlgoError::BadConfig(format!(
                    "initial policy uses action {a}, but the MDP has {} actions",
                    mdp.n_actions()
                )));
            }
        }
        if let Some(v) = &self.initial_v {
            if v.len() != mdp.n_states() {
                return Err(AlgoError::BadConfig(format!(
                    "initial values have {} entries for {} states",
                    v.len(),
                    mdp.n_states()
                )));
            }
        }
        Ok(())
    }

    /// Epoch count `ceil((1/(1-gamma)) ln(4 r_max / ((1-gamma) eps)))`,
    /// floored at one and capped at `max_epochs`.
    pub fn n_epochs(&self, gamma: f64, r_max: f64) -> usize {
        let arg = 4.0 * r_max / ((1.0 - gamma) * self.eps);
        let raw = if arg <= 1.0 { 1.0 } else { (1.0 / (1.0 - gamma)) * arg.ln() };
        (raw.ceil() as usize).max(1).min(self.max_epochs)
    }
}

/// One observation of the Bellman image `F(V)`: a reward draw plus the
/// discounted value of a sampled next state. Costs one transition.
pub struct FOperatorOracle<'a> {
    mdp: &'a TabularMdp,
    v: Vec<f64>,
    amplitude: f64,
}

impl<'a> FOperatorOracle<'a> {
    pub fn new(mdp: &'a TabularMdp, v: &[f64]) -> Self {
        let v_inf = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        Self { mdp, v: v.to_vec(), amplitude: mdp.r_max() + mdp.gamma() * v_inf }
    }
}

impl EntryOracle for FOperatorOracle<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.mdp.n_states(), self.mdp.n_actions())
    }

    fn cost_per_sample(&self) -> u64 {
        1
    }

    fn reward_scale(&self) -> f64 {
        self.amplitude
    }

    fn discount(&self) -> f64 {
        0.0
    }

    fn sample(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> f64 {
        let r = self.mdp.sample_reward(s, a, rng);
        let next = self.mdp.sample_next_state(s, a, rng);
        r + self.mdp.gamma() * self.v[next]
    }
}

/// One matrix estimate together with its cost and (for the leveraged
/// estimator) the full run record.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub q_hat: Matrix,
    pub consumed: u64,
    pub report: Option<LmeReport>,
}

/// Runs the configured estimator over `oracle` with the given budget.
/// `truth` is the exact target matrix; it powers the `Exact` and
/// `CurOracleAnchors` evaluators and is ignored by the others.
pub fn estimate_matrix<O: EntryOracle>(
    oracle: &O,
    truth: Option<&Matrix>,
    kind: EvaluatorKind,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    match kind {
        EvaluatorKind::Exact => {
            let q = truth.ok_or_else(|| {
                LmeError::BadConfig("exact evaluation needs a ground-truth matrix".into())
            })?;
            Ok(Evaluation { q_hat: q.clone(), consumed: 0, report: None })
        }
        EvaluatorKind::LmeLeveraged => {
            let out = lme(oracle, budget, delta, config, root_seed)?;
            let consumed = out.report.budget_consumed;
            Ok(Evaluation { q_hat: out.q_hat, consumed, report: Some(out.report) })
        }
        EvaluatorKind::CurUniformAnchors => cur_uniform_anchors(oracle, budget, delta, config, root_seed),
        EvaluatorKind::CurOracleAnchors => {
            let q = truth.ok_or_else(|| {
                LmeError::BadConfig("oracle anchors need a ground-truth matrix".into())
            })?;
            cur_oracle_anchors(oracle, q, budget, delta, config, root_seed)
        }
        EvaluatorKind::FullMatrixMc => full_matrix_mc(oracle, budget, root_seed),
        EvaluatorKind::SvdDenoise => svd_denoise(oracle, budget, delta, config, root_seed),
    }
}

fn baseline_plan<O: EntryOracle>(oracle: &O, budget: u64, delta: f64) -> Result<SamplingPlan, LmeError> {
    SamplingPlan::build_phase2_only(
        oracle.dims(),
        budget,
        delta,
        oracle.reward_scale(),
        oracle.discount(),
        oracle.cost_per_sample(),
        oracle.tau_hint(),
    )
}

/// CUR completion with anchors drawn uniformly without replacement and no
/// importance weighting; the whole budget goes to the anchored cross.
pub fn cur_uniform_anchors<O: EntryOracle>(
    oracle: &O,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    let plan = baseline_plan(oracle, budget, delta)?;
    let d = config.rank_override.unwrap_or(1);
    let (k, _) = plan.anchor_count(d, config.k_override)?;
    let (s_n, a_n) = oracle.dims();
    let mut rng = child_rng(root_seed, &[3]);
    let uniform_rows = vec![1.0 / s_n as f64; s_n];
    let uniform_cols = vec![1.0 / a_n as f64; a_n];
    let mut rows = sample_anchors(&uniform_rows, k, AnchorMode::FixedK, "row", &mut rng)?;
    let mut cols = sample_anchors(&uniform_cols, k, AnchorMode::FixedK, "column", &mut rng)?;
    rows.weights = vec![1.0; rows.indices.len()];
    cols.weights = vec![1.0; cols.indices.len()];
    complete_from_cross(oracle, &plan, rows, cols, d, config.pinv_rtol, root_seed)
}

/// CUR completion with anchors drawn from the exact leverage scores of the
/// true matrix (floored and normalised the same way as estimated scores);
/// the whole budget goes to the anchored cross.
pub fn cur_oracle_anchors<O: EntryOracle>(
    oracle: &O,
    truth: &Matrix,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    let plan = baseline_plan(oracle, budget, delta)?;
    let d = match config.rank_override {
        Some(d) => d,
        None => truth.numeric_rank(None)?.max(1),
    };
    let svd = truth.svd()?;
    let row_scores = floored_scores(&svd.u, d, false);
    let col_scores = floored_scores(&svd.vt, d, true);
    let (k, _) = plan.anchor_count(d, config.k_override)?;
    let mut rng = child_rng(root_seed, &[3]);
    let rows = sample_anchors(&row_scores, k, config.anchor_mode, "row", &mut rng)?;
    let cols = sample_anchors(&col_scores, k, config.anchor_mode, "column", &mut rng)?;
    complete_from_cross(oracle, &plan, rows, cols, d, config.pinv_rtol, root_seed)
}

fn complete_from_cross<O: EntryOracle>(
    oracle: &O,
    plan: &SamplingPlan,
    rows: AnchorSet,
    cols: AnchorSet,
    d: usize,
    pinv_rtol: f64,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    let (n1, n2) = plan.cross_budget_from(plan.budget, rows.indices.len(), cols.indices.len())?;
    let cross = sample_cross(oracle, &rows, &cols, n1, n2, root_seed);
    let (q_hat, _) = cur_complete(&cross.estimates, &rows, &cols, d, pinv_rtol)?;
    Ok(Evaluation { q_hat, consumed: cross.consumed, report: None })
}

/// Samples every entry equally often with the whole budget.
pub fn full_matrix_mc<O: EntryOracle>(
    oracle: &O,
    budget: u64,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    let (s_n, a_n) = oracle.dims();
    let cells = (s_n * a_n) as u64;
    let cost = oracle.cost_per_sample();
    let n = budget / (cost * cells);
    if n == 0 {
        return Err(LmeError::BudgetTooSmall {
            got: budget,
            required: cost * cells,
            what: format!("one observation per entry ({cells} entries)"),
        });
    }
    let means: Vec<f64> = (0..(s_n * a_n))
        .into_par_iter()
        .map(|idx| {
            let (s, a) = (idx / a_n, idx % a_n);
            let mut rng = child_rng(root_seed, &[5, s as u64, a as u64]);
            oracle.sample_mean(s, a, n, &mut rng)
        })
        .collect();
    let q_hat = Matrix::from_vec(s_n, a_n, means).expect("dims match data");
    Ok(Evaluation { q_hat, consumed: n * cost * cells, report: None })
}

/// Samples every entry equally often, then keeps only the leading singular
/// components (the configured rank, or the threshold rule's count).
pub fn svd_denoise<O: EntryOracle>(
    oracle: &O,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Evaluation, LmeError> {
    let full = full_matrix_mc(oracle, budget, root_seed)?;
    let d = match config.rank_override {
        Some(d) => d,
        None => {
            let plan = baseline_plan(oracle, budget, delta)?;
            let beta = plan.beta * config.beta_scale;
            let svd = full.q_hat.svd()?;
            svd.singular_values.iter().filter(|&&v| v >= beta).count().max(1)
        }
    };
    let (s_n, a_n) = oracle.dims();
    let q_hat = full.q_hat.low_rank_approx(d.min(s_n.min(a_n)))?;
    Ok(Evaluation { q_hat, consumed: full.consumed, report: None })
}

/// Evaluates `policy`'s action-value matrix with the configured estimator,
/// spending at most `budget` transitions.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    policy: &Policy,
    kind: EvaluatorKind,
    budget: u64,
    delta: f64,
    config: &LmeConfig,
    root_seed: u64,
) -> Result<Evaluation, AlgoError> {
    let truth = mdp.exact_policy_q(policy)?;
    let oracle = MdpRolloutOracle::for_budget(mdp, policy, budget);
    Ok(estimate_matrix(&oracle, Some(&truth), kind, budget, delta, config, root_seed)?)
}

/// Per-epoch record of an iteration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// Epoch index, starting at one.
    pub epoch: usize,
    /// The policy this epoch acted on: the evaluated policy for policy
    /// iteration, the greedy policy of the epoch's estimate for value
    /// iteration.
    pub policy: Policy,
    /// Exact entrywise error of the epoch's matrix estimate.
    pub eval_error: f64,
    /// Exact value suboptimality of the logged policy.
    pub value_subopt: f64,
    /// Effective condition number of the exact target matrix of this epoch
    /// (largest singular value over the smallest one above the numeric-rank
    /// cutoff, so exactly low-rank targets report a finite value).
    pub cond_number: f64,
    pub budget_consumed: u64,
    pub report: Option<LmeReport>,
}

/// Finished policy-iteration run.
#[derive(Debug, Clone)]
pub struct PiRun {
    /// The final improved policy (one improvement past the last log entry).
    pub policy: Policy,
    pub n_epochs: usize,
    pub epoch_budgets: Vec<u64>,
    pub logs: Vec<EpochLog>,
    pub total_consumed: u64,
}

/// Approximate policy iteration: per epoch, estimate the current policy's
/// action-value matrix with the configured evaluator and improve greedily
/// (lowest index wins ties).
pub fn lora_pi(mdp: &TabularMdp, config: &LoraConfig, root_seed: u64) -> Result<PiRun, AlgoError> {
    config.validate(mdp)?;
    let n = config.n_epochs(mdp.gamma(), mdp.r_max());
    if config.budget < n as u64 && config.evaluator != EvaluatorKind::Exact {
        return Err(AlgoError::BadConfig(format!(
            "budget {} cannot cover {n} epochs",
            config.budget
        )));
    }
    let budgets = config.schedule.split(config.budget, n);
    let (v_star, _) = mdp.exact_optimal()?;

    let mut policy = match &config.initial_policy {
        Some(p) => Policy(p.clone()),
        None => Policy(vec![0; mdp.n_states()]),
    };
    let mut logs = Vec::with_capacity(n);
    let mut total_consumed = 0u64;
    for (t, &epoch_budget) in (1..=n).zip(&budgets) {
        let q_true = mdp.exact_policy_q(&policy)?;
        let v_policy = mdp.exact_policy_v(&policy)?;
        let oracle = MdpRolloutOracle::for_budget(mdp, &policy, epoch_budget);
        let eval = estimate_matrix(
            &oracle,
            Some(&q_true),
            config.evaluator,
            epoch_budget,
            config.delta,
            &config.estimator,
            child_seed(root_seed, &[10, t as u64]),
        )
        .map_err(|source| AlgoError::Epoch { epoch: t, source })?;
        total_consumed += eval.consumed;
        logs.push(EpochLog {
            epoch: t,
            policy: policy.clone(),
            eval_error: eval.q_hat.sub(&q_true)?.max_abs(),
            value_subopt: inf_distance(&v_star, &v_policy),
            cond_number: q_true.cond_effective().unwrap_or(f64::NAN),
            budget_consumed: eval.consumed,
            report: eval.report,
        });
        policy = TabularMdp::greedy_policy(&eval.q_hat);
    }
    debug_assert!(total_consumed <= config.budget || config.evaluator == EvaluatorKind::Exact);
    Ok(PiRun { policy, n_epochs: n, epoch_budgets: budgets, logs, total_consumed })
}

/// Finished value-iteration run.
#[derive(Debug, Clone)]
pub struct ViRun {
    /// Final value estimate (row maxima of the last epoch's matrix estimate).
    pub v: Vec<f64>,
    /// Greedy policy of the last epoch's matrix estimate.
    pub policy: Policy,
    pub n_epochs: usize,
    pub epoch_budgets: Vec<u64>,
    pub logs: Vec<EpochLog>,
    pub total_consumed: u64,
}

/// Approximate value iteration: per epoch, estimate the Bellman image of the
/// current values from one-step samples and take row maxima.
pub fn lora_vi(mdp: &TabularMdp, config: &LoraConfig, root_seed: u64) -> Result<ViRun, AlgoError> {
    config.validate(mdp)?;
    let n = config.n_epochs(mdp.gamma(), mdp.r_max());
    if config.budget < n as u64 && config.evaluator != EvaluatorKind::Exact {
        return Err(AlgoError::BadConfig(format!(
            "budget {} cannot cover {n} epochs",
            config.budget
        )));
    }
    let budgets = config.schedule.split(config.budget, n);
    let (v_star, _) = mdp.exact_optimal()?;

    let mut v = match &config.initial_v {
        Some(v0) => v0.clone(),
        None => vec![0.0; mdp.n_states()],
    };
    let mut policy = Policy(vec![0; mdp.n_states()]);
    let mut logs = Vec::with_capacity(n);
    let mut total_consumed = 0u64;
    for (t, &epoch_budget) in (1..=n).zip(&budgets) {
        let f_true = mdp.bellman_f(&v)?;
        let oracle = FOperatorOracle::new(mdp, &v);
        let eval = estimate_matrix(
            &oracle,
            Some(&f_true),
            config.evaluator,
            epoch_budget,
            config.delta,
            &config.estimator,
            child_seed(root_seed, &[11, t as u64]),
        )
        .map_err(|source| AlgoError::Epoch { epoch: t, source })?;
        total_consumed += eval.consumed;

        policy = TabularMdp::greedy_policy(&eval.q_hat);
        v = (0..mdp.n_states())
            .map(|s| eval.q_hat.get(s, policy.action(s)))
            .collect();
        let v_policy = mdp.exact_policy_v(&policy)?;
        logs.push(EpochLog {
            epoch: t,
            policy: policy.clone(),
            eval_error: eval.q_hat.sub(&f_true)?.max_abs(),
            value_subopt: inf_distance(&v_star, &v_policy),
            cond_number: f_true.cond_effective().unwrap_or(f64::NAN),
            budget_consumed: eval.consumed,
            report: eval.report,
        });
    }
    debug_assert!(total_consumed <= config.budget || config.evaluator == EvaluatorKind::Exact);
    Ok(ViRun { v, policy, n_epochs: n, epoch_budgets: budgets, logs, total_consumed })
}

fn inf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// One failed inequality in a bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundViolation {
    pub epoch: usize,
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
}

/// Outcome of [`check_api_bound`]: the worst per-epoch estimation error and
/// every inequality that failed (expected none — they are theorems).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Worst entrywise estimation error over all epochs.
    pub epsilon: f64,
    pub n_checks: usize,
    pub violations: Vec<BoundViolation>,
}

impl BoundReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

const BOUND_SLACK: f64 = 1e-9;

/// Verifies two facts about a policy-iteration run, epoch by epoch, using
/// exact policy values: the convergence inequality
/// `|V* - V^(t+1)| <= gamma^t |V* - V^(1)| + 2 eps / (1-gamma)^2` with
/// `eps` the worst estimation error, and the greedy-improvement sandwich
/// `V^pi <= T*(V^pi) <= V^pi' + 2 eps_t / (1-gamma)` with `eps_t` the epoch's
/// own estimation error.
pub fn check_api_bound(mdp: &TabularMdp, run: &PiRun) -> Result<BoundReport, AlgoError> {
    let gamma = mdp.gamma();
    let (v_star, _) = mdp.exact_optimal()?;

    // Policy sequence pi_1 .. pi_{N+1}: the logged policies plus the final one.
    let mut policies: Vec<&Policy> = run.logs.iter().map(|l| &l.policy).collect();
    policies.push(&run.policy);
    let values: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| mdp.exact_policy_v(p))
        .collect::<Result<_, _>>()?;
    let subopts: Vec<f64> = values.iter().map(|v| inf_distance(&v_star, v)).collect();

    let epsilon = run.logs.iter().fold(0.0_f64, |m, l| m.max(l.eval_error));
    let mut violations = Vec::new();
    let mut n_checks = 0;

    let tail = 2.0 * epsilon / (1.0 - gamma).powi(2);
    for t in 1..policies.len() {
        let lhs = subopts[t];
        let rhs = gamma.powi(t as i32) * subopts[0] + tail;
        n_checks += 1;
        if lhs > rhs + BOUND_SLACK {
            violations.push(BoundViolation { epoch: t, check: "convergence".into(), lhs, rhs });
        }
    }

    for (t, log) in run.logs.iter().enumerate() {
        let v_pi = &values[t];
        let v_next = &values[t + 1];
        let t_star = mdp.bellman_optimal(v_pi)?;
        let slack = 2.0 * log.eval_error / (1.0 - gamma);
        for s in 0..mdp.n_states() {
            n_checks += 2;
            if v_pi[s] > t_star[s] + BOUND_SLACK {
                violations.push(BoundViolation {
                    epoch: t + 1,
                    check: format!("improvement_lower[s={s}]"),
                    lhs: v_pi[s],
                    rhs: t_star[s],
                });
            }
            if t_star[s] > v_next[s] + slack + BOUND_SLACK {
                violations.push(BoundViolation {
                    epoch: t + 1,
                    check: format!("improvement_upper[s={s}]"),
                    lhs: t_star[s],
                    rhs: v_next[s] + slack,
                });
            }
        }
    }

    Ok(BoundReport { epsilon, n_checks, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_lowrank_mdp, toy_mdp, GeneratorSpec, RewardNoise};
    use approx::assert_relative_eq;

    fn small_spec(n_states: usize, n_actions: usize, rank: usize, gamma: f64) -> GeneratorSpec {
        GeneratorSpec {
            n_states,
            n_actions,
            rank,
            gamma,
            r_max: 1.0,
            noise: RewardNoise::None,
            weight_alpha: 1.0,
            base_alpha: 1.0,
            zeta: 0.0,
        }
    }

    #[test]
    fn epoch_count_matches_formula() {
        let config = LoraConfig { eps: 0.1, ..LoraConfig::default() };
        // gamma = 0.9, r_max = 1: ceil(10 ln 400) = 60.
        assert_eq!(config.n_epochs(0.9, 1.0), 60);
    }

    #[test]
    fn epoch_count_is_capped() {
        let config = LoraConfig { eps: 1e-30, max_epochs: 500, ..LoraConfig::default() };
        assert_eq!(config.n_epochs(0.99, 1.0), 500);
    }

    #[test]
    fn uniform_schedule_splits_evenly() {
        let budgets = BudgetSchedule::Uniform.split(1_000_003, 10);
        assert_eq!(budgets, vec![100_000; 10]);
    }

    #[test]
    fn geometric_schedule_grows_and_respects_total() {
        let schedule = BudgetSchedule::Geometric { base: 10.0, ratio: 1.1 };
        let small = schedule.split(1_000_000, 5);
        assert_eq!(small, vec![11, 12, 13, 14, 16]);
        let scaled = schedule.split(40, 5);
        assert!(scaled.iter().sum::<u64>() <= 40);
        assert!(scaled.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn exact_evaluator_reduces_to_exact_policy_iteration() {
        let mdp = toy_mdp();
        let config = LoraConfig {
            budget: 0,
            eps: 0.01,
            evaluator: EvaluatorKind::Exact,
            ..LoraConfig::default()
        };
        let run = lora_pi(&mdp, &config, 0).unwrap();
        let (_, pi_star) = mdp.exact_optimal().unwrap();
        assert_eq!(run.policy, pi_star);
        assert_eq!(run.total_consumed, 0);
        // Exact policy iteration improves monotonically.
        for w in run.logs.windows(2) {
            assert!(w[1].value_subopt <= w[0].value_subopt + 1e-12);
        }
    }

    #[test]
    fn exact_policy_iteration_matches_exhaustive_search() {
        let mdp = generate_lowrank_mdp(&small_spec(5, 4, 2, 0.8), 42).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_policy = Policy(vec![0; 5]);
        for code in 0..4_usize.pow(5) {
            let actions: Vec<usize> = (0..5).map(|s| (code / 4_usize.pow(s as u32)) % 4).collect();
            let p = Policy(actions);
            let v = mdp.exact_policy_v(&p).unwrap();
            let total: f64 = v.iter().sum();
            if total > best {
                best = total;
                best_policy = p;
            }
        }
        let config = LoraConfig {
            budget: 0,
            eps: 1e-6,
            evaluator: EvaluatorKind::Exact,
            max_epochs: 100,
            ..LoraConfig::default()
        };
        let run = lora_pi(&mdp, &config, 0).unwrap();
        let v_run = mdp.exact_policy_v(&run.policy).unwrap();
        let v_best = mdp.exact_policy_v(&best_policy).unwrap();
        for (a, b) in v_run.iter().zip(&v_best) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn pi_run_stays_within_budget_and_logs_every_epoch() {
        let mdp = toy_mdp();
        let config = LoraConfig {
            budget: 400_000,
            eps: 0.3,
            evaluator: EvaluatorKind::FullMatrixMc,
            ..LoraConfig::default()
        };
        let run = lora_pi(&mdp, &config, 7).unwrap();
        assert_eq!(run.logs.len(), run.n_epochs);
        assert!(run.total_consumed <= config.budget);
        let logged: u64 = run.logs.iter().map(|l| l.budget_consumed).sum();
        assert_eq!(logged, run.total_consumed);
    }

    #[test]
    fn pi_is_deterministic_in_seed() {
        let mdp = toy_mdp();
        let config = LoraConfig {
            budget: 200_000,
            eps: 0.3,
            evaluator: EvaluatorKind::FullMatrixMc,
            ..LoraConfig::default()
        };
        let a = lora_pi(&mdp, &config, 3).unwrap();
        let b = lora_pi(&mdp, &config, 3).unwrap();
        assert_eq!(a.policy, b.policy);
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.policy, y.policy);
            assert_eq!(x.eval_error, y.eval_error);
        }
    }

    #[test]
    fn api_bounds_hold_on_exact_and_noisy_runs() {
        let mdp = toy_mdp();
        for (evaluator, budget) in
            [(EvaluatorKind::Exact, 0), (EvaluatorKind::FullMatrixMc, 100_000)]
        {
            let config = LoraConfig { budget, eps: 0.3, evaluator, ..LoraConfig::default() };
            let run = lora_pi(&mdp, &config, 11).unwrap();
            let report = check_api_bound(&mdp, &run).unwrap();
            assert!(report.is_clean(), "violations: {:?}", report.violations);
            assert!(report.n_checks > 0);
        }
    }

    #[test]
    fn api_bounds_hold_across_seeded_mdps() {
        for seed in 0..20 {
            let mdp = generate_lowrank_mdp(&small_spec(6, 5, 2, 0.7), seed).unwrap();
            let config = LoraConfig {
                budget: 150_000,
                eps: 0.5,
                evaluator: EvaluatorKind::FullMatrixMc,
                ..LoraConfig::default()
            };
            let run = lora_pi(&mdp, &config, seed).unwrap();
            let report = check_api_bound(&mdp, &run).unwrap();
            assert!(report.is_clean(), "seed {seed}: {:?}", report.violations);
        }
    }

    #[test]
    fn f_oracle_is_unbiased() {
        let mdp = toy_mdp();
        let v = vec![0.7, -0.3];
        let oracle = FOperatorOracle::new(&mdp, &v);
        let f = mdp.bellman_f(&v).unwrap();
        let mut rng = child_rng(5, &[0]);
        let n = 100_000;
        let (s, a) = (0, 1);
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for _ in 0..n {
            let x = oracle.sample(s, a, &mut rng);
            total += x;
            total_sq += x * x;
        }
        let mean = total / n as f64;
        let var = total_sq / n as f64 - mean * mean;
        let stderr = (var / n as f64).sqrt();
        assert!(
            (mean - f.get(s, a)).abs() <= 4.0 * stderr.max(1e-12),
            "mean {mean} vs exact {}",
            f.get(s, a)
        );
    }

    #[test]
    fn vi_with_exact_transitions_contracts_like_value_iteration() {
        // One-hot transitions make each one-step sample exactly F(V)(s, a).
        let transitions = vec![
            0.0, 1.0, 0.0, /* s0 a0 -> s1 */ 1.0, 0.0, 0.0, /* s0 a1 -> s0 */
            0.0, 0.0, 1.0, /* s1 a0 -> s2 */ 0.0, 1.0, 0.0, /* s1 a1 -> s1 */
            1.0, 0.0, 0.0, /* s2 a0 -> s0 */ 0.0, 0.0, 1.0, /* s2 a1 -> s2 */
        ];
        let rewards = Matrix::from_vec(3, 2, vec![0.2, -0.1, 0.5, 0.0, -0.4, 0.3]).unwrap();
        let mdp = TabularMdp::new(0.8, 1.0, RewardNoise::None, transitions, rewards).unwrap();
        let config = LoraConfig {
            budget: 10_000_000,
            eps: 0.05,
            evaluator: EvaluatorKind::FullMatrixMc,
            ..LoraConfig::default()
        };
        let run = lora_vi(&mdp, &config, 1).unwrap();
        let (v_star, _) = mdp.exact_optimal().unwrap();
        // Exact value iteration from zero: after N epochs the gap obeys the
        // contraction rate.
        let gap0 = v_star.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let gap = inf_distance(&run.v, &v_star);
        assert!(gap <= 0.8_f64.powi(run.n_epochs as i32) * gap0 + 1e-9, "gap {gap}");
        for log in &run.logs {
            assert!(log.eval_error < 1e-10, "eval error {}", log.eval_error);
        }
        assert_eq!(run.policy, mdp.exact_optimal().unwrap().1);
    }

    #[test]
    fn vi_logs_condition_numbers() {
        let mdp = toy_mdp();
        let config = LoraConfig {
            budget: 500_000,
            eps: 0.3,
            evaluator: EvaluatorKind::FullMatrixMc,
            initial_v: Some(vec![2.86, 2.98]),
            ..LoraConfig::default()
        };
        let run = lora_vi(&mdp, &config, 2).unwrap();
        assert!(run.logs.iter().all(|l| l.cond_number.is_finite() && l.cond_number >= 1.0));
        assert!(run.total_consumed <= config.budget);
    }

    #[test]
    fn all_baselines_recover_exact_matrix_with_noiseless_budget() {
        use crate::lme::DirectMatrixOracle;
        let m = {
            let mut rng = child_rng(9, &[0]);
            let u: Vec<f64> = (0..12 * 2).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            Matrix::from_fn(12, 10, |r, c| u[2 * r] * (c as f64 + 1.0) + u[2 * r + 1] * (c as f64).sin())
        };
        let oracle = DirectMatrixOracle::new(m.clone(), RewardNoise::None, None);
        let config = LmeConfig { rank_override: Some(2), k_override: Some(5), ..LmeConfig::default() };
        let budget = 4_000_000;
        for kind in [
            EvaluatorKind::CurUniformAnchors,
            EvaluatorKind::CurOracleAnchors,
            EvaluatorKind::FullMatrixMc,
            EvaluatorKind::SvdDenoise,
        ] {
            let eval = estimate_matrix(&oracle, Some(&m), kind, budget, 0.1, &config, 4).unwrap();
            let err = eval.q_hat.sub(&m).unwrap().max_abs();
            assert!(err < 1e-8, "{kind:?} error {err}");
            assert!(eval.consumed <= budget, "{kind:?} overspent");
        }
    }

    #[test]
    fn baselines_fail_fast_when_budget_cannot_cover_entries() {
        use crate::lme::DirectMatrixOracle;
        let m = Matrix::from_fn(10, 10, |r, c| (r + c) as f64);
        let oracle = DirectMatrixOracle::new(m.clone(), RewardNoise::None, None);
        let config = LmeConfig { rank_override: Some(1), k_override: Some(4), ..LmeConfig::default() };
        for kind in [EvaluatorKind::FullMatrixMc, EvaluatorKind::CurUniformAnchors] {
            let err = estimate_matrix(&oracle, Some(&m), kind, 10, 0.1, &config, 4).unwrap_err();
            assert!(matches!(err, LmeError::BudgetTooSmall { .. }), "{kind:?}: {err}");
        }
    }

    #[test]
    fn adversarial_estimates_still_satisfy_bounds() {
        // Drive the improvement loop with exact matrices corrupted by a
        // worst-case-signed perturbation of known size; the inequalities are
        // theorems in the measured error, so they must still hold.
        let mdp = generate_lowrank_mdp(&small_spec(4, 3, 2, 0.8), 3).unwrap();
        let eps = 0.04;
        let mut rng = child_rng(77, &[0]);
        let mut policy = Policy(vec![0; 4]);
        let mut logs = Vec::new();
        for t in 1..=12 {
            let q_true = mdp.exact_policy_q(&policy).unwrap();
            let q_hat = Matrix::from_fn(4, 3, |s, a| {
                let flip = if rand::Rng::gen::<bool>(&mut rng) { eps } else { -eps };
                q_true.get(s, a) + flip
            });
            let (v_star, _) = mdp.exact_optimal().unwrap();
            let v_policy = mdp.exact_policy_v(&policy).unwrap();
            logs.push(EpochLog {
                epoch: t,
                policy: policy.clone(),
                eval_error: q_hat.sub(&q_true).unwrap().max_abs(),
                value_subopt: inf_distance(&v_star, &v_policy),
                cond_number: 1.0,
                budget_consumed: 0,
                report: None,
            });
            policy = TabularMdp::greedy_policy(&q_hat);
        }
        let run = PiRun {
            policy,
            n_epochs: 12,
            epoch_budgets: vec![0; 12],
            logs,
            total_consumed: 0,
        };
        let report = check_api_bound(&mdp, &run).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        assert_relative_eq!(report.epsilon, eps);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mdp = toy_mdp();
        let bad_eps = LoraConfig { eps: 0.0, ..LoraConfig::default() };
        assert!(matches!(lora_pi(&mdp, &bad_eps, 0), Err(AlgoError::BadConfig(_))));
        let bad_policy = LoraConfig {
            initial_policy: Some(vec![0, 9]),
            ..LoraConfig::default()
        };
        assert!(matches!(lora_pi(&mdp, &bad_policy, 0), Err(AlgoError::BadConfig(_))));
        let bad_schedule = LoraConfig {
            schedule: BudgetSchedule::Geometric { base: -1.0, ratio: 1.1 },
            ..LoraConfig::default()
        };
        assert!(matches!(lora_pi(&mdp, &bad_schedule, 0), Err(AlgoError::BadConfig(_))));
    }

    #[test]
    fn epoch_failures_carry_the_epoch_index() {
        let mdp = toy_mdp();
        let config = LoraConfig {
            budget: 70,
            eps: 0.9,
            evaluator: EvaluatorKind::LmeLeveraged,
            ..LoraConfig::default()
        };
        match lora_pi(&mdp, &config, 0) {
            Err(AlgoError::Epoch { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected epoch failure, got {other:?}"),
        }
    }
}
