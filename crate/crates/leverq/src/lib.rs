//! Estimation of low-rank state-action value matrices from a sampling budget,
//! and policy/value iteration schemes built on top of that estimator.
//!
//! The crate is organised in five layers:
//!
//! * [`linalg`] — dense matrices, SVD-backed diagnostics (spikiness, coherence,
//!   leverage scores), and a rank-capped pseudo-inverse.
//! * [`mdp`] — tabular discounted MDPs: exact policy evaluation, Bellman
//!   operators, value iteration with condition-number tracing, a low-rank
//!   instance generator, and trajectory sampling.
//! * [`lme`] — the two-phase leveraged matrix estimator: spectral leverage-score
//!   estimation on half the budget, then weighted CUR completion from a sampled
//!   skeleton on the other half.
//! * [`algorithms`] — approximate policy iteration and value iteration driven by
//!   pluggable matrix evaluators, plus baseline evaluators for comparison.
//! * [`harness`] — experiment configs, seeded deterministic runs, CSV output,
//!   and summary statistics for the command-line driver.
//!
//! Entry points: [`mdp::TabularMdp`], [`lme::lme`], [`algorithms::lora_pi`],
//! [`harness::run_experiment`].

pub mod algorithms;
pub mod guide;
pub mod harness;
pub mod linalg;
pub mod lme;
pub mod mdp;
pub mod seeding;
