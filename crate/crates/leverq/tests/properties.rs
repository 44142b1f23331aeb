//! Randomized invariants: linear-algebra identities, plan and budget
//! accounting, schedule splits, and estimator determinism.

use leverq::algorithms::BudgetSchedule;
use leverq::harness::sign_test_p;
use leverq::linalg::{Matrix, PinvOptions};
use leverq::lme::{
    floored_scores, lme, uniform_multinomial, DirectMatrixOracle, LmeConfig, LmeError,
    SamplingPlan,
};
use leverq::mdp::RewardNoise;
use leverq::seeding::child_rng;
use proptest::prelude::*;

fn matrix_strategy(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim)
        .prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0_f64..10.0, r * c)
                .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
        })
}

/// Strictly rank-`d` matrices built from Gaussian-ish factors.
fn lowrank_strategy(max_dim: usize, max_rank: usize) -> impl Strategy<Value = (Matrix, usize)> {
    (2..=max_dim, 2..=max_dim, 1..=max_rank, any::<u64>()).prop_map(|(r, c, d, seed)| {
        let d = d.min(r).min(c);
        let mut rng = child_rng(seed, &[7]);
        use rand::Rng;
        let left = Matrix::from_fn(r, d, |_, _| rng.gen_range(-1.0..1.0) + 2.0);
        let right = Matrix::from_fn(d, c, |_, _| rng.gen_range(-1.0..1.0) + 2.0);
        (left.matmul(&right).unwrap(), d)
    })
}

proptest! {
    #[test]
    fn pseudo_inverse_satisfies_moore_penrose(m in matrix_strategy(8)) {
        prop_assume!(m.max_abs() > 1e-6);
        let pinv = m.pseudo_inverse(&PinvOptions::default()).unwrap();
        let scale = m.max_abs().max(pinv.max_abs());
        let tol = 1e-8 * scale * scale;
        let a_pa = m.matmul(&pinv).unwrap().matmul(&m).unwrap();
        prop_assert!(a_pa.sub(&m).unwrap().max_abs() <= tol);
        let p_ap = pinv.matmul(&m).unwrap().matmul(&pinv).unwrap();
        prop_assert!(p_ap.sub(&pinv).unwrap().max_abs() <= tol);
        // Both projectors are symmetric.
        let proj = m.matmul(&pinv).unwrap();
        let sym_gap = (0..proj.rows())
            .flat_map(|r| (0..proj.cols()).map(move |c| (r, c)))
            .map(|(r, c)| (proj.get(r, c) - proj.get(c, r)).abs())
            .fold(0.0_f64, f64::max);
        prop_assert!(sym_gap <= tol);
    }

    #[test]
    fn spikiness_lies_in_its_range(m in matrix_strategy(10)) {
        prop_assume!(m.max_abs() > 1e-9);
        let alpha = m.spikiness().unwrap();
        let cells = (m.rows() * m.cols()) as f64;
        prop_assert!(alpha >= 1.0 - 1e-12);
        prop_assert!(alpha <= cells.sqrt() + 1e-12);
    }

    #[test]
    fn spikiness_bounded_by_coherence((m, d) in lowrank_strategy(10, 3)) {
        prop_assume!(m.numeric_rank(None).unwrap() == d);
        let alpha = m.spikiness().unwrap();
        let mu = m.coherence(Some(d)).unwrap();
        prop_assert!(alpha <= mu * mu * d as f64 + 1e-9, "alpha={alpha} mu={mu} d={d}");
    }

    #[test]
    fn inf_gap_sandwiches_the_spectral_tail(m in matrix_strategy(10), d_raw in 0usize..6) {
        let svd = m.svd().unwrap();
        let n_sv = svd.singular_values.len();
        prop_assume!(n_sv >= 2);
        let d = 1 + d_raw % (n_sv - 1);
        let zeta = m.low_rank_inf_gap(d).unwrap();
        let sigma_next = svd.singular_values[d];
        let cells = (m.rows() * m.cols()) as f64;
        prop_assert!(zeta <= sigma_next + 1e-9 * m.max_abs().max(1.0));
        prop_assert!(sigma_next <= cells.sqrt() * zeta + 1e-9 * m.max_abs().max(1.0));
    }

    #[test]
    fn leverage_estimates_are_floored_distributions((m, d) in lowrank_strategy(10, 3)) {
        let svd = m.svd().unwrap();
        for (block, transposed) in [(&svd.u, false), (&svd.vt, true)] {
            let scores = floored_scores(block, d, transposed);
            let n = if transposed { m.cols() } else { m.rows() };
            prop_assert_eq!(scores.len(), n);
            let sum: f64 = scores.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(scores.iter().all(|&s| s >= 1.0 / (2.0 * n as f64) - 1e-12));
        }
    }

    #[test]
    fn multinomial_counts_partition_the_total(n in 0u64..200_000, cells in 1usize..400, seed in any::<u64>()) {
        let mut rng = child_rng(seed, &[1]);
        let counts = uniform_multinomial(n, cells, &mut rng);
        prop_assert_eq!(counts.len(), cells);
        prop_assert_eq!(counts.iter().sum::<u64>(), n);
    }

    #[test]
    fn sampling_plans_respect_their_budget(
        rows in 2usize..20,
        cols in 2usize..20,
        budget in 1u64..10_000_000,
        delta in 0.01f64..0.5,
    ) {
        let plan = SamplingPlan::build_phase2_only((rows, cols), budget, delta, 1.0, 0.0, 1, 0);
        match plan {
            Err(LmeError::BudgetTooSmall { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            Ok(plan) => {
                prop_assert!(plan.n_phase1 * plan.cost_per_sample <= budget / 2);
                prop_assert!(plan.beta.is_finite() && plan.beta > 0.0);
                for d_hat in 1..=rows.min(cols) {
                    if let Ok(parts) = plan.anchor_budget(d_hat, None) {
                        prop_assert!(parts.k >= 1 && parts.k <= rows.min(cols));
                        prop_assert!(parts.n1 >= 1);
                        prop_assert!(parts.n2 <= parts.n1);
                    }
                }
            }
        }
    }

    #[test]
    fn estimator_never_overspends_and_is_deterministic(
        dims in 4usize..10,
        budget in 1_000u64..200_000,
        seed in any::<u64>(),
    ) {
        let truth = Matrix::from_fn(dims, dims, |r, c| ((r + 1) * (c + 2)) as f64 / dims as f64);
        let oracle = DirectMatrixOracle::new(truth, RewardNoise::None, None);
        let config = LmeConfig { rank_override: Some(1), ..LmeConfig::default() };
        match lme(&oracle, budget, 0.1, &config, seed) {
            Err(LmeError::BudgetTooSmall { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            Ok(out) => {
                prop_assert!(out.report.budget_consumed <= budget);
                let again = lme(&oracle, budget, 0.1, &config, seed).unwrap();
                prop_assert_eq!(out.q_hat, again.q_hat);
                prop_assert_eq!(out.report.budget_consumed, again.report.budget_consumed);
            }
        }
    }

    #[test]
    fn schedule_splits_never_exceed_the_total(
        total in 100u64..10_000_000,
        n in 1usize..40,
        base in 1.0f64..1000.0,
        ratio in 1.0f64..1.5,
    ) {
        for schedule in [BudgetSchedule::Uniform, BudgetSchedule::Geometric { base, ratio }] {
            let parts = schedule.split(total, n);
            prop_assert_eq!(parts.len(), n);
            prop_assert!(parts.iter().sum::<u64>() <= total);
        }
    }

    #[test]
    fn sign_test_p_is_a_probability_and_monotone(wins in 0usize..60, losses in 0usize..60) {
        let p = sign_test_p(wins, losses);
        prop_assert!((0.0..=1.0).contains(&p));
        if losses > 0 {
            // Shifting one loss to a win can only shrink the tail.
            prop_assert!(sign_test_p(wins + 1, losses - 1) <= p + 1e-12);
        }
    }
}
