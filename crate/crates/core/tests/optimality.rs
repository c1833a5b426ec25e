mod common;

use std::sync::OnceLock;

use dom_lab::mdp::{solve_mdp, Mdp, RewardTable, Solution, SolveOptions};
use dom_lab::models::{fit_mle, induced_mdp_like, FitSource, PredictiveModel};
use dom_lab::optimality::{
    alpha0_construct, argmax_agreement, check_sandwich, delta_residual, disadvantage, omega_check, storage_matching,
    StorageField, DEFAULT_TIE_TOL,
};
use dom_lab::scenarios::{battery_case1, battery_case2, perturbed_mdp, random_mdp, BatteryGrid, ScenarioBundle};
use dom_lab::table::Table2;
use proptest::prelude::*;

struct Solved {
    bundle: ScenarioBundle,
    sol: Solution,
    model: PredictiveModel,
    model_mdp: Mdp,
    model_sol: Solution,
}

fn solved(bundle: ScenarioBundle) -> Solved {
    let sol = solve_mdp(&bundle.mdp, SolveOptions::default()).unwrap();
    let model = PredictiveModel::Deterministic(bundle.nominal_model.clone());
    let model_mdp = induced_mdp_like(&model, &bundle.mdp).unwrap();
    let model_sol = solve_mdp(&model_mdp, SolveOptions::default()).unwrap();
    Solved {
        bundle,
        sol,
        model,
        model_mdp,
        model_sol,
    }
}

fn case1() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solved(battery_case1(BatteryGrid::default()).unwrap()))
}

fn case2() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solved(battery_case2(BatteryGrid::default()).unwrap()))
}

/// Per-state argmax sets equal, by direct enumeration.
fn brute_sets_equal(a: &Solution, b: &Solution, tol: f64) -> bool {
    (0..a.n_states()).all(|s| common::brute_argmax_set(a.q_star.row(s), tol) == common::brute_argmax_set(b.q_star.row(s), tol))
}

/// Model argmin set of D contained in the true one at every state.
fn brute_inclusion(d_true: &Table2<f64>, d_model: &Table2<f64>) -> bool {
    (0..d_true.rows()).all(|s| (0..d_true.cols()).all(|a| d_model[(s, a)] > 0.0 || d_true[(s, a)] == 0.0))
}

#[test]
fn perfect_model_has_zero_residual_and_storage() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 6, 3).unwrap();
        let sol = solve_mdp(&mdp, SolveOptions::default()).unwrap();
        let mle = fit_mle(FitSource::Exact(&mdp)).unwrap();
        let model = PredictiveModel::Stochastic(mle.model);
        let field = delta_residual(&mdp, &sol, &model).unwrap();
        assert!(field.as_slice().iter().all(|&x| x == 0.0));
        let model_mdp = induced_mdp_like(&model, &mdp).unwrap();
        let model_sol = solve_mdp(&model_mdp, SolveOptions::default()).unwrap();
        let st = storage_matching(&sol, &model_mdp, &model_sol).unwrap();
        assert!(st.lambda.iter().all(|&x| x == 0.0));
        assert!(st.big_lambda.as_slice().iter().all(|&x| x == 0.0));
        assert!(check_sandwich(&sol, &model_sol, DEFAULT_TIE_TOL).unwrap().holds);
    }
}

#[test]
fn constant_reward_shift_gives_constant_storage() {
    let c = 0.7;
    for seed in 0..10 {
        let mdp = random_mdp(seed, 6, 3).unwrap();
        let sol = solve_mdp(&mdp, SolveOptions::with_tol(1e-12)).unwrap();
        let model_mdp = mdp.with_reward(mdp.reward().shifted(c).unwrap()).unwrap();
        let model_sol = solve_mdp(&model_mdp, SolveOptions::with_tol(1e-12)).unwrap();
        let st = storage_matching(&sol, &model_mdp, &model_sol).unwrap();
        let expect = -c / (1.0 - mdp.gamma());
        for &l in &st.lambda {
            assert!((l - expect).abs() < 1e-9);
        }
        for &l in st.big_lambda.as_slice() {
            assert!((l + c).abs() < 1e-9);
        }
        // same argmax sets although Q values differ
        assert!(brute_sets_equal(&sol, &model_sol, 1e-9));
        assert!(check_sandwich(&sol, &model_sol, DEFAULT_TIE_TOL).unwrap().holds);
    }
}

#[test]
fn storage_identity_on_battery_one() {
    let c = case1();
    let st = storage_matching(&c.sol, &c.model_mdp, &c.model_sol).unwrap();
    assert!(st.lambda.iter().any(|l| l.abs() > 1.0));
    assert!(st.value_gap(&c.sol, &c.model_sol) <= 1e-8);
    assert!(st.bellman_identity_residual(&c.model_mdp, &c.model_sol) <= 1e-8);
    // Λ definition, recomputed
    let g = c.model_mdp.gamma();
    for ((s, a), &big) in st.big_lambda.iter() {
        let direct = st.lambda[s] - g * c.model_mdp.kernel().expect(s, a, &st.lambda);
        assert!((big - direct).abs() <= 1e-9);
    }
}

#[test]
fn expected_value_model_fails_the_audit_on_battery_one() {
    let c = case1();
    assert!(!check_sandwich(&c.sol, &c.model_sol, DEFAULT_TIE_TOL).unwrap().holds);
    let region = c.bundle.region_states();
    let flags = argmax_agreement(&c.sol, &c.model_sol, &region, DEFAULT_TIE_TOL);
    assert!(flags.iter().any(|f| !f));
}

#[test]
fn expected_value_residual_is_not_constant_on_battery_two() {
    let c = case2();
    let field = delta_residual(&c.bundle.mdp, &c.sol, &c.model).unwrap();
    assert!(field.spread() > 0.01, "{}", field.spread());
}

#[test]
fn storage_leaves_model_advantage_unchanged() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 6, 3).unwrap();
        let sol = solve_mdp(&mdp, SolveOptions::with_tol(1e-12)).unwrap();
        let lambda: Vec<f64> = (0..6).map(|s| (s as f64 * 1.3 + seed as f64).sin() * 4.0).collect();
        let st = StorageField::from_lambda(&mdp, lambda.clone()).unwrap();
        // modified problem: reward r + Λ; its values are V + λ
        let rewards = Table2::from_fn(6, 3, |s, a| mdp.reward().get(s, a) + st.big_lambda[(s, a)]);
        let modified = mdp.with_reward(RewardTable::new(rewards, 0.0).unwrap()).unwrap();
        let msol = solve_mdp(&modified, SolveOptions::with_tol(1e-12)).unwrap();
        for (s, l) in lambda.iter().enumerate() {
            assert!((msol.v_star[s] - sol.v_star[s] - l).abs() < 1e-8);
            for a in 0..3 {
                assert!((msol.advantage[(s, a)] - sol.advantage[(s, a)]).abs() < 1e-9);
            }
        }
        assert!(brute_sets_equal(&sol, &msol, 1e-9));
    }
}

#[test]
fn alpha0_feasibility_is_argmin_inclusion() {
    let mut feasible = 0;
    for seed in 0..50 {
        let mdp = random_mdp(seed, 6, 3).unwrap();
        let model = perturbed_mdp(&mdp, seed + 1000, 0.3).unwrap();
        let a = solve_mdp(&mdp, SolveOptions::default()).unwrap();
        let b = solve_mdp(&model, SolveOptions::default()).unwrap();
        let (dt, dm) = (disadvantage(&a, DEFAULT_TIE_TOL), disadvantage(&b, DEFAULT_TIE_TOL));
        let alpha = alpha0_construct(&dt, &dm).unwrap();
        assert_eq!(alpha.feasible, brute_inclusion(&dt, &dm), "seed {seed}");
        feasible += usize::from(alpha.feasible);
        assert_eq!(alpha.eval(0.0), 0.0);
        assert!(alpha.is_nondecreasing());
        // defining inequality D̂ ≥ α₀(D) at every pair
        for (d_t, d_m) in dt.as_slice().iter().zip(dm.as_slice()) {
            assert!(*d_m >= alpha.eval(*d_t) || *d_t > *alpha.breakpoints.last().unwrap());
        }
    }
    // both verdicts must occur for the comparison to mean anything
    assert!(feasible > 0 && feasible < 50, "{feasible}/50 feasible");
}

#[test]
fn omega_examples() {
    let mdp = random_mdp(3, 6, 3).unwrap();
    let sol = solve_mdp(&mdp, SolveOptions::default()).unwrap();
    let max = sol.v_star.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(omega_check(&mdp, &sol.v_star, &sol.policy, 20, max).unwrap().iter().all(|&x| x));
    assert!(omega_check(&mdp, &sol.v_star, &sol.policy, 20, 0.0).unwrap().iter().all(|&x| !x));
    assert!(omega_check(&mdp, &sol.v_star, &sol.policy, 0, 1.0).is_err());

    let c = case2();
    let bound = c.model_mdp.reward().min().abs() / (1.0 - c.model_mdp.gamma());
    let omega = omega_check(&c.model_mdp, &c.model_sol.v_star, &c.model_sol.policy, 50, bound).unwrap();
    assert!(omega.iter().all(|&x| x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sandwich_verdict_matches_argmax_sets(
        seed in any::<u64>(),
        ns in 1usize..=8,
        na in 1usize..=4,
        strength in prop_oneof![Just(0.0), 0.0f64..0.6],
    ) {
        let mdp = random_mdp(seed, ns, na).unwrap();
        let model = perturbed_mdp(&mdp, seed ^ 0x9e37_79b9, strength).unwrap();
        let a = solve_mdp(&mdp, SolveOptions::default()).unwrap();
        let b = solve_mdp(&model, SolveOptions::default()).unwrap();
        let verdict = check_sandwich(&a, &b, DEFAULT_TIE_TOL).unwrap().holds;
        // the disadvantage snaps at the same tolerance as the brute-force sets
        let brute = (0..ns).all(|s| {
            let set = |sol: &Solution| (0..na).filter(|&x| -sol.advantage[(s, x)] <= DEFAULT_TIE_TOL).collect::<Vec<_>>();
            set(&a) == set(&b)
        });
        prop_assert_eq!(verdict, brute);
    }
}
