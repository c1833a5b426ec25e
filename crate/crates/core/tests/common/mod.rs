//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dom_lab::grid::{ActionGrid, StateGrid};
use dom_lab::mdp::{Mdp, RewardTable, TransitionKernel};
use dom_lab::table::Table2;
use nalgebra::{DMatrix, DVector};

/// Exact `V^π` from the dense linear system `(I - γ P_π) v = r_π`.
pub fn exact_policy_value(mdp: &Mdp, policy: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let g = mdp.gamma();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s];
        r[s] = mdp.reward().get(s, a);
        for next in 0..n {
            m[(s, next)] -= g * mdp.kernel().prob(s, a, next);
        }
    }
    m.lu().solve(&r).expect("I - γP is invertible").iter().copied().collect()
}

/// Howard policy iteration with exact evaluation; returns `(V*, Q*)`.
pub fn policy_iteration(mdp: &Mdp) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policy = vec![0; ns];
    loop {
        let v = exact_policy_value(mdp, &policy);
        let q: Vec<Vec<f64>> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let ev: f64 = (0..ns).map(|n| mdp.kernel().prob(s, a, n) * v[n]).sum();
                        mdp.reward().get(s, a) + mdp.gamma() * ev
                    })
                    .collect()
            })
            .collect();
        let mut changed = false;
        for s in 0..ns {
            let cur = q[s][policy[s]];
            let (best, val) = q[s]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (a, &x)| if x > acc.1 { (a, x) } else { acc });
            if val > cur + 1e-12 {
                policy[s] = best;
                changed = true;
            }
        }
        if !changed {
            return (v, q);
        }
    }
}

/// Indices within `tol` of the row maximum.
pub fn brute_argmax_set(row: &[f64], tol: f64) -> Vec<usize> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..row.len()).filter(|&a| row[a] >= max - tol).collect()
}

/// Deterministic walk on `{0, 0.1, ..., 1}` with actions `-0.2..=0.2` in
/// steps of 0.1 (successor clamped), reward `-|s - 0.5| - |a|`.
pub fn deterministic_walk() -> Mdp {
    let states = StateGrid::uniform(0.0, 1.0, 11).unwrap();
    let actions = ActionGrid::from_points(vec![-0.2, -0.1, 0.0, 0.1, 0.2]).unwrap();
    let rows = (0..11 * 5)
        .map(|i| {
            let (s, a) = (i / 5, i % 5);
            let next = (s as i64 + a as i64 - 2).clamp(0, 10) as usize;
            vec![(next, 1.0)]
        })
        .collect();
    let kernel = TransitionKernel::from_rows(11, 5, rows).unwrap();
    let reward = Table2::from_fn(11, 5, |s, a| {
        -(states.points()[s] - 0.5).abs() - actions.points()[a].abs()
    });
    Mdp::new(states, actions, kernel, RewardTable::new(reward, 0.0).unwrap(), 0.9).unwrap()
}
