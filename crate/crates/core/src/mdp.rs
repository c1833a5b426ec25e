//! Tabular MDPs over a state grid and an action grid, solved exactly by
//! value iteration.
//!
//! Everything here is purely tabular: a kernel row is a sparse list of
//! `(next_state, probability)` pairs kept in increasing index order, and all
//! expectations are accumulated in that order so that results are bitwise
//! reproducible whether or not the Bellman sweep runs in parallel.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ActionGrid, StateGrid};
use crate::table::Table2;

/// Row sums must be within this distance of 1.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Pairs per sweep above which the Bellman backup runs on the rayon pool.
const PARALLEL_THRESHOLD: usize = 4096;

/// Probability table `[state, action, next_state]`, stored as sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionKernel {
    /// Builds a kernel from per-pair rows (indexed `s * n_actions + a`).
    ///
    /// Duplicate successor indices are merged and exact zeros dropped.
    pub fn from_rows(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("kernel needs at least one state and one action".into()));
        }
        if rows.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "kernel needs {} rows, got {}",
                n_states * n_actions,
                rows.len()
            )));
        }
        let mut clean = Vec::with_capacity(rows.len());
        for (idx, mut row) in rows.into_iter().enumerate() {
            let (state, action) = (idx / n_actions, idx % n_actions);
            let bad = |reason: String| Error::InvalidKernel {
                state,
                action,
                reason,
            };
            row.sort_by_key(|&(next, _)| next);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (next, p) in row {
                if next >= n_states {
                    return Err(bad(format!("successor index {next} out of range")));
                }
                if !p.is_finite() || p < 0.0 {
                    return Err(bad(format!("probability {p} is not a finite non-negative number")));
                }
                match merged.last_mut() {
                    Some((last, acc)) if *last == next => *acc += p,
                    _ => merged.push((next, p)),
                }
            }
            merged.retain(|&(_, p)| p > 0.0);
            let sum: f64 = merged.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(bad(format!("row sums to {sum}")));
            }
            clean.push(merged);
        }
        Ok(TransitionKernel {
            n_states,
            n_actions,
            rows: clean,
        })
    }

    /// Builds a kernel from a dense `[s][a][s']` array in row-major order.
    pub fn from_dense(n_states: usize, n_actions: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "dense kernel needs {} entries, got {}",
                n_states * n_actions * n_states,
                probs.len()
            )));
        }
        let rows = probs
            .chunks(n_states.max(1))
            .map(|chunk| chunk.iter().copied().enumerate().collect())
            .collect();
        Self::from_rows(n_states, n_actions, rows)
    }

    /// Deterministic kernel with a unit mass at `successor(s, a)`.
    pub fn dirac(
        n_states: usize,
        n_actions: usize,
        mut successor: impl FnMut(usize, usize) -> usize,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                rows.push(vec![(successor(s, a), 1.0)]);
            }
        }
        Self::from_rows(n_states, n_actions, rows)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Non-zero entries of row `(s, a)`, sorted by successor index.
    pub fn row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.rows[s * self.n_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        let row = self.row(s, a);
        row.binary_search_by_key(&next, |&(i, _)| i)
            .map(|k| row[k].1)
            .unwrap_or(0.0)
    }

    /// `Σ_{s'} P(s'|s,a)·values[s']`, summed in successor order.
    pub fn expect(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.row(s, a).iter().map(|&(next, p)| p * values[next]).sum()
    }

    /// Mean successor state value under the grid coordinates.
    pub fn mean(&self, s: usize, a: usize, states: &StateGrid) -> f64 {
        self.expect(s, a, states.points())
    }

    /// Successor indices with positive probability.
    pub fn support(&self, s: usize, a: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(s, a).iter().map(|&(next, _)| next)
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1)
    }

    /// Dense copy of the row `(s, a)`.
    pub fn dense_row(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for &(next, p) in self.row(s, a) {
            out[next] = p;
        }
        out
    }
}

/// Reward table `[state, action]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardTable {
    values: Table2<f64>,
    penalty_coeff: f64,
}

impl RewardTable {
    pub fn new(values: Table2<f64>, penalty_coeff: f64) -> Result<Self> {
        if let Some(((s, a), v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidReward(format!("non-finite reward {v} at ({s},{a})")));
        }
        if !(penalty_coeff >= 0.0 && penalty_coeff.is_finite()) {
            return Err(Error::InvalidReward(format!(
                "penalty coefficient must be finite and non-negative, got {penalty_coeff}"
            )));
        }
        Ok(RewardTable {
            values,
            penalty_coeff,
        })
    }

    pub fn values(&self) -> &Table2<f64> {
        &self.values
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[(s, a)]
    }

    pub fn penalty_coeff(&self) -> f64 {
        self.penalty_coeff
    }

    pub fn min(&self) -> f64 {
        self.values.as_slice().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Same table with `c` added to every entry.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.values.map(|v| v + c), self.penalty_coeff)
    }
}

/// A discounted MDP `(states, actions, reward, kernel, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    states: StateGrid,
    actions: ActionGrid,
    kernel: TransitionKernel,
    reward: RewardTable,
    gamma: f64,
}

impl Mdp {
    pub fn new(
        states: StateGrid,
        actions: ActionGrid,
        kernel: TransitionKernel,
        reward: RewardTable,
        gamma: f64,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount must lie in (0, 1), got {gamma}")));
        }
        let (ns, na) = (states.len(), actions.len());
        if kernel.n_states() != ns || kernel.n_actions() != na {
            return Err(Error::Shape(format!(
                "kernel is {}x{} but grids are {ns}x{na}",
                kernel.n_states(),
                kernel.n_actions()
            )));
        }
        if reward.values().shape() != (ns, na) {
            return Err(Error::Shape(format!(
                "reward table is {:?} but grids are {ns}x{na}",
                reward.values().shape()
            )));
        }
        Ok(Mdp {
            states,
            actions,
            kernel,
            reward,
            gamma,
        })
    }

    pub fn states(&self) -> &StateGrid {
        &self.states
    }

    pub fn actions(&self) -> &ActionGrid {
        &self.actions
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn reward(&self) -> &RewardTable {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Same MDP with a different kernel.
    pub fn with_kernel(&self, kernel: TransitionKernel) -> Result<Self> {
        Mdp::new(
            self.states.clone(),
            self.actions.clone(),
            kernel,
            self.reward.clone(),
            self.gamma,
        )
    }

    /// Same MDP with a different reward table.
    pub fn with_reward(&self, reward: RewardTable) -> Result<Self> {
        Mdp::new(
            self.states.clone(),
            self.actions.clone(),
            self.kernel.clone(),
            reward,
            self.gamma,
        )
    }

    /// `r(s,a) + γ·E[values(s')|s,a]`.
    pub fn backup(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.reward.get(s, a) + self.gamma * self.kernel.expect(s, a, values)
    }

    /// Full Q table for the given state values.
    pub fn q_table(&self, values: &[f64]) -> Table2<f64> {
        Table2::from_fn(self.n_states(), self.n_actions(), |s, a| self.backup(s, a, values))
    }
}

/// Stopping parameters for value iteration and policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Target sup-norm distance to the fixed point.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions {
            tol,
            ..Default::default()
        }
    }
}

/// Optimal values, action values, greedy policy and advantage of one MDP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub v_star: Vec<f64>,
    pub q_star: Table2<f64>,
    pub policy: Vec<usize>,
    pub advantage: Table2<f64>,
    pub iterations: usize,
    /// Sup-norm Bellman residual of the last value iterate.
    pub residual: f64,
}

impl Solution {
    /// Assembles a solution from a Q table: `V = max_a Q`, ties in the greedy
    /// policy resolved toward the lowest action index.
    pub fn from_q(q_star: Table2<f64>, iterations: usize, residual: f64) -> Self {
        let (ns, na) = q_star.shape();
        let mut v_star = Vec::with_capacity(ns);
        let mut policy = Vec::with_capacity(ns);
        for s in 0..ns {
            let (best, v) = argmax_first(q_star.row(s));
            v_star.push(v);
            policy.push(best);
        }
        let advantage = Table2::from_fn(ns, na, |s, a| {
            let q = q_star[(s, a)];
            if q == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                q - v_star[s]
            }
        });
        Solution {
            v_star,
            q_star,
            policy,
            advantage,
            iterations,
            residual,
        }
    }

    pub fn n_states(&self) -> usize {
        self.v_star.len()
    }

    /// Actions whose Q value is within `tie_tol` of the state maximum.
    pub fn argmax_set(&self, s: usize, tie_tol: f64) -> Vec<usize> {
        argmax_set(self.q_star.row(s), tie_tol)
    }
}

/// Index of the first maximal entry, and the maximum.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    (best, best_v)
}

/// Indices within `tie_tol` of the maximum.
pub fn argmax_set(values: &[f64], tie_tol: f64) -> Vec<usize> {
    let (_, max) = argmax_first(values);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= max - tie_tol)
        .map(|(i, _)| i)
        .collect()
}

/// Stepwise value iteration from `V ≡ 0`.
///
/// Each [`ValueIteration::step`] applies one Jacobi Bellman sweep and returns
/// the sup-norm change. Actions can be excluded with a mask; masked pairs get
/// `Q = -∞`.
pub struct ValueIteration<'a> {
    mdp: &'a Mdp,
    mask: Option<&'a Table2<bool>>,
    values: Vec<f64>,
    next: Vec<f64>,
    iterations: usize,
}

impl<'a> ValueIteration<'a> {
    pub fn new(mdp: &'a Mdp) -> Self {
        ValueIteration {
            mdp,
            mask: None,
            values: vec![0.0; mdp.n_states()],
            next: vec![0.0; mdp.n_states()],
            iterations: 0,
        }
    }

    /// Restricts the maximization to pairs where `mask` is true. Every state
    /// must keep at least one admissible action.
    pub fn with_mask(mdp: &'a Mdp, mask: &'a Table2<bool>) -> Result<Self> {
        if mask.shape() != (mdp.n_states(), mdp.n_actions()) {
            return Err(Error::Shape("action mask does not match the MDP".into()));
        }
        if let Some(s) = (0..mask.rows()).find(|&s| mask.row(s).iter().all(|&m| !m)) {
            return Err(Error::InvalidArgument(format!("state {s} has no admissible action")));
        }
        let mut vi = Self::new(mdp);
        vi.mask = Some(mask);
        Ok(vi)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn q(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        match self.mask {
            Some(m) if !m[(s, a)] => f64::NEG_INFINITY,
            _ => self.mdp.backup(s, a, values),
        }
    }

    fn state_max(&self, s: usize, values: &[f64]) -> f64 {
        (0..self.mdp.n_actions())
            .map(|a| self.q(s, a, values))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// One Bellman sweep; returns `max_s |V_new(s) - V_old(s)|`.
    pub fn step(&mut self) -> f64 {
        let mut next = std::mem::take(&mut self.next);
        {
            let values = &self.values;
            let work = self.mdp.n_states() * self.mdp.n_actions();
            if work >= PARALLEL_THRESHOLD {
                next.par_iter_mut()
                    .enumerate()
                    .for_each(|(s, out)| *out = self.state_max(s, values));
            } else {
                for (s, out) in next.iter_mut().enumerate() {
                    *out = self.state_max(s, values);
                }
            }
        }
        let delta = sup_distance(&next, &self.values);
        self.next = std::mem::replace(&mut self.values, next);
        self.iterations += 1;
        delta
    }

    /// Iterates until the a-posteriori bound `γ/(1-γ)·δ` drops to `tol`,
    /// then assembles the solution from one final backup.
    pub fn run(mut self, opts: SolveOptions) -> Result<Solution> {
        if opts.tol.is_nan() || opts.tol <= 0.0 {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", opts.tol)));
        }
        let gamma = self.mdp.gamma();
        let bound = gamma / (1.0 - gamma);
        let mut delta = f64::INFINITY;
        while self.iterations < opts.max_iter {
            delta = self.step();
            if !delta.is_finite() {
                break;
            }
            if bound * delta <= opts.tol {
                let (ns, na) = (self.mdp.n_states(), self.mdp.n_actions());
                let q = Table2::from_fn(ns, na, |s, a| self.q(s, a, &self.values));
                let sol = Solution::from_q(q, self.iterations, 0.0);
                let residual = sup_distance(&sol.v_star, &self.values);
                return Ok(Solution { residual, ..sol });
            }
        }
        Err(Error::NotConverged {
            iterations: self.iterations,
            residual: delta,
        })
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

/// Solves the Bellman optimality equation by value iteration from `V ≡ 0`.
///
/// The returned `v_star` is within `tol` of the fixed point and satisfies
/// `v_star[s] == max_a q_star[s, a]` exactly.
pub fn solve_mdp(mdp: &Mdp, opts: SolveOptions) -> Result<Solution> {
    ValueIteration::new(mdp).run(opts)
}

/// Value of a deterministic policy, within `tol` of the exact fixed point.
pub fn evaluate_policy(mdp: &Mdp, policy: &[usize], tol: f64) -> Result<Vec<f64>> {
    if policy.len() != mdp.n_states() {
        return Err(Error::Shape(format!(
            "policy has {} entries for {} states",
            policy.len(),
            mdp.n_states()
        )));
    }
    if let Some(s) = policy.iter().position(|&a| a >= mdp.n_actions()) {
        return Err(Error::Shape(format!("policy action {} out of range at state {s}", policy[s])));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let gamma = mdp.gamma();
    let bound = gamma / (1.0 - gamma);
    let mut v = vec![0.0; mdp.n_states()];
    let mut next = vec![0.0; mdp.n_states()];
    let max_iter = SolveOptions::default().max_iter;
    for _ in 0..max_iter {
        for (s, out) in next.iter_mut().enumerate() {
            *out = mdp.backup(s, policy[s], &v);
        }
        let delta = sup_distance(&next, &v);
        std::mem::swap(&mut v, &mut next);
        if bound * delta <= tol {
            return Ok(v);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// `E[values(s') | s, a]` under `kernel`.
pub fn expected_next_value(kernel: &TransitionKernel, values: &[f64], s: usize, a: usize) -> f64 {
    kernel.expect(s, a, values)
}

/// Mean of the policy value over the given initial states (a uniform
/// initial distribution on that set).
pub fn mean_return(mdp: &Mdp, policy: &[usize], initial: &[usize], tol: f64) -> Result<f64> {
    if initial.is_empty() {
        return Err(Error::InvalidArgument("initial state set is empty".into()));
    }
    let v = evaluate_policy(mdp, policy, tol)?;
    Ok(initial.iter().map(|&s| v[s]).sum::<f64>() / initial.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state(r: f64, gamma: f64) -> Mdp {
        Mdp::new(
            StateGrid::uniform(0.0, 0.0, 1).unwrap(),
            ActionGrid::from_points(vec![0.0]).unwrap(),
            TransitionKernel::dirac(1, 1, |_, _| 0).unwrap(),
            RewardTable::new(Table2::filled(1, 1, r), 0.0).unwrap(),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn geometric_series() {
        let sol = solve_mdp(&one_state(1.0, 0.5), SolveOptions::default()).unwrap();
        assert!((sol.v_star[0] - 2.0).abs() <= 1e-10);
        let v = evaluate_policy(&one_state(1.0, 0.5), &[0], 1e-12).unwrap();
        assert!((v[0] - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_reward_chain_has_zero_value() {
        let mdp = Mdp::new(
            StateGrid::uniform(0.0, 1.0, 2).unwrap(),
            ActionGrid::from_points(vec![0.0, 1.0]).unwrap(),
            TransitionKernel::dirac(2, 2, |s, _| (s + 1) % 2).unwrap(),
            RewardTable::new(Table2::filled(2, 2, 0.0), 0.0).unwrap(),
            0.9,
        )
        .unwrap();
        let sol = solve_mdp(&mdp, SolveOptions::default()).unwrap();
        assert_eq!(sol.v_star, vec![0.0, 0.0]);
        assert_eq!(sol.policy, vec![0, 0]);
        assert_eq!(sol.argmax_set(0, 0.0), vec![0, 1]);
    }

    #[test]
    fn kernel_validation() {
        assert!(TransitionKernel::from_rows(1, 1, vec![vec![(0, 0.5)]]).is_err());
        assert!(TransitionKernel::from_rows(1, 1, vec![vec![(0, 1.5), (0, -0.5)]]).is_err());
        assert!(TransitionKernel::from_rows(1, 1, vec![vec![(3, 1.0)]]).is_err());
        let k = TransitionKernel::from_rows(2, 1, vec![vec![(1, 0.25), (0, 0.5), (1, 0.25)], vec![(1, 1.0)]])
            .unwrap();
        assert_eq!(k.row(0, 0), &[(0, 0.5), (1, 0.5)]);
        assert_eq!(k.prob(0, 0, 1), 0.5);
        assert_eq!(k.prob(1, 0, 0), 0.0);
    }

    #[test]
    fn expectation_primitives() {
        let dirac = TransitionKernel::dirac(3, 1, |_, _| 2).unwrap();
        assert_eq!(expected_next_value(&dirac, &[1.0, 2.0, 7.5], 0, 0), 7.5);
        let uniform = TransitionKernel::from_dense(2, 1, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(expected_next_value(&uniform, &[0.0, 10.0], 1, 0), 5.0);
    }

    #[test]
    fn rejects_bad_discount_and_shapes() {
        let s = StateGrid::uniform(0.0, 0.0, 1).unwrap();
        let a = ActionGrid::from_points(vec![0.0]).unwrap();
        let k = TransitionKernel::dirac(1, 1, |_, _| 0).unwrap();
        let r = RewardTable::new(Table2::filled(1, 1, 0.0), 0.0).unwrap();
        assert!(Mdp::new(s.clone(), a.clone(), k.clone(), r.clone(), 1.0).is_err());
        assert!(Mdp::new(s.clone(), a.clone(), k.clone(), r.clone(), 0.0).is_err());
        let r2 = RewardTable::new(Table2::filled(1, 2, 0.0), 0.0).unwrap();
        assert!(Mdp::new(s, a, k, r2, 0.5).is_err());
        assert!(RewardTable::new(Table2::filled(1, 1, f64::NAN), 0.0).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let err = solve_mdp(
            &one_state(1.0, 0.99),
            SolveOptions {
                tol: 1e-10,
                max_iter: 5,
            },
        )
        .unwrap_err();
        match err {
            Error::NotConverged { iterations, residual } => {
                assert_eq!(iterations, 5);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn evaluate_policy_rejects_bad_indices() {
        assert!(evaluate_policy(&one_state(1.0, 0.5), &[1], 1e-9).is_err());
        assert!(evaluate_policy(&one_state(1.0, 0.5), &[0, 0], 1e-9).is_err());
    }

    #[test]
    fn mask_excludes_actions() {
        let mdp = Mdp::new(
            StateGrid::uniform(0.0, 0.0, 1).unwrap(),
            ActionGrid::from_points(vec![0.0, 1.0]).unwrap(),
            TransitionKernel::dirac(1, 2, |_, _| 0).unwrap(),
            RewardTable::new(Table2::from_vec(1, 2, vec![-1.0, 1.0]).unwrap(), 0.0).unwrap(),
            0.5,
        )
        .unwrap();
        let mask = Table2::from_vec(1, 2, vec![true, false]).unwrap();
        let sol = ValueIteration::with_mask(&mdp, &mask).unwrap().run(SolveOptions::default()).unwrap();
        assert_eq!(sol.policy, vec![0]);
        assert!((sol.v_star[0] + 2.0).abs() < 1e-10);
        assert_eq!(sol.q_star[(0, 1)], f64::NEG_INFINITY);
        let none = Table2::filled(1, 2, false);
        assert!(ValueIteration::with_mask(&mdp, &none).is_err());
    }
}
