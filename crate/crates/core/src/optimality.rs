//! Optimality audit of a predictive model against the true MDP.
//!
//! The checks work on the disadvantage `D = -A = V - Q ≥ 0`:
//!
//! * the Δ-residual `E_model[V*(ŝ')] - E_true[V*(s')]` whose constancy over
//!   all pairs is sufficient for the model-based policy to be optimal;
//! * storage matching `λ = V* - V̂*`, which shifts the model values onto the
//!   true ones without touching the model's greedy policy;
//! * the comparison-function sandwich between `D*` and `D̂*`, built
//!   constructively as
//!
//! ```text
//! α₀(x) = min { D̂(s,a) : D(s,a) ≥ x }          for x ≤ max D
//! α₀(x) = α₀(max D) + x - max D                  beyond
//! ```
//!
//!   which is positive for all `x > 0` exactly when every model-greedy action
//!   is a true-greedy action. Running it on both orderings of the pair
//!   decides whether the two argmax sets coincide.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Solution};
use crate::models::PredictiveModel;
use crate::table::Table2;

/// Q values within this distance of the state maximum count as greedy.
pub const DEFAULT_TIE_TOL: f64 = 1e-9;

/// `E_model[V*(ŝ') | s, a] - E_true[V*(s') | s, a]` for every pair.
///
/// For deterministic models the model term is `V*` interpolated linearly at
/// `f(s, a)`.
pub fn delta_residual(true_mdp: &Mdp, true_solution: &Solution, model: &PredictiveModel) -> Result<Table2<f64>> {
    let (ns, na) = (true_mdp.n_states(), true_mdp.n_actions());
    if true_solution.n_states() != ns {
        return Err(Error::Shape("solution does not match the MDP".into()));
    }
    let v = &true_solution.v_star;
    let kernel = true_mdp.kernel();
    match model {
        PredictiveModel::Deterministic(m) => {
            if m.shape() != (ns, na) {
                return Err(Error::Shape("model does not match the MDP".into()));
            }
            let missing = m.undefined_pairs();
            if !missing.is_empty() {
                return Err(Error::UndefinedModel(missing));
            }
            let states = true_mdp.states();
            Ok(Table2::from_fn(ns, na, |s, a| {
                states.interpolate(v, m.values()[(s, a)]) - kernel.expect(s, a, v)
            }))
        }
        PredictiveModel::Stochastic(m) => {
            if m.kernel.n_states() != ns || m.kernel.n_actions() != na {
                return Err(Error::Shape("model kernel does not match the MDP".into()));
            }
            Ok(Table2::from_fn(ns, na, |s, a| m.kernel.expect(s, a, v) - kernel.expect(s, a, v)))
        }
    }
}

/// Storage function `λ(s)` and its pair form `Λ(s,a) = λ(s) - γ·E_model[λ(ŝ')]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageField {
    pub lambda: Vec<f64>,
    pub big_lambda: Table2<f64>,
}

impl StorageField {
    /// `Λ` for an arbitrary `λ` under the model kernel of `model_mdp`.
    pub fn from_lambda(model_mdp: &Mdp, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != model_mdp.n_states() {
            return Err(Error::Shape("storage function does not match the MDP".into()));
        }
        let g = model_mdp.gamma();
        let big_lambda = Table2::from_fn(model_mdp.n_states(), model_mdp.n_actions(), |s, a| {
            lambda[s] - g * model_mdp.kernel().expect(s, a, &lambda)
        });
        Ok(StorageField { lambda, big_lambda })
    }

    /// `V̂* + λ`.
    pub fn modified_values(&self, model_solution: &Solution) -> Vec<f64> {
        model_solution
            .v_star
            .iter()
            .zip(&self.lambda)
            .map(|(v, l)| v + l)
            .collect()
    }

    /// `sup |(V̂* + λ) - V*|`.
    pub fn value_gap(&self, true_solution: &Solution, model_solution: &Solution) -> f64 {
        self.modified_values(model_solution)
            .iter()
            .zip(&true_solution.v_star)
            .map(|(m, t)| (m - t).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of the modified Bellman identity
    /// `Q̂*(s,a) + λ(s) = r(s,a) + Λ(s,a) + γ·E_model[(V̂* + λ)(ŝ')]`.
    pub fn bellman_identity_residual(&self, model_mdp: &Mdp, model_solution: &Solution) -> f64 {
        let modified = self.modified_values(model_solution);
        let g = model_mdp.gamma();
        let mut worst = 0.0f64;
        for s in 0..model_mdp.n_states() {
            for a in 0..model_mdp.n_actions() {
                let lhs = model_solution.q_star[(s, a)] + self.lambda[s];
                let rhs = model_mdp.reward().get(s, a)
                    + self.big_lambda[(s, a)]
                    + g * model_mdp.kernel().expect(s, a, &modified);
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }
}

/// `λ = V* - V̂*`, the storage function that makes the modified model values
/// match the true ones.
pub fn storage_matching(true_solution: &Solution, model_mdp: &Mdp, model_solution: &Solution) -> Result<StorageField> {
    if true_solution.n_states() != model_solution.n_states() || model_solution.n_states() != model_mdp.n_states() {
        return Err(Error::Shape("solutions and model MDP differ in size".into()));
    }
    let lambda = true_solution
        .v_star
        .iter()
        .zip(&model_solution.v_star)
        .map(|(t, m)| t - m)
        .collect();
    StorageField::from_lambda(model_mdp, lambda)
}

/// `D = V - Q`, with entries up to `tie_tol` snapped to zero. Excluded
/// actions (`Q = -∞`) get `D = +∞`.
pub fn disadvantage(solution: &Solution, tie_tol: f64) -> Table2<f64> {
    solution.advantage.map(|&adv| {
        let d = -adv;
        if d <= tie_tol {
            0.0
        } else {
            d
        }
    })
}

/// Tabulated comparison function built from a pair of disadvantage tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alpha0 {
    /// Sorted distinct values of the reference disadvantage (first is 0).
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    /// `α₀(x) > 0` for every tabulated `x > 0`.
    pub feasible: bool,
}

impl Alpha0 {
    /// Evaluates the step function on `[0, max]` and its unit-slope extension
    /// beyond.
    pub fn eval(&self, x: f64) -> f64 {
        let last = self.breakpoints.len() - 1;
        let max = self.breakpoints[last];
        if x > max {
            return self.values[last] + x - max;
        }
        // smallest breakpoint ≥ x has the same feasible set as x
        let k = self.breakpoints.partition_point(|&b| b < x);
        self.values[k]
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// `α₀(x) = min { d_model(s,a) : d_true(s,a) ≥ x }` at every distinct value of
/// `d_true`.
pub fn alpha0_construct(d_true: &Table2<f64>, d_model: &Table2<f64>) -> Result<Alpha0> {
    if d_true.shape() != d_model.shape() {
        return Err(Error::Shape("disadvantage tables differ in shape".into()));
    }
    let mut pairs: Vec<(f64, f64)> = d_true
        .as_slice()
        .iter()
        .copied()
        .zip(d_model.as_slice().iter().copied())
        .collect();
    if pairs.is_empty() {
        return Err(Error::Shape("empty disadvantage tables".into()));
    }
    if pairs.iter().any(|&(t, m)| t.is_nan() || m.is_nan() || t < 0.0 || m < 0.0) {
        return Err(Error::InvalidArgument("disadvantages must be non-negative".into()));
    }
    // descending in d_true; running minimum of d_model over the suffix
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    let mut running = f64::INFINITY;
    let mut i = 0;
    while i < pairs.len() {
        let level = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == level {
            running = running.min(pairs[i].1);
            i += 1;
        }
        breakpoints.push(level);
        values.push(running);
    }
    breakpoints.reverse();
    values.reverse();
    if breakpoints[0] > 0.0 {
        // every state has a zero-disadvantage action, so 0 is normally
        // present; keep α₀(0) = 0 regardless
        breakpoints.insert(0, 0.0);
        values.insert(0, 0.0);
    }
    let feasible = breakpoints
        .iter()
        .zip(&values)
        .all(|(&x, &v)| x <= 0.0 || v > 0.0);
    Ok(Alpha0 {
        breakpoints,
        values,
        feasible,
    })
}

/// Both sides of the sandwich between the true and model disadvantages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichCheck {
    /// Lower bound `D̂ ≥ α(D)`: model-greedy ⊆ true-greedy.
    pub alpha: Alpha0,
    /// Reflected upper bound `D ≥ β̃(D̂)`: true-greedy ⊆ model-greedy.
    pub beta: Alpha0,
    pub holds: bool,
}

pub fn check_sandwich(true_solution: &Solution, model_solution: &Solution, tie_tol: f64) -> Result<SandwichCheck> {
    let d_true = disadvantage(true_solution, tie_tol);
    let d_model = disadvantage(model_solution, tie_tol);
    let alpha = alpha0_construct(&d_true, &d_model)?;
    let beta = alpha0_construct(&d_model, &d_true)?;
    let holds = alpha.feasible && beta.feasible;
    Ok(SandwichCheck { alpha, beta, holds })
}

/// Per state in `states`: is the model's greedy action a true-greedy action?
pub fn argmax_agreement(true_solution: &Solution, model_solution: &Solution, states: &[usize], tie_tol: f64) -> Vec<bool> {
    states
        .iter()
        .map(|&s| {
            let a = model_solution.policy[s];
            true_solution.advantage[(s, a)] >= -tie_tol
        })
        .collect()
}

pub fn agreement_fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return f64::NAN;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Marks the states from which `|E[V̂*(ŝ_k)]| ≤ bound` for every `k < horizon`
/// along model rollouts under `policy`.
pub fn omega_check(model_mdp: &Mdp, model_values: &[f64], policy: &[usize], horizon: usize, bound: f64) -> Result<Vec<bool>> {
    let ns = model_mdp.n_states();
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if model_values.len() != ns || policy.len() != ns {
        return Err(Error::Shape("values or policy do not match the MDP".into()));
    }
    if policy.iter().any(|&a| a >= model_mdp.n_actions()) {
        return Err(Error::Shape("policy action out of range".into()));
    }
    // u_k(s) = E[V̂*(ŝ_k) | ŝ_0 = s]
    let mut u = model_values.to_vec();
    let mut inside: Vec<bool> = u.iter().map(|v| v.abs() <= bound).collect();
    for _ in 1..horizon {
        u = (0..ns)
            .map(|s| model_mdp.kernel().expect(s, policy[s], &u))
            .collect();
        for (flag, v) in inside.iter_mut().zip(&u) {
            *flag &= v.abs() <= bound;
        }
    }
    Ok(inside)
}

/// Full audit of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    #[serde(skip)]
    pub delta_field: Table2<f64>,
    pub delta_spread: f64,
    /// Indices of the audited states, parallel to `argmax_agreement`.
    pub states: Vec<usize>,
    pub argmax_agreement: Vec<bool>,
    pub agreement_fraction: f64,
    pub alpha0: Alpha0,
    pub beta: Alpha0,
    pub sandwich_holds: bool,
    pub value_gap: f64,
    pub bellman_identity_residual: f64,
}

impl ConditionReport {
    /// Scalar verdicts for JSON output.
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            delta_spread: self.delta_spread,
            agreement_fraction: self.agreement_fraction,
            sandwich_holds: self.sandwich_holds,
            value_gap: self.value_gap,
            alpha_feasible: self.alpha0.feasible,
            beta_feasible: self.beta.feasible,
            bellman_identity_residual: self.bellman_identity_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub delta_spread: f64,
    pub agreement_fraction: f64,
    pub sandwich_holds: bool,
    pub value_gap: f64,
    pub alpha_feasible: bool,
    pub beta_feasible: bool,
    pub bellman_identity_residual: f64,
}

/// Inputs of [`audit`] describing the model side.
pub struct ModelUnderAudit<'a> {
    pub model: &'a PredictiveModel,
    /// MDP the model solution was computed on (used for the storage algebra).
    pub model_mdp: &'a Mdp,
    pub model_solution: &'a Solution,
}

pub fn audit(
    true_mdp: &Mdp,
    true_solution: &Solution,
    model: ModelUnderAudit<'_>,
    states: &[usize],
    tie_tol: f64,
) -> Result<ConditionReport> {
    let delta_field = delta_residual(true_mdp, true_solution, model.model)?;
    let storage = storage_matching(true_solution, model.model_mdp, model.model_solution)?;
    let sandwich = check_sandwich(true_solution, model.model_solution, tie_tol)?;
    let agreement = argmax_agreement(true_solution, model.model_solution, states, tie_tol);
    Ok(ConditionReport {
        delta_spread: delta_field.spread(),
        delta_field,
        states: states.to_vec(),
        agreement_fraction: agreement_fraction(&agreement),
        argmax_agreement: agreement,
        alpha0: sandwich.alpha,
        beta: sandwich.beta,
        sandwich_holds: sandwich.holds,
        value_gap: storage.value_gap(true_solution, model.model_solution),
        bellman_identity_residual: storage.bellman_identity_residual(model.model_mdp, model.model_solution),
    })
}
