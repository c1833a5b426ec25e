//! Decision-oriented model construction.
//!
//! [`synthesize_model`] solves, pair by pair, for a deterministic prediction
//! `f(s,a)` inside the support of the true transition such that
//!
//! ```text
//! V*(f(s,a)) = E[V*(s') | s, a] + Δ
//! ```
//!
//! with `V*` interpolated linearly between grid points. Any such model has a
//! constant Δ-residual and therefore the same greedy policy as the true MDP.
//! Whether a solution exists, and whether it is continuous, depends on Δ;
//! [`sweep_delta`] maps that out.
//!
//! [`constrained_fit`] and [`fine_tune`] work with low-dimensional parametric
//! families instead: the first trades data fit against the residual
//! condition, the second searches parameters directly for closed-loop return.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Pair, Result};
use crate::grid::StateGrid;
use crate::mdp::{evaluate_policy, Mdp, Solution, SolveOptions, TransitionKernel, ValueIteration};
use crate::models::{induced_mdp_like, DeterministicModel, PredictiveModel, TransitionDataset};
use crate::optimality::{self, DEFAULT_TIE_TOL};
use crate::table::Table2;

/// Relative tolerance under which a grid node counts as an exact root.
const NODE_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    /// States on which definedness, continuity and agreement are judged.
    /// `None` uses every state.
    pub region: Option<Vec<usize>>,
    /// Largest jump still called continuous. `None` means three state cells.
    pub jump_tol: Option<f64>,
    pub tie_tol: f64,
    /// Tolerance of the model-based solve used for agreement.
    pub solve_tol: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            region: None,
            jump_tol: None,
            tie_tol: DEFAULT_TIE_TOL,
            solve_tol: 1e-10,
        }
    }
}

impl SynthesisOptions {
    pub fn with_region(region: Vec<usize>) -> Self {
        SynthesisOptions {
            region: Some(region),
            ..Default::default()
        }
    }

    fn region_states(&self, n_states: usize) -> Vec<usize> {
        match &self.region {
            Some(r) => r.clone(),
            None => (0..n_states).collect(),
        }
    }

    fn jump_tol(&self, states: &StateGrid) -> f64 {
        self.jump_tol.unwrap_or(3.0 * states.spacing())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisDiagnostics {
    /// Every pair without a root, region or not.
    pub undefined_pairs: Vec<Pair>,
    /// Undefined pairs whose state lies in the region.
    pub region_undefined: usize,
    /// Per action, largest `|f(s_{i+1},a) - f(s_i,a)|` over adjacent region
    /// states where both are defined.
    pub max_jump_per_action: Vec<f64>,
    /// Largest jump of `f` between consecutive defined region pairs ordered
    /// by their true kernel mean.
    pub max_jump: f64,
    pub jump_tol: f64,
    pub continuous: bool,
    /// Defined predictions outside the convex hull of the true support.
    pub support_violations: usize,
}

/// Root of `V*_interp(x) = target` on `[p[k0], p[k1]]` closest to `mean`.
fn solve_pair(states: &StateGrid, v: &[f64], k0: usize, k1: usize, target: f64, mean: f64) -> Option<f64> {
    let p = states.points();
    let scale = target.abs().max(1.0);
    let g = |k: usize| v[k] - target;
    let mut best: Option<f64> = None;
    let mut consider = |x: f64| {
        best = match best {
            None => Some(x),
            Some(b) => {
                let (db, dx) = ((b - mean).abs(), (x - mean).abs());
                if dx < db || (dx == db && x < b) {
                    Some(x)
                } else {
                    Some(b)
                }
            }
        }
    };
    for k in k0..=k1 {
        let gk = g(k);
        if gk.abs() <= NODE_ROOT_TOL * scale {
            consider(p[k]);
            continue;
        }
        if k < k1 {
            let gn = g(k + 1);
            if gn.abs() > NODE_ROOT_TOL * scale && (gk < 0.0) != (gn < 0.0) {
                // V* is linear on the segment: the crossing is exact
                let t = gk / (gk - gn);
                consider(p[k] + t * (p[k + 1] - p[k]));
            }
        }
    }
    best
}

fn per_action_jumps(model: &DeterministicModel, region: &[usize]) -> Vec<f64> {
    let na = model.shape().1;
    (0..na)
        .map(|a| {
            region
                .windows(2)
                .filter(|w| w[1] == w[0] + 1)
                .filter_map(|w| Some((model.get(w[1], a)? - model.get(w[0], a)?).abs()))
                .fold(0.0, f64::max)
        })
        .collect()
}

fn mean_ordered_jump(true_mdp: &Mdp, model: &DeterministicModel, region: &[usize]) -> f64 {
    let mut pts: Vec<(f64, usize, usize, f64)> = Vec::new();
    for &s in region {
        for a in 0..true_mdp.n_actions() {
            if let Some(f) = model.get(s, a) {
                pts.push((true_mdp.kernel().mean(s, a, true_mdp.states()), s, a, f));
            }
        }
    }
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    pts.windows(2).map(|w| (w[1].3 - w[0].3).abs()).fold(0.0, f64::max)
}

/// Deterministic model with constant Δ-residual, where it exists.
pub fn synthesize_model(
    true_mdp: &Mdp,
    true_solution: &Solution,
    delta: f64,
    opts: &SynthesisOptions,
) -> Result<(DeterministicModel, SynthesisDiagnostics)> {
    let (ns, na) = (true_mdp.n_states(), true_mdp.n_actions());
    if true_solution.n_states() != ns {
        return Err(Error::Shape("solution does not match the MDP".into()));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("delta must be finite, got {delta}")));
    }
    let states = true_mdp.states();
    let kernel = true_mdp.kernel();
    let v = &true_solution.v_star;
    let cells: Vec<Option<f64>> = (0..ns * na)
        .into_par_iter()
        .map(|i| {
            let (s, a) = (i / na, i % na);
            let row = kernel.row(s, a);
            let (k0, k1) = (row[0].0, row[row.len() - 1].0);
            let target = kernel.expect(s, a, v) + delta;
            solve_pair(states, v, k0, k1, target, kernel.mean(s, a, states))
        })
        .collect();
    let model = DeterministicModel::from_fn(states, na, |s, a| cells[s * na + a])?;

    let region = opts.region_states(ns);
    let undefined_pairs = model.undefined_pairs();
    let in_region = {
        let mut mark = vec![false; ns];
        for &s in &region {
            mark[s] = true;
        }
        mark
    };
    let region_undefined = undefined_pairs.iter().filter(|(s, _)| in_region[*s]).count();
    let support_violations = (0..ns * na)
        .filter(|&i| {
            let (s, a) = (i / na, i % na);
            let row = kernel.row(s, a);
            let (lo, hi) = (states.points()[row[0].0], states.points()[row[row.len() - 1].0]);
            model.get(s, a).is_some_and(|f| f < lo || f > hi)
        })
        .count();
    let max_jump = mean_ordered_jump(true_mdp, &model, &region);
    let jump_tol = opts.jump_tol(states);
    let diagnostics = SynthesisDiagnostics {
        region_undefined,
        max_jump_per_action: per_action_jumps(&model, &region),
        continuous: region_undefined == 0 && max_jump <= jump_tol,
        max_jump,
        jump_tol,
        support_violations,
        undefined_pairs,
    };
    Ok((model, diagnostics))
}

/// Kernel that spreads each deterministic prediction over its two
/// neighbouring grid points with linear-interpolation weights, so that
/// `E[V(ŝ')] = V_interp(f(s,a))`. Undefined pairs get a placeholder row.
pub fn interpolated_kernel(model: &DeterministicModel, states: &StateGrid) -> Result<TransitionKernel> {
    let (ns, na) = model.shape();
    if ns != states.len() {
        return Err(Error::Shape("model does not match the state grid".into()));
    }
    let rows = (0..ns * na)
        .map(|i| match model.get(i / na, i % na) {
            None => vec![(i / na, 1.0)],
            Some(x) => {
                let (k, t) = states.locate(x);
                if t == 0.0 || ns == 1 {
                    vec![(k, 1.0)]
                } else {
                    vec![(k, 1.0 - t), (k + 1, t)]
                }
            }
        })
        .collect();
    TransitionKernel::from_rows(ns, na, rows)
}

/// Solves the model-based problem for a (possibly partial) deterministic
/// model, with undefined pairs excluded from the maximization. States
/// without any defined action keep all actions.
pub fn interpolated_model_solution(true_mdp: &Mdp, model: &DeterministicModel, tol: f64) -> Result<(Mdp, Solution)> {
    let model_mdp = true_mdp.with_kernel(interpolated_kernel(model, true_mdp.states())?)?;
    let defined = model.defined();
    let mask = Table2::from_fn(defined.rows(), defined.cols(), |s, a| {
        defined[(s, a)] || defined.row(s).iter().all(|&d| !d)
    });
    let solution = ValueIteration::with_mask(&model_mdp, &mask)?.run(SolveOptions::with_tol(tol))?;
    Ok((model_mdp, solution))
}

/// One line of a Δ sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub undefined_count: usize,
    pub max_jump: f64,
    pub continuous: bool,
    pub agreement_fraction: f64,
}

/// Synthesizes a model for every Δ and measures how its model-based policy
/// agrees with the true one on the region.
pub fn sweep_delta(true_mdp: &Mdp, true_solution: &Solution, deltas: &[f64], opts: &SynthesisOptions) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("delta list is empty".into()));
    }
    let region = opts.region_states(true_mdp.n_states());
    deltas
        .par_iter()
        .map(|&delta| {
            let (model, diag) = synthesize_model(true_mdp, true_solution, delta, opts)?;
            let (_, model_solution) = interpolated_model_solution(true_mdp, &model, opts.solve_tol)?;
            let flags = optimality::argmax_agreement(true_solution, &model_solution, &region, opts.tie_tol);
            Ok(SweepRow {
                delta,
                undefined_count: diag.region_undefined,
                max_jump: diag.max_jump,
                continuous: diag.continuous,
                agreement_fraction: optimality::agreement_fraction(&flags),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parametric families of deterministic models, clamped to the state domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFamily {
    /// `θ0·s + θ1·a + θ2`
    Affine,
    /// `θ0·s + θ1·a + θ2 + θ3·max(0, s - breakpoint)`
    PiecewiseAffine { breakpoint: f64 },
}

impl ModelFamily {
    pub fn dim(&self) -> usize {
        match self {
            ModelFamily::Affine => 3,
            ModelFamily::PiecewiseAffine { .. } => 4,
        }
    }

    fn features(&self, s: f64, a: f64) -> Vec<f64> {
        match *self {
            ModelFamily::Affine => vec![s, a, 1.0],
            ModelFamily::PiecewiseAffine { breakpoint } => vec![s, a, 1.0, (s - breakpoint).max(0.0)],
        }
    }

    fn raw(&self, theta: &[f64], s: f64, a: f64) -> f64 {
        self.features(s, a).iter().zip(theta).map(|(x, t)| x * t).sum()
    }

    /// Parameters of `f = s + a`.
    pub fn identity_theta(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.dim()];
        t[0] = 1.0;
        t[1] = 1.0;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParametricModel {
    pub family: ModelFamily,
    pub theta: Vec<f64>,
}

impl ParametricModel {
    pub fn new(family: ModelFamily, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != family.dim() {
            return Err(Error::Shape(format!(
                "family takes {} parameters, got {}",
                family.dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(ParametricModel { family, theta })
    }

    pub fn eval(&self, states: &StateGrid, s: f64, a: f64) -> f64 {
        self.family.raw(&self.theta, s, a).clamp(states.lo(), states.hi())
    }

    /// The model on the grid of `mdp`; defined everywhere.
    pub fn to_model(&self, mdp: &Mdp) -> Result<DeterministicModel> {
        let (states, actions) = (mdp.states(), mdp.actions());
        DeterministicModel::from_fn(states, actions.len(), |i, j| {
            Some(self.eval(states, states.points()[i], actions.points()[j]))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub penalty_weight: f64,
    /// Penalize deviation from the field mean instead of from zero.
    pub delta_free: bool,
    /// States whose pairs enter the penalty; `None` uses all states.
    pub region: Option<Vec<usize>>,
    /// Coordinate-descent passes.
    pub sweeps: usize,
    pub initial_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            penalty_weight: 0.0,
            delta_free: true,
            region: None,
            sweeps: 200,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub data_loss: f64,
    pub penalty: f64,
    pub total: f64,
    /// Max minus min of the Δ-residual over the penalized pairs.
    pub residual_spread: f64,
    /// Mean squared deviation of the residual from its mean, whatever the
    /// penalty centre.
    pub residual_variance: f64,
    pub least_squares_theta: Vec<f64>,
    pub sweeps: usize,
}

/// Per-pair successor statistics (Welford accumulation, so the
/// within-pair scatter stays exactly non-negative).
struct PairStats {
    count: f64,
    mean: f64,
    m2: f64,
}

struct FitProblem<'a> {
    mdp: &'a Mdp,
    v_star: &'a [f64],
    family: ModelFamily,
    stats: Vec<PairStats>,
    total: f64,
    penalty_pairs: Vec<(usize, usize, f64)>,
    weight: f64,
    delta_free: bool,
}

impl FitProblem<'_> {
    fn f(&self, theta: &[f64], s: usize, a: usize) -> f64 {
        let states = self.mdp.states();
        self.family
            .raw(theta, states.points()[s], self.mdp.actions().points()[a])
            .clamp(states.lo(), states.hi())
    }

    fn data_loss(&self, theta: &[f64]) -> f64 {
        let na = self.mdp.n_actions();
        let sse: f64 = self
            .stats
            .iter()
            .enumerate()
            .filter(|(_, st)| st.count > 0.0)
            .map(|(i, st)| {
                let f = self.f(theta, i / na, i % na);
                st.count * (f - st.mean).powi(2) + st.m2
            })
            .sum();
        sse / self.total
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        let states = self.mdp.states();
        self.penalty_pairs
            .iter()
            .map(|&(s, a, ev)| states.interpolate(self.v_star, self.f(theta, s, a)) - ev)
            .collect()
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        let r = self.residuals(theta);
        if r.is_empty() {
            return 0.0;
        }
        let center = if self.delta_free {
            r.iter().sum::<f64>() / r.len() as f64
        } else {
            0.0
        };
        r.iter().map(|x| (x - center).powi(2)).sum::<f64>() / r.len() as f64
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let data = self.data_loss(theta);
        if self.weight == 0.0 {
            data
        } else {
            data + self.weight * self.penalty(theta)
        }
    }

    fn least_squares(&self) -> Result<Vec<f64>> {
        let dim = self.family.dim();
        let na = self.mdp.n_actions();
        let (states, actions) = (self.mdp.states(), self.mdp.actions());
        let mut ata = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut atb = nalgebra::DVector::<f64>::zeros(dim);
        for (i, st) in self.stats.iter().enumerate().filter(|(_, st)| st.count > 0.0) {
            let phi = self
                .family
                .features(states.points()[i / na], actions.points()[i % na]);
            for r in 0..dim {
                atb[r] += phi[r] * st.count * st.mean;
                for c in 0..dim {
                    ata[(r, c)] += st.count * phi[r] * phi[c];
                }
            }
        }
        let theta = ata
            .lu()
            .solve(&atb)
            .ok_or_else(|| Error::InvalidArgument("least-squares system is singular".into()))?;
        Ok(theta.iter().copied().collect())
    }
}

/// Fits a parametric model to data while penalizing a non-constant
/// Δ-residual. Starts from the unclamped least-squares solution and runs
/// deterministic coordinate descent with a halving step.
pub fn constrained_fit(
    dataset: &TransitionDataset,
    true_mdp: &Mdp,
    true_solution: &Solution,
    family: ModelFamily,
    opts: &FitOptions,
) -> Result<(ParametricModel, FitReport)> {
    if !opts.penalty_weight.is_finite() || opts.penalty_weight < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "penalty weight must be finite and non-negative, got {}",
            opts.penalty_weight
        )));
    }
    let (ns, na) = (true_mdp.n_states(), true_mdp.n_actions());
    if dataset.n_states() != ns || dataset.n_actions() != na || true_solution.n_states() != ns {
        return Err(Error::Shape("dataset, MDP and solution differ in size".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let points = true_mdp.states().points();
    let mut stats: Vec<PairStats> = (0..ns * na)
        .map(|_| PairStats {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        })
        .collect();
    for r in dataset.records() {
        let st = &mut stats[r.state * na + r.action];
        let x = points[r.next];
        st.count += 1.0;
        let d = x - st.mean;
        st.mean += d / st.count;
        st.m2 += d * (x - st.mean);
    }
    let region: Vec<usize> = match &opts.region {
        Some(r) => r.clone(),
        None => (0..ns).collect(),
    };
    let v = &true_solution.v_star;
    let penalty_pairs = region
        .iter()
        .flat_map(|&s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| (s, a, true_mdp.kernel().expect(s, a, v)))
        .collect();
    let problem = FitProblem {
        mdp: true_mdp,
        v_star: v,
        family,
        stats,
        total: dataset.len() as f64,
        penalty_pairs,
        weight: opts.penalty_weight,
        delta_free: opts.delta_free,
    };

    let ls = problem.least_squares()?;
    let mut theta = ls.clone();
    let mut best = problem.objective(&theta);
    let mut step = opts.initial_step;
    let mut sweeps = 0;
    while sweeps < opts.sweeps && step > 1e-10 {
        sweeps += 1;
        let mut improved = false;
        for k in 0..theta.len() {
            for sign in [1.0, -1.0] {
                let mut cand = theta.clone();
                cand[k] += sign * step;
                let value = problem.objective(&cand);
                if value < best {
                    best = value;
                    theta = cand;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    let data_loss = problem.data_loss(&theta);
    let penalty = problem.penalty(&theta);
    let total = data_loss + opts.penalty_weight * penalty;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(theta));
    }
    let residuals = problem.residuals(&theta);
    let residual_spread = crate::table::spread(residuals.iter().copied());
    let residual_variance = if residuals.is_empty() {
        0.0
    } else {
        let m = residuals.iter().sum::<f64>() / residuals.len() as f64;
        residuals.iter().map(|r| (r - m).powi(2)).sum::<f64>() / residuals.len() as f64
    };
    let model = ParametricModel::new(family, theta)?;
    Ok((
        model,
        FitReport {
            data_loss,
            penalty,
            total,
            residual_spread,
            residual_variance,
            least_squares_theta: ls,
            sweeps,
        },
    ))
}

/// What [`fine_tune`] maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneObjective {
    /// Mean true-system value of the model-greedy policy over the region.
    ClosedLoop,
    /// Negative mean squared gap between true and model Q* over the region.
    QMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOptions {
    pub objective: TuneObjective,
    /// Initial states of the return average; `None` uses all states.
    pub region: Option<Vec<usize>>,
    pub initial_step: f64,
    pub min_step: f64,
    pub solve_tol: f64,
    /// Required gain for a move to be accepted; keeps ties between equally
    /// good policies from being taken as progress.
    pub accept_margin: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            objective: TuneObjective::ClosedLoop,
            region: None,
            initial_step: 0.05,
            min_step: 1e-6,
            solve_tol: 1e-8,
            accept_margin: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub model: ParametricModel,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Accepted iterates, starting with the initial parameters.
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
}

struct TuneProblem<'a> {
    mdp: &'a Mdp,
    family: ModelFamily,
    region: Vec<usize>,
    opts: &'a TuneOptions,
    true_solution: Option<Solution>,
}

impl TuneProblem<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        let model = ParametricModel::new(self.family, theta.to_vec())?.to_model(self.mdp)?;
        let model_mdp = induced_mdp_like(&PredictiveModel::Deterministic(model), self.mdp)?;
        let model_solution = crate::mdp::solve_mdp(&model_mdp, SolveOptions::with_tol(self.opts.solve_tol))?;
        let n = self.region.len() as f64;
        match self.opts.objective {
            TuneObjective::ClosedLoop => {
                let v = evaluate_policy(self.mdp, &model_solution.policy, self.opts.solve_tol)?;
                Ok(self.region.iter().map(|&s| v[s]).sum::<f64>() / n)
            }
            TuneObjective::QMatch => {
                let q = &self.true_solution.as_ref().expect("true solution for q matching").q_star;
                let na = self.mdp.n_actions();
                let sq: f64 = self
                    .region
                    .iter()
                    .flat_map(|&s| (0..na).map(move |a| (s, a)))
                    .map(|p| (q[p] - model_solution.q_star[p]).powi(2))
                    .sum();
                Ok(-sq / (n * na as f64))
            }
        }
    }
}

/// Pattern search over `θ` maximizing the chosen objective.
///
/// Each budget unit evaluates the `2·dim` neighbours `θ ± step·e_k`; the best
/// one is accepted if it improves on the incumbent by more than
/// `accept_margin`, otherwise the step is halved.
/// Stops early once the step falls below `min_step`.
pub fn fine_tune(
    family: ModelFamily,
    theta0: Vec<f64>,
    true_mdp: &Mdp,
    budget: usize,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let region = match &opts.region {
        Some(r) if r.is_empty() => return Err(Error::InvalidArgument("empty region".into())),
        Some(r) => r.clone(),
        None => (0..true_mdp.n_states()).collect(),
    };
    let true_solution = match opts.objective {
        TuneObjective::QMatch => Some(crate::mdp::solve_mdp(true_mdp, SolveOptions::with_tol(opts.solve_tol))?),
        TuneObjective::ClosedLoop => None,
    };
    let problem = TuneProblem {
        mdp: true_mdp,
        family,
        region,
        opts,
        true_solution,
    };
    let mut theta = ParametricModel::new(family, theta0)?.theta;
    let mut best = problem.value(&theta)?;
    let initial_objective = best;
    let mut step = opts.initial_step;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        theta: theta.clone(),
        objective: best,
        step,
    }];
    let mut iterations = 0;
    while iterations < budget && step >= opts.min_step {
        iterations += 1;
        let candidates: Vec<Vec<f64>> = (0..theta.len())
            .flat_map(|k| [1.0, -1.0].map(|sign| (k, sign)))
            .map(|(k, sign)| {
                let mut t = theta.clone();
                t[k] += sign * step;
                t
            })
            .collect();
        let values: Vec<f64> = candidates
            .par_iter()
            .map(|t| problem.value(t))
            .collect::<Result<_>>()?;
        let mut pick: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if v > best + opts.accept_margin && pick.is_none_or(|p| v > values[p]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => {
                best = values[i];
                theta = candidates[i].clone();
                trace.push(TraceEntry {
                    iteration: iterations,
                    theta: theta.clone(),
                    objective: best,
                    step,
                });
            }
            None => step /= 2.0,
        }
    }
    Ok(TuneResult {
        model: ParametricModel::new(family, theta)?,
        initial_objective,
        final_objective: best,
        trace,
        iterations,
    })
}
