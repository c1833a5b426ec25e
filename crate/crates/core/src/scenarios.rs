//! Reference problems: the two battery-storage cases, a scalar LQR with its
//! discounted Riccati solution, and seeded random MDPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ActionGrid, StateGrid};
use crate::mdp::{Mdp, RewardTable, TransitionKernel};
use crate::models::{self, DeterministicModel, FitSource};
use crate::table::Table2;

/// Out-of-bounds penalty per unit distance from `[0, 1]`.
pub const BATTERY_PENALTY: f64 = 100.0;
pub const BATTERY_GAMMA: f64 = 0.99;
pub const BATTERY_ACTION_BOUND: f64 = 0.25;
pub const RANDOM_GAMMA: f64 = 0.9;
pub const RANDOM_MAX_STATES: usize = 12;
pub const RANDOM_MAX_ACTIONS: usize = 5;

/// A named MDP together with its expected-value model.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub name: String,
    pub mdp: Mdp,
    pub nominal_model: DeterministicModel,
    pub closed_form: Option<LqrClosedForm>,
    /// State interval where policies are compared and returns are averaged.
    pub region: (f64, f64),
}

impl ScenarioBundle {
    /// Grid indices of the states inside [`ScenarioBundle::region`].
    pub fn region_states(&self) -> Vec<usize> {
        self.mdp.states().indices_within(self.region.0, self.region.1)
    }
}

/// Resolution of the battery grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatteryGrid {
    pub states: usize,
    pub actions: usize,
    pub noise_nodes: usize,
}

impl Default for BatteryGrid {
    fn default() -> Self {
        BatteryGrid {
            states: 201,
            actions: 51,
            noise_nodes: 33,
        }
    }
}

impl BatteryGrid {
    fn validate(&self) -> Result<()> {
        if self.states < 3 || self.actions < 3 || self.noise_nodes < 3 {
            return Err(Error::InvalidArgument(format!(
                "battery grids need at least 3 states, actions and noise nodes, got {:?}",
                self
            )));
        }
        if self.noise_nodes.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "noise node count must be odd, got {}",
                self.noise_nodes
            )));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian density evaluated at `nodes` evenly spaced offsets on
/// `[-half_width, half_width]`, renormalized to a pmf of `(offset, mass)`.
pub fn truncated_gaussian_pmf(sigma: f64, half_width: f64, nodes: usize) -> Result<Vec<(f64, f64)>> {
    if nodes == 0 || nodes.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("noise node count must be odd, got {nodes}")));
    }
    if !(sigma > 0.0 && half_width >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need sigma > 0 and half_width >= 0, got {sigma} and {half_width}"
        )));
    }
    if nodes == 1 || half_width == 0.0 {
        return Ok(vec![(0.0, 1.0)]);
    }
    let mid = (nodes / 2) as f64;
    let offsets: Vec<f64> = (0..nodes)
        .map(|k| half_width * (k as f64 - mid) / mid)
        .collect();
    let density: Vec<f64> = offsets
        .iter()
        .map(|w| (-0.5 * (w / sigma).powi(2)).exp())
        .collect();
    let total: f64 = density.iter().sum();
    Ok(offsets
        .into_iter()
        .zip(density)
        .map(|(w, d)| (w, d / total))
        .collect())
}

/// Kernel of `s' = mean(s, a) + w` with `w` drawn from `pmf`; successors are
/// rounded to the nearest grid point (and clamped to the grid).
pub fn additive_noise_kernel(
    states: &StateGrid,
    actions: &ActionGrid,
    mean: impl Fn(f64, f64) -> f64,
    pmf: &[(f64, f64)],
) -> Result<TransitionKernel> {
    let mut rows = Vec::with_capacity(states.len() * actions.len());
    for &s in states.points() {
        for &a in actions.points() {
            let m = mean(s, a);
            rows.push(
                pmf.iter()
                    .map(|&(w, p)| (states.nearest(m + w), p))
                    .collect(),
            );
        }
    }
    TransitionKernel::from_rows(states.len(), actions.len(), rows)
}

/// Distance from `s` to the interval `[0, 1]`.
pub fn distance_to_unit_interval(s: f64) -> f64 {
    if s < 0.0 {
        -s
    } else if s > 1.0 {
        s - 1.0
    } else {
        0.0
    }
}

/// Trading reward: selling earns the traded energy, buying costs twice it.
pub fn trading_reward(a: f64) -> f64 {
    if a <= 0.0 {
        -a
    } else {
        -2.0 * a
    }
}

/// Tracking reward around half charge.
pub fn tracking_reward(s: f64, a: f64) -> f64 {
    -(s - 0.5).abs() - a.abs()
}

struct BatteryDef {
    name: &'static str,
    domain: (f64, f64),
    sigma: f64,
    truncation: f64,
    reward: fn(f64, f64) -> f64,
}

fn battery(def: BatteryDef, grid: BatteryGrid) -> Result<ScenarioBundle> {
    grid.validate()?;
    let states = StateGrid::uniform(def.domain.0, def.domain.1, grid.states)?;
    let actions = ActionGrid::uniform(-BATTERY_ACTION_BOUND, BATTERY_ACTION_BOUND, grid.actions)?;
    let pmf = truncated_gaussian_pmf(def.sigma, def.truncation, grid.noise_nodes)?;
    let kernel = additive_noise_kernel(&states, &actions, |s, a| s + a, &pmf)?;
    let base = def.reward;
    let rewards = Table2::from_fn(states.len(), actions.len(), |i, j| {
        let (s, a) = (states.points()[i], actions.points()[j]);
        base(s, a) - BATTERY_PENALTY * distance_to_unit_interval(s)
    });
    let reward = RewardTable::new(rewards, BATTERY_PENALTY)?;
    let (lo, hi) = (states.lo(), states.hi());
    let nominal_model = DeterministicModel::from_fn(&states, actions.len(), |i, j| {
        Some((states.points()[i] + actions.points()[j]).clamp(lo, hi))
    })?;
    let mdp = Mdp::new(states, actions, kernel, reward, BATTERY_GAMMA)?;
    Ok(ScenarioBundle {
        name: def.name.to_string(),
        mdp,
        nominal_model,
        closed_form: None,
        region: (0.0, 1.0),
    })
}

/// Battery storage with asymmetric trading prices: `s' = s + a + w`,
/// `w ~ N(0, 0.05²)` truncated to `±0.05`, on the extended domain
/// `[-0.35, 1.35]`.
pub fn battery_case1(grid: BatteryGrid) -> Result<ScenarioBundle> {
    battery(
        BatteryDef {
            name: "battery1",
            domain: (-0.35, 1.35),
            sigma: 0.05,
            truncation: 0.05,
            reward: |_, a| trading_reward(a),
        },
        grid,
    )
}

/// Battery storage with the non-smooth tracking reward `-|s - 1/2| - |a|`,
/// `w ~ N(0, 0.1²)` truncated to `±0.25`, on the domain `[-0.55, 1.55]`.
pub fn battery_case2(grid: BatteryGrid) -> Result<ScenarioBundle> {
    battery(
        BatteryDef {
            name: "battery2",
            domain: (-0.55, 1.55),
            sigma: 0.1,
            truncation: 0.25,
            reward: tracking_reward,
        },
        grid,
    )
}

/// Scalar linear-quadratic problem `s' = a·s + b·u + w`, reward `-q s² - r u²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqrParams {
    pub a_coef: f64,
    pub b_coef: f64,
    pub q: f64,
    pub r_cost: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl Default for LqrParams {
    fn default() -> Self {
        LqrParams {
            a_coef: 1.0,
            b_coef: 1.0,
            q: 1.0,
            r_cost: 1.0,
            sigma: 0.1,
            gamma: 0.99,
        }
    }
}

/// LQR discretization. The noise is truncated at three standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqrGrid {
    pub states: usize,
    pub actions: usize,
    pub noise_nodes: usize,
    pub state_bound: f64,
    pub action_bound: f64,
}

impl Default for LqrGrid {
    fn default() -> Self {
        // state and action spacing both 0.025, so `s + u` stays on the grid
        LqrGrid {
            states: 241,
            actions: 201,
            noise_nodes: 33,
            state_bound: 3.0,
            action_bound: 2.5,
        }
    }
}

/// Fixed point `p` of the discounted scalar Riccati map and the gain `k`
/// of the optimal policy `u* = -k·s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqrClosedForm {
    pub p: f64,
    pub gain: f64,
    pub iterations: usize,
    /// `|F(p) - p|` at the returned `p`.
    pub residual: f64,
}

impl LqrClosedForm {
    pub fn action(&self, s: f64) -> f64 {
        -self.gain * s
    }
}

fn riccati_map(params: &LqrParams, p: f64) -> f64 {
    let LqrParams {
        a_coef: a,
        b_coef: b,
        q,
        r_cost: r,
        gamma: g,
        ..
    } = *params;
    q + g * a * a * p - (g * a * b * p).powi(2) / (r + g * b * b * p)
}

/// Iterates the discounted Riccati map from `p = 0`.
pub fn riccati_fixed_point(params: &LqrParams) -> Result<LqrClosedForm> {
    const MAX_ITER: usize = 1_000_000;
    if !(params.r_cost > 0.0 && params.q >= 0.0 && params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "LQR needs r_cost > 0, q >= 0 and gamma in (0, 1), got {params:?}"
        )));
    }
    let mut p = 0.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITER {
        let next = riccati_map(params, p);
        if !next.is_finite() {
            return Err(Error::RiccatiNotConverged {
                iterations: it,
                residual: f64::INFINITY,
            });
        }
        residual = (next - p).abs();
        p = next;
        if residual <= f64::EPSILON * p.abs().max(1.0) {
            let residual = (riccati_map(params, p) - p).abs();
            let LqrParams {
                a_coef: a,
                b_coef: b,
                r_cost: r,
                gamma: g,
                ..
            } = *params;
            let gain = g * a * b * p / (r + g * b * b * p);
            return Ok(LqrClosedForm {
                p,
                gain,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::RiccatiNotConverged {
        iterations: MAX_ITER,
        residual,
    })
}

/// Discretized scalar LQR; the nominal model is `a·s + b·u` (clamped).
pub fn lqr_scenario(params: LqrParams, grid: LqrGrid) -> Result<ScenarioBundle> {
    let closed_form = riccati_fixed_point(&params)?;
    if grid.noise_nodes.is_multiple_of(2) {
        return Err(Error::InvalidArgument("noise node count must be odd".into()));
    }
    let states = StateGrid::uniform(-grid.state_bound, grid.state_bound, grid.states)?;
    let actions = ActionGrid::uniform(-grid.action_bound, grid.action_bound, grid.actions)?;
    let pmf = if params.sigma > 0.0 {
        truncated_gaussian_pmf(params.sigma, 3.0 * params.sigma, grid.noise_nodes)?
    } else {
        vec![(0.0, 1.0)]
    };
    let (a_coef, b_coef) = (params.a_coef, params.b_coef);
    let kernel = additive_noise_kernel(&states, &actions, |s, u| a_coef * s + b_coef * u, &pmf)?;
    let rewards = Table2::from_fn(states.len(), actions.len(), |i, j| {
        let (s, u) = (states.points()[i], actions.points()[j]);
        -params.q * s * s - params.r_cost * u * u
    });
    let (lo, hi) = (states.lo(), states.hi());
    let nominal_model = DeterministicModel::from_fn(&states, actions.len(), |i, j| {
        Some((a_coef * states.points()[i] + b_coef * actions.points()[j]).clamp(lo, hi))
    })?;
    let inner = 0.6 * grid.state_bound;
    let mdp = Mdp::new(states, actions, kernel, RewardTable::new(rewards, 0.0)?, params.gamma)?;
    Ok(ScenarioBundle {
        name: "lqr".to_string(),
        mdp,
        nominal_model,
        closed_form: Some(closed_form),
        region: (-inner, inner),
    })
}

fn flat_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Random MDP with flat-Dirichlet kernel rows, rewards uniform in `[-1, 0]`
/// and `γ = 0.9`. States sit on `[0, 1]`, actions on `0, 1, ...`.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize) -> Result<Mdp> {
    if n_states == 0 || n_actions == 0 || n_states > RANDOM_MAX_STATES || n_actions > RANDOM_MAX_ACTIONS {
        return Err(Error::InvalidArgument(format!(
            "random MDPs take 1..={RANDOM_MAX_STATES} states and 1..={RANDOM_MAX_ACTIONS} actions, got {n_states}x{n_actions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = StateGrid::uniform(0.0, 1.0, n_states)?;
    let actions = ActionGrid::from_points((0..n_actions).map(|a| a as f64).collect())?;
    let rows = (0..n_states * n_actions)
        .map(|_| flat_simplex(&mut rng, n_states).into_iter().enumerate().collect())
        .collect();
    let kernel = TransitionKernel::from_rows(n_states, n_actions, rows)?;
    let rewards = Table2::from_fn(n_states, n_actions, |_, _| -rng.random::<f64>());
    Mdp::new(states, actions, kernel, RewardTable::new(rewards, 0.0)?, RANDOM_GAMMA)
}

/// Mixes every kernel row with a random flat-Dirichlet row:
/// `(1 - strength)·ρ + strength·noise`.
pub fn perturbed_mdp(mdp: &Mdp, seed: u64, strength: f64) -> Result<Mdp> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("strength must lie in [0, 1], got {strength}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rows = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let noise = flat_simplex(&mut rng, ns);
            let base = mdp.kernel().dense_row(s, a);
            rows.push(
                base.iter()
                    .zip(noise)
                    .map(|(p, q)| (1.0 - strength) * p + strength * q)
                    .enumerate()
                    .collect(),
            );
        }
    }
    mdp.with_kernel(TransitionKernel::from_rows(ns, na, rows)?)
}

/// Grid overrides accepted by [`by_name`]; `None` keeps the scenario default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GridOverrides {
    pub states: Option<usize>,
    pub actions: Option<usize>,
    pub noise_nodes: Option<usize>,
}

/// Resolves `battery1`, `battery2`, `lqr` or `random:<seed>`.
pub fn by_name(name: &str, overrides: GridOverrides) -> Result<ScenarioBundle> {
    match name {
        "battery1" | "battery2" => {
            let d = BatteryGrid::default();
            let grid = BatteryGrid {
                states: overrides.states.unwrap_or(d.states),
                actions: overrides.actions.unwrap_or(d.actions),
                noise_nodes: overrides.noise_nodes.unwrap_or(d.noise_nodes),
            };
            if name == "battery1" {
                battery_case1(grid)
            } else {
                battery_case2(grid)
            }
        }
        "lqr" => {
            let d = LqrGrid::default();
            let grid = LqrGrid {
                states: overrides.states.unwrap_or(d.states),
                actions: overrides.actions.unwrap_or(d.actions),
                noise_nodes: overrides.noise_nodes.unwrap_or(d.noise_nodes),
                ..d
            };
            lqr_scenario(LqrParams::default(), grid)
        }
        _ => {
            let seed = name
                .strip_prefix("random:")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| Error::UnknownScenario(name.to_string()))?;
            let mdp = random_mdp(seed, overrides.states.unwrap_or(6), overrides.actions.unwrap_or(3))?;
            let nominal_model = models::fit_expected_value(FitSource::Exact(&mdp))?;
            Ok(ScenarioBundle {
                name: name.to_string(),
                mdp,
                nominal_model,
                closed_form: None,
                region: (0.0, 1.0),
            })
        }
    }
}
