//! Predictive models, their conventional fits, and the model-based MDP they
//! induce.

use std::io;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Pair, Result};
use crate::grid::{ActionGrid, StateGrid};
use crate::mdp::{Mdp, RewardTable, TransitionKernel};
use crate::table::Table2;

/// Point prediction `f(s, a)` of the next state, possibly partial.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicModel {
    values: Table2<f64>,
    defined: Table2<bool>,
}

impl DeterministicModel {
    /// Every defined prediction must be finite and inside the grid's domain.
    /// Undefined entries are stored as NaN.
    pub fn new(states: &StateGrid, values: Table2<f64>, defined: Table2<bool>) -> Result<Self> {
        if values.shape() != defined.shape() {
            return Err(Error::Shape("model values and mask differ in shape".into()));
        }
        if values.rows() != states.len() {
            return Err(Error::Shape(format!(
                "model has {} state rows for a grid of {}",
                values.rows(),
                states.len()
            )));
        }
        let mut values = values;
        for s in 0..values.rows() {
            for a in 0..values.cols() {
                if !defined[(s, a)] {
                    values[(s, a)] = f64::NAN;
                    continue;
                }
                let f = values[(s, a)];
                if !f.is_finite() || !states.contains(f) {
                    return Err(Error::InvalidArgument(format!(
                        "prediction {f} at ({s},{a}) lies outside [{}, {}]",
                        states.lo(),
                        states.hi()
                    )));
                }
            }
        }
        Ok(DeterministicModel { values, defined })
    }

    /// Builds a model from `f(s_idx, a_idx)`; `None` marks the pair undefined.
    pub fn from_fn(
        states: &StateGrid,
        n_actions: usize,
        mut f: impl FnMut(usize, usize) -> Option<f64>,
    ) -> Result<Self> {
        let preds = Table2::from_fn(states.len(), n_actions, &mut f);
        let defined = preds.map(|p| p.is_some());
        let values = preds.map(|p| p.unwrap_or(f64::NAN));
        Self::new(states, values, defined)
    }

    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.defined[(s, a)].then(|| self.values[(s, a)])
    }

    pub fn values(&self) -> &Table2<f64> {
        &self.values
    }

    pub fn defined(&self) -> &Table2<bool> {
        &self.defined
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn is_total(&self) -> bool {
        self.defined.as_slice().iter().all(|&d| d)
    }

    pub fn undefined_pairs(&self) -> Vec<Pair> {
        self.defined
            .iter()
            .filter(|(_, &d)| !d)
            .map(|(p, _)| p)
            .collect()
    }

    fn require_total(&self) -> Result<()> {
        let missing = self.undefined_pairs();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::UndefinedModel(missing))
        }
    }

    /// Dirac kernel at the grid point nearest to each prediction.
    pub fn dirac_kernel(&self, states: &StateGrid) -> Result<TransitionKernel> {
        self.require_total()?;
        let (ns, na) = self.shape();
        TransitionKernel::dirac(ns, na, |s, a| states.nearest(self.values[(s, a)]))
    }

    /// Writes `s,a,f,defined` rows (grid coordinates, not indices).
    pub fn write_csv<W: io::Write>(&self, states: &StateGrid, actions: &ActionGrid, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["s", "a", "f", "defined"])?;
        for ((s, a), &f) in self.values.iter() {
            let d = self.defined[(s, a)];
            w.write_record([
                states.points()[s].to_string(),
                actions.points()[a].to_string(),
                if d { f.to_string() } else { String::new() },
                d.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabular stochastic model over the true grids.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticModel {
    pub kernel: TransitionKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveModel {
    Deterministic(DeterministicModel),
    Stochastic(StochasticModel),
}

impl From<DeterministicModel> for PredictiveModel {
    fn from(m: DeterministicModel) -> Self {
        PredictiveModel::Deterministic(m)
    }
}

impl From<StochasticModel> for PredictiveModel {
    fn from(m: StochasticModel) -> Self {
        PredictiveModel::Stochastic(m)
    }
}

/// One observed transition, by grid index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    #[serde(rename = "s_idx")]
    pub state: usize,
    #[serde(rename = "a_idx")]
    pub action: usize,
    #[serde(rename = "snext_idx")]
    pub next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    records: Vec<TransitionRecord>,
    n_states: usize,
    n_actions: usize,
    seed: u64,
}

impl TransitionDataset {
    pub fn new(records: Vec<TransitionRecord>, n_states: usize, n_actions: usize, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(r) = records
            .iter()
            .find(|r| r.state >= n_states || r.next >= n_states || r.action >= n_actions)
        {
            return Err(Error::InvalidArgument(format!("record {r:?} out of range")));
        }
        Ok(TransitionDataset {
            records,
            n_states,
            n_actions,
            seed,
        })
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Successor counts per `(s, a)` pair, each sorted by successor index.
    pub fn counts(&self) -> Vec<Vec<(usize, usize)>> {
        let mut dense = vec![Vec::<usize>::new(); self.n_states * self.n_actions];
        for r in &self.records {
            let row = &mut dense[r.state * self.n_actions + r.action];
            if row.is_empty() {
                row.resize(self.n_states, 0);
            }
            row[r.next] += 1;
        }
        dense
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .filter(|&(_, c)| c > 0)
                    .collect()
            })
            .collect()
    }

    /// CSV with header `s_idx,a_idx,snext_idx`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(input: R, n_states: usize, n_actions: usize, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let records = rdr.deserialize().collect::<Result<Vec<TransitionRecord>, _>>()?;
        Self::new(records, n_states, n_actions, seed)
    }
}

/// Draws exactly `per_pair` successors for every `(s, a)` pair, in pair order.
pub fn sample_transitions(mdp: &Mdp, per_pair: usize, seed: u64) -> Result<TransitionDataset> {
    if per_pair == 0 {
        return Err(Error::InvalidArgument("per_pair must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut records = Vec::with_capacity(ns * na * per_pair);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.kernel().row(s, a);
            let dist = WeightedIndex::new(row.iter().map(|&(_, p)| p))
                .map_err(|e| Error::InvalidKernel {
                    state: s,
                    action: a,
                    reason: e.to_string(),
                })?;
            for _ in 0..per_pair {
                records.push(TransitionRecord {
                    state: s,
                    action: a,
                    next: row[dist.sample(&mut rng)].0,
                });
            }
        }
    }
    TransitionDataset::new(records, ns, na, seed)
}

type SparseRow = Vec<(usize, f64)>;

/// Where a conventional fit takes its information from.
#[derive(Debug, Clone, Copy)]
pub enum FitSource<'a> {
    /// The true kernel itself.
    Exact(&'a Mdp),
    /// Sampled transitions over the given state grid.
    Samples {
        data: &'a TransitionDataset,
        states: &'a StateGrid,
    },
}

impl FitSource<'_> {
    fn states(&self) -> &StateGrid {
        match self {
            FitSource::Exact(mdp) => mdp.states(),
            FitSource::Samples { states, .. } => states,
        }
    }

    /// Empirical (or exact) row distributions.
    fn rows(&self) -> Result<(usize, usize, Vec<SparseRow>)> {
        match self {
            FitSource::Exact(mdp) => {
                let (ns, na) = (mdp.n_states(), mdp.n_actions());
                let rows = (0..ns * na)
                    .map(|i| mdp.kernel().row(i / na, i % na).to_vec())
                    .collect();
                Ok((ns, na, rows))
            }
            FitSource::Samples { data, states } => {
                if data.n_states() != states.len() {
                    return Err(Error::Shape(format!(
                        "dataset covers {} states, grid has {}",
                        data.n_states(),
                        states.len()
                    )));
                }
                let na = data.n_actions();
                let counts = data.counts();
                let missing: Vec<Pair> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_empty())
                    .map(|(i, _)| (i / na, i % na))
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::MissingPairs(missing));
                }
                let rows = counts
                    .into_iter()
                    .map(|row| {
                        let total: usize = row.iter().map(|&(_, c)| c).sum();
                        row.into_iter()
                            .map(|(next, c)| (next, c as f64 / total as f64))
                            .collect()
                    })
                    .collect();
                Ok((data.n_states(), na, rows))
            }
        }
    }
}

/// Conditional-mean model: `f(s, a) = E[s' | s, a]`, clamped to the domain.
pub fn fit_expected_value(source: FitSource<'_>) -> Result<DeterministicModel> {
    let states = source.states();
    let (ns, na, rows) = source.rows()?;
    let values = Table2::from_fn(ns, na, |s, a| {
        rows[s * na + a]
            .iter()
            .map(|&(next, p)| p * states.points()[next])
            .sum::<f64>()
            .clamp(states.lo(), states.hi())
    });
    DeterministicModel::new(states, values, Table2::filled(ns, na, true))
}

/// Maximum-likelihood tabular fit and its mode map.
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub model: StochasticModel,
    /// Most probable successor per pair (lowest index on ties).
    pub mode: DeterministicModel,
}

/// Over unrestricted tabular kernels the likelihood is maximized by the
/// empirical row distribution.
pub fn fit_mle(source: FitSource<'_>) -> Result<MleFit> {
    let states = source.states();
    let (ns, na, rows) = source.rows()?;
    let values = Table2::from_fn(ns, na, |s, a| {
        let row = &rows[s * na + a];
        let mut best = row[0];
        for &(next, p) in &row[1..] {
            if p > best.1 {
                best = (next, p);
            }
        }
        states.points()[best.0]
    });
    let mode = DeterministicModel::new(states, values, Table2::filled(ns, na, true))?;
    let kernel = TransitionKernel::from_rows(ns, na, rows)?;
    Ok(MleFit {
        model: StochasticModel { kernel },
        mode,
    })
}

/// The model-based MDP: same grids, reward and discount, with the model's
/// kernel. Deterministic predictions become Dirac rows at the nearest grid
/// point.
pub fn induced_mdp(
    model: &PredictiveModel,
    reward: &RewardTable,
    gamma: f64,
    states: &StateGrid,
    actions: &ActionGrid,
) -> Result<Mdp> {
    let kernel = match model {
        PredictiveModel::Deterministic(m) => {
            if m.shape() != (states.len(), actions.len()) {
                return Err(Error::Shape("model does not match the grids".into()));
            }
            m.dirac_kernel(states)?
        }
        PredictiveModel::Stochastic(m) => m.kernel.clone(),
    };
    Mdp::new(states.clone(), actions.clone(), kernel, reward.clone(), gamma)
}

/// [`induced_mdp`] with reward, discount and grids taken from `true_mdp`.
pub fn induced_mdp_like(model: &PredictiveModel, true_mdp: &Mdp) -> Result<Mdp> {
    induced_mdp(model, true_mdp.reward(), true_mdp.gamma(), true_mdp.states(), true_mdp.actions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{solve_mdp, SolveOptions};

    fn bimodal() -> Mdp {
        let states = StateGrid::uniform(0.0, 1.0, 11).unwrap();
        let actions = ActionGrid::from_points(vec![0.0]).unwrap();
        let rows = (0..11).map(|_| vec![(2, 0.6), (8, 0.4)]).collect();
        Mdp::new(
            states,
            actions,
            TransitionKernel::from_rows(11, 1, rows).unwrap(),
            RewardTable::new(Table2::filled(11, 1, 0.0), 0.0).unwrap(),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn mean_and_mode_of_a_bimodal_row() {
        let mdp = bimodal();
        let ev = fit_expected_value(FitSource::Exact(&mdp)).unwrap();
        let mle = fit_mle(FitSource::Exact(&mdp)).unwrap();
        assert!((ev.get(3, 0).unwrap() - 0.44).abs() < 1e-12);
        assert!((mle.mode.get(3, 0).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(&mle.model.kernel, mdp.kernel());
    }

    #[test]
    fn mode_ties_go_to_lower_index() {
        let states = StateGrid::uniform(0.0, 1.0, 3).unwrap();
        let rows = (0..3).map(|_| vec![(1, 0.5), (2, 0.5)]).collect();
        let mdp = Mdp::new(
            states,
            ActionGrid::from_points(vec![0.0]).unwrap(),
            TransitionKernel::from_rows(3, 1, rows).unwrap(),
            RewardTable::new(Table2::filled(3, 1, 0.0), 0.0).unwrap(),
            0.5,
        )
        .unwrap();
        let mle = fit_mle(FitSource::Exact(&mdp)).unwrap();
        assert_eq!(mle.mode.get(0, 0), Some(0.5));
    }

    #[test]
    fn missing_pairs_are_listed() {
        let mdp = bimodal();
        let data = TransitionDataset::new(
            vec![TransitionRecord {
                state: 0,
                action: 0,
                next: 2,
            }],
            11,
            1,
            0,
        )
        .unwrap();
        let err = fit_expected_value(FitSource::Samples {
            data: &data,
            states: mdp.states(),
        })
        .unwrap_err();
        match err {
            Error::MissingPairs(p) => assert_eq!(p.len(), 10),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn undefined_models_cannot_induce_an_mdp() {
        let mdp = bimodal();
        let m = DeterministicModel::from_fn(mdp.states(), 1, |s, _| (s != 4).then_some(0.5)).unwrap();
        assert_eq!(m.undefined_pairs(), vec![(4, 0)]);
        match induced_mdp_like(&m.into(), &mdp) {
            Err(Error::UndefinedModel(p)) => assert_eq!(p, vec![(4, 0)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predictions_must_stay_on_the_domain() {
        let states = StateGrid::uniform(0.0, 1.0, 3).unwrap();
        assert!(DeterministicModel::from_fn(&states, 1, |_, _| Some(1.5)).is_err());
    }

    #[test]
    fn frozen_dynamics_with_zero_reward() {
        let mdp = bimodal();
        let frozen = DeterministicModel::from_fn(mdp.states(), 1, |s, _| Some(mdp.states().points()[s])).unwrap();
        let induced = induced_mdp_like(&frozen.into(), &mdp).unwrap();
        let sol = solve_mdp(&induced, SolveOptions::default()).unwrap();
        assert!(sol.v_star.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_csv_header_and_roundtrip() {
        let mdp = bimodal();
        let data = sample_transitions(&mdp, 3, 42).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s_idx,a_idx,snext_idx\n"));
        assert_eq!(text.lines().count(), 1 + 33);
        let back = TransitionDataset::read_csv(&buf[..], 11, 1, 42).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn deterministic_kernel_samples_its_support_point() {
        let states = StateGrid::uniform(0.0, 1.0, 4).unwrap();
        let mdp = Mdp::new(
            states,
            ActionGrid::from_points(vec![0.0, 1.0]).unwrap(),
            TransitionKernel::dirac(4, 2, |s, a| (s + a) % 4).unwrap(),
            RewardTable::new(Table2::filled(4, 2, 0.0), 0.0).unwrap(),
            0.9,
        )
        .unwrap();
        for seed in [0, 1, 99] {
            let data = sample_transitions(&mdp, 5, seed).unwrap();
            assert!(data.records().iter().all(|r| r.next == (r.state + r.action) % 4));
        }
        assert!(sample_transitions(&mdp, 0, 0).is_err());
    }
}
