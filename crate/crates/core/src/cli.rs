//! Batch front end: builds a scenario, runs one command and writes CSV/JSON
//! artifacts into an output directory.
//!
//! Every artifact is a pure function of the resolved [`RunConfig`], so
//! rerunning a command reproduces its files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{mean_return, solve_mdp, Mdp, Solution, SolveOptions};
use crate::models::{fit_expected_value, fit_mle, induced_mdp_like, sample_transitions, FitSource, PredictiveModel};
use crate::optimality::{self, audit, ConditionReport, ModelUnderAudit, DEFAULT_TIE_TOL};
use crate::scenarios::{self, GridOverrides, ScenarioBundle};
use crate::synthesis::{
    self, constrained_fit, fine_tune, interpolated_model_solution, synthesize_model, FitOptions, ModelFamily,
    SynthesisOptions, TuneOptions,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DOM_LAB_OUT";
const DEFAULT_OUT_ROOT: &str = "dom-lab-out";
const DEFAULT_DELTAS: [f64; 3] = [0.10, 0.11, 0.15];

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (invalid input, undefined model, ...)
  2  usage or configuration error
  3  unknown scenario
  4  I/O failure (unwritable output directory, bad CSV)
  5  solver did not converge

Errors are reported on stderr as one JSON object:
  {\"error\":\"<kind>\",\"exit_code\":<n>,\"message\":\"...\"}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Solve the true MDP.
    Solve,
    /// Sample transitions and fit expected-value and MLE models.
    Fit,
    /// Audit the expected-value model against the true MDP.
    Audit,
    /// Synthesize a decision-oriented model for one Δ.
    Synthesize,
    /// Synthesize for a list of Δ and summarize.
    Sweep,
    /// Tune an affine model for closed-loop return.
    Finetune,
    /// Files for plotting true vs expected-value-model values and policies.
    Reproduce,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Fit => "fit",
            Command::Audit => "audit",
            Command::Synthesize => "synthesize",
            Command::Sweep => "sweep",
            Command::Finetune => "finetune",
            Command::Reproduce => "reproduce",
        }
    }
}

/// Command-line arguments. Values given here override the `--config` file.
#[derive(Debug, Parser)]
#[command(name = "dom-lab", version, about = "Decision-oriented model lab for gridded MDPs", after_help = EXIT_CODES)]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// battery1, battery2, lqr or random:<seed>
    pub scenario: String,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    #[arg(long)]
    pub noise_nodes: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Comma-separated Δ list for `sweep`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub deltas: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $DOM_LAB_OUT/<command>_<scenario>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Value-iteration tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Value-iteration sweep limit.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Samples per state/action pair for `fit`.
    #[arg(long)]
    pub per_pair: Option<usize>,
    /// Search iterations for `finetune`.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Flat `key=value` file; keys match the long flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: String,
    pub grid: GridOverrides,
    pub delta: f64,
    pub deltas: Vec<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
    pub tol: f64,
    pub max_iter: usize,
    pub per_pair: usize,
    pub budget: usize,
}

impl RunConfig {
    /// Defaults for everything but the command and scenario; output goes to
    /// `out`.
    pub fn new(command: Command, scenario: &str, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            scenario: scenario.to_string(),
            grid: GridOverrides::default(),
            delta: 0.0,
            deltas: DEFAULT_DELTAS.to_vec(),
            seed: 0,
            out: out.into(),
            tol: SolveOptions::default().tol,
            max_iter: SolveOptions::default().max_iter,
            per_pair: 50,
            budget: 200,
        }
    }

    /// Merges flags over the config file (if any) over defaults.
    pub fn from_args(args: Args) -> Result<Self> {
        let mut file = match &args.config {
            Some(path) => parse_config(&fs::read_to_string(path)?)?,
            None => BTreeMap::new(),
        };
        let mut take = |key: &str| file.remove(key);
        let states = pick(args.states, take("states"), "states")?;
        let actions = pick(args.actions, take("actions"), "actions")?;
        let noise_nodes = pick(args.noise_nodes, take("noise_nodes"), "noise_nodes")?;
        let delta = pick(args.delta, take("delta"), "delta")?;
        let deltas = match (args.deltas, take("deltas")) {
            (Some(d), _) => Some(d),
            (None, Some(raw)) => Some(parse_list(&raw)?),
            (None, None) => None,
        };
        let seed = pick(args.seed, take("seed"), "seed")?;
        let out = args.out.or_else(|| take("out").map(PathBuf::from));
        let tol = pick(args.tol, take("tol"), "tol")?;
        let max_iter = pick(args.max_iter, take("max_iter"), "max_iter")?;
        let per_pair = pick(args.per_pair, take("per_pair"), "per_pair")?;
        let budget = pick(args.budget, take("budget"), "budget")?;
        if let Some(key) = file.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }

        let out = out.unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
            root.join(format!("{}_{}", args.command.name(), sanitize(&args.scenario)))
        });
        let mut cfg = RunConfig::new(args.command, &args.scenario, out);
        cfg.grid = GridOverrides {
            states,
            actions,
            noise_nodes,
        };
        cfg.delta = delta.unwrap_or(cfg.delta);
        cfg.deltas = deltas.unwrap_or(cfg.deltas);
        cfg.seed = seed.unwrap_or(cfg.seed);
        cfg.tol = tol.unwrap_or(cfg.tol);
        cfg.max_iter = max_iter.unwrap_or(cfg.max_iter);
        cfg.per_pair = per_pair.unwrap_or(cfg.per_pair);
        cfg.budget = budget.unwrap_or(cfg.budget);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("states", self.grid.states),
            ("actions", self.grid.actions),
            ("noise_nodes", self.grid.noise_nodes),
            ("per_pair", Some(self.per_pair)),
            ("budget", Some(self.budget)),
            ("max_iter", Some(self.max_iter)),
        ];
        for (name, value) in counts {
            if value == Some(0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !self.delta.is_finite() || self.deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config("delta values must be finite".into()));
        }
        if self.deltas.is_empty() {
            return Err(Error::Config("deltas must not be empty".into()));
        }
        Ok(())
    }
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: Option<String>, key: &str) -> Result<Option<T>> {
    match (flag, file) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(raw)) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("cannot parse `{raw}` for key `{key}`"))),
        (None, None) => Ok(None),
    }
}

fn parse_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{p}` in deltas")))
        })
        .collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped and
/// dashes in keys are read as underscores.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
        let key = key.trim().replace('-', "_");
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(map)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Output directory plus the list of files written so far.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn csv<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(&mut csv::Writer<fs::File>) -> Result<()>,
    {
        let file = fs::File::create(self.dir.join(name))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        write(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn raw<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(fs::File) -> Result<()>,
    {
        write(fs::File::create(self.dir.join(name))?)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, header: &Header<'_>, body: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            #[serde(flatten)]
            header: &'a Header<'a>,
            result: &'a T,
        }
        let mut text = serde_json::to_string_pretty(&Doc { header, result: body })?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Leading fields of every JSON artifact.
#[derive(Serialize)]
struct Header<'a> {
    seed: u64,
    command: &'static str,
    scenario: &'a str,
    config: &'a RunConfig,
}

/// What a successful [`run`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub files: Vec<String>,
}

fn solve(mdp: &Mdp, cfg: &RunConfig) -> Result<Solution> {
    solve_mdp(
        mdp,
        SolveOptions {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
    )
}

fn write_solution(art: &mut Artifacts, mdp: &Mdp, sol: &Solution) -> Result<()> {
    let (states, actions) = (mdp.states().points(), mdp.actions().points());
    art.csv("solution.csv", |w| {
        w.write_record(["s", "v_star"])?;
        for (s, v) in states.iter().zip(&sol.v_star) {
            w.serialize((s, v))?;
        }
        Ok(())
    })?;
    art.csv("solution_q.csv", |w| {
        w.write_record(["s", "a", "q_star", "advantage", "policy_flag"])?;
        for (i, s) in states.iter().enumerate() {
            for (j, a) in actions.iter().enumerate() {
                let flag = u8::from(sol.policy[i] == j);
                w.serialize((s, a, sol.q_star[(i, j)], sol.advantage[(i, j)], flag))?;
            }
        }
        Ok(())
    })
}

fn write_audit_tables(art: &mut Artifacts, mdp: &Mdp, report: &ConditionReport) -> Result<()> {
    let (states, actions) = (mdp.states().points(), mdp.actions().points());
    art.csv("delta_field.csv", |w| {
        w.write_record(["s", "a", "delta_residual"])?;
        for ((i, j), d) in report.delta_field.iter() {
            w.serialize((states[i], actions[j], d))?;
        }
        Ok(())
    })?;
    for (name, table) in [("alpha0.csv", &report.alpha0), ("beta.csv", &report.beta)] {
        art.csv(name, |w| {
            w.write_record(["x", "alpha0"])?;
            for (x, v) in table.breakpoints.iter().zip(&table.values) {
                w.serialize((x, v))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveReport {
    iterations: usize,
    residual: f64,
    v_star_max: f64,
    argmax_state: f64,
}

#[derive(Serialize)]
struct AuditOutput<'a> {
    summary: optimality::ReportSummary,
    report: &'a ConditionReport,
}

#[derive(Serialize)]
struct FitOutput {
    samples: usize,
    expected_value: optimality::ReportSummary,
    mle: optimality::ReportSummary,
    affine_theta: Vec<f64>,
    affine_report: synthesis::FitReport,
}

#[derive(Serialize)]
struct SynthesisOutput<'a> {
    delta: f64,
    diagnostics: &'a synthesis::SynthesisDiagnostics,
    agreement_fraction: f64,
    delta_spread_defined: f64,
}

#[derive(Serialize)]
struct ReproduceOutput {
    j_star: f64,
    j_hat: f64,
    gap: f64,
    disagreement_fraction: f64,
    audit: optimality::ReportSummary,
}

/// Runs the expected-value model of `bundle` through the model-based solve.
fn nominal_solution(bundle: &ScenarioBundle, cfg: &RunConfig) -> Result<(PredictiveModel, Mdp, Solution)> {
    let model = PredictiveModel::Deterministic(bundle.nominal_model.clone());
    let model_mdp = induced_mdp_like(&model, &bundle.mdp)?;
    let sol = solve(&model_mdp, cfg)?;
    Ok((model, model_mdp, sol))
}

/// Executes one command and writes its artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let bundle = scenarios::by_name(&cfg.scenario, cfg.grid)?;
    let mut art = Artifacts::create(&cfg.out)?;
    let header = Header {
        seed: cfg.seed,
        command: cfg.command.name(),
        scenario: &cfg.scenario,
        config: cfg,
    };
    let mdp = &bundle.mdp;
    let region = bundle.region_states();
    let sol = solve(mdp, cfg)?;

    match cfg.command {
        Command::Solve => {
            write_solution(&mut art, mdp, &sol)?;
            let (best, _) = crate::mdp::argmax_first(&sol.v_star);
            let report = SolveReport {
                iterations: sol.iterations,
                residual: sol.residual,
                v_star_max: sol.v_star[best],
                argmax_state: mdp.states().points()[best],
            };
            art.json("report.json", &header, &report)?;
        }
        Command::Fit => {
            let data = sample_transitions(mdp, cfg.per_pair, cfg.seed)?;
            art.raw("dataset.csv", |f| data.write_csv(f))?;
            let source = FitSource::Samples {
                data: &data,
                states: mdp.states(),
            };
            let ev = fit_expected_value(source)?;
            let mle = fit_mle(source)?;
            art.raw("model.csv", |f| ev.write_csv(mdp.states(), mdp.actions(), f))?;
            art.raw("model_mle_mode.csv", |f| mle.mode.write_csv(mdp.states(), mdp.actions(), f))?;
            let summarize = |model: PredictiveModel| -> Result<optimality::ReportSummary> {
                let model_mdp = induced_mdp_like(&model, mdp)?;
                let model_solution = solve(&model_mdp, cfg)?;
                let report = audit(
                    mdp,
                    &sol,
                    ModelUnderAudit {
                        model: &model,
                        model_mdp: &model_mdp,
                        model_solution: &model_solution,
                    },
                    &region,
                    DEFAULT_TIE_TOL,
                )?;
                Ok(report.summary())
            };
            let opts = FitOptions {
                region: Some(region.clone()),
                ..Default::default()
            };
            let (affine, affine_report) = constrained_fit(&data, mdp, &sol, ModelFamily::Affine, &opts)?;
            let out = FitOutput {
                samples: data.len(),
                expected_value: summarize(ev.into())?,
                mle: summarize(mle.model.into())?,
                affine_theta: affine.theta,
                affine_report,
            };
            art.json("report.json", &header, &out)?;
        }
        Command::Audit => {
            let (model, model_mdp, model_solution) = nominal_solution(&bundle, cfg)?;
            let report = audit(
                mdp,
                &sol,
                ModelUnderAudit {
                    model: &model,
                    model_mdp: &model_mdp,
                    model_solution: &model_solution,
                },
                &region,
                DEFAULT_TIE_TOL,
            )?;
            write_audit_tables(&mut art, mdp, &report)?;
            let out = AuditOutput {
                summary: report.summary(),
                report: &report,
            };
            art.json("report.json", &header, &out)?;
        }
        Command::Synthesize => {
            let opts = SynthesisOptions::with_region(region.clone());
            let (model, diagnostics) = synthesize_model(mdp, &sol, cfg.delta, &opts)?;
            art.raw("model.csv", |f| model.write_csv(mdp.states(), mdp.actions(), f))?;
            let (_, model_solution) = interpolated_model_solution(mdp, &model, cfg.tol)?;
            let flags = optimality::argmax_agreement(&sol, &model_solution, &region, DEFAULT_TIE_TOL);
            let states = mdp.states();
            let residuals = model.values().iter().filter_map(|((s, a), &f)| {
                model
                    .get(s, a)
                    .map(|_| states.interpolate(&sol.v_star, f) - mdp.kernel().expect(s, a, &sol.v_star))
            });
            let out = SynthesisOutput {
                delta: cfg.delta,
                diagnostics: &diagnostics,
                agreement_fraction: optimality::agreement_fraction(&flags),
                delta_spread_defined: crate::table::spread(residuals),
            };
            art.json("report.json", &header, &out)?;
        }
        Command::Sweep => {
            let opts = SynthesisOptions {
                solve_tol: cfg.tol,
                ..SynthesisOptions::with_region(region.clone())
            };
            let rows = synthesis::sweep_delta(mdp, &sol, &cfg.deltas, &opts)?;
            art.raw("sweep.csv", |f| synthesis::write_sweep_csv(&rows, f))?;
        }
        Command::Finetune => {
            // start from the plain affine data fit (no penalty)
            let data = sample_transitions(mdp, cfg.per_pair, cfg.seed)?;
            let opts = FitOptions {
                region: Some(region.clone()),
                ..Default::default()
            };
            let (start, _) = constrained_fit(&data, mdp, &sol, ModelFamily::Affine, &opts)?;
            let tune = TuneOptions {
                region: Some(region.clone()),
                ..Default::default()
            };
            let result = fine_tune(ModelFamily::Affine, start.theta, mdp, cfg.budget, &tune)?;
            art.csv("finetune.csv", |w| {
                w.write_record(["iteration", "objective", "step", "theta0", "theta1", "theta2"])?;
                for e in &result.trace {
                    w.serialize((e.iteration, e.objective, e.step, e.theta[0], e.theta[1], e.theta[2]))?;
                }
                Ok(())
            })?;
            art.json("report.json", &header, &result)?;
        }
        Command::Reproduce => {
            write_solution(&mut art, mdp, &sol)?;
            let (model, model_mdp, model_solution) = nominal_solution(&bundle, cfg)?;
            let actions = mdp.actions().points();
            art.csv("figure.csv", |w| {
                w.write_record(["s", "v_star", "policy_star", "v_hat", "policy_hat"])?;
                for (i, s) in mdp.states().points().iter().enumerate() {
                    w.serialize((
                        s,
                        sol.v_star[i],
                        actions[sol.policy[i]],
                        model_solution.v_star[i],
                        actions[model_solution.policy[i]],
                    ))?;
                }
                Ok(())
            })?;
            let report = audit(
                mdp,
                &sol,
                ModelUnderAudit {
                    model: &model,
                    model_mdp: &model_mdp,
                    model_solution: &model_solution,
                },
                &region,
                DEFAULT_TIE_TOL,
            )?;
            let j_star = mean_return(mdp, &sol.policy, &region, cfg.tol)?;
            let j_hat = mean_return(mdp, &model_solution.policy, &region, cfg.tol)?;
            let out = ReproduceOutput {
                j_star,
                j_hat,
                gap: j_star - j_hat,
                disagreement_fraction: 1.0 - report.agreement_fraction,
                audit: report.summary(),
            };
            art.json("report.json", &header, &out)?;
        }
    }

    #[derive(Serialize)]
    struct RunRecord<'a> {
        files: &'a [String],
    }
    let files = art.files.clone();
    art.json("run.json", &header, &RunRecord { files: &files })?;
    Ok(RunSummary {
        out: art.dir,
        files: art.files,
    })
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

/// Parses the process arguments, runs, and returns the exit status. Errors
/// are printed to stderr as JSON.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match RunConfig::from_args(args).and_then(|cfg| run(&cfg)) {
        Ok(summary) => {
            println!("{}", summary.out.display());
            0
        }
        Err(e) => {
            let code = e.exit_code();
            let report = ErrorReport {
                error: e.kind(),
                exit_code: code,
                message: e.to_string(),
            };
            let text = serde_json::to_string(&report).unwrap_or_else(|_| format!("{{\"exit_code\":{code}}}"));
            let _ = writeln!(std::io::stderr(), "{text}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let map = parse_config("# comment\nstates = 21\n\nnoise-nodes=5\n").unwrap();
        assert_eq!(map["states"], "21");
        assert_eq!(map["noise_nodes"], "5");
        assert!(parse_config("states").is_err());
        assert!(parse_config("a=1\na=2").is_err());
    }

    #[test]
    fn scenario_names_are_sanitized() {
        assert_eq!(sanitize("random:7"), "random_7");
        assert_eq!(sanitize("battery1"), "battery1");
    }

    #[test]
    fn exit_codes_are_distinct_per_category() {
        assert_eq!(Error::UnknownScenario("x".into()).exit_code(), 3);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(
            Error::NotConverged {
                iterations: 1,
                residual: 1.0
            }
            .exit_code(),
            5
        );
        let io = Error::Io(std::io::Error::other("x"));
        assert_eq!(io.exit_code(), 4);
    }
}
