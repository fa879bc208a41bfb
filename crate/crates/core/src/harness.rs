//! Experiment orchestration: central / sync / async training runs, degree
//! and node-count sweeps, JSON results and CSV traces.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::consensus::{
    train_decentralized, Activation, ConsensusMode, DecentralizedRun, SolverConfig,
};
use crate::data::{load_csv, normalize_fit_apply, partition_uniform, CsvOptions, Dataset};
use crate::model::{
    accuracy, centralized_layer_solve, train_centralized, LayerSolver, LayerStack, SsfnConfig,
};
use crate::topology::{circulant_graph, ring_degree, Graph};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Central,
    Sync,
    Async,
    /// Central, sync and async on the same seeds.
    Compare,
}

impl Mode {
    fn variants(self) -> Vec<Mode> {
        match self {
            Mode::Compare => vec![Mode::Central, Mode::Sync, Mode::Async],
            m => vec![m],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Central => "central",
            Mode::Sync => "sync",
            Mode::Async => "async",
            Mode::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train_path: PathBuf,
    pub test_path: Option<PathBuf>,
    pub csv: CsvOptions,
    pub mode: Mode,
    /// `M`.
    pub nodes: usize,
    /// Circulant degree `d`; ignored when `edge_list` is given.
    pub degree: usize,
    pub edge_list: Option<PathBuf>,
    /// `K`: rounds in sync mode, activations in async mode.
    pub iters: usize,
    /// Async activations in compare mode; defaults to `iters · M`.
    pub async_iters: Option<usize>,
    pub gamma0: Option<f64>,
    pub gamma: f64,
    pub mu0: f64,
    pub mu: f64,
    pub eta: f64,
    /// Norm bound; defaults to `2Q`.
    pub eps: Option<f64>,
    pub layers: usize,
    /// `n = 2Q + width_extra`.
    pub width_extra: usize,
    pub seed: u64,
    pub repeats: usize,
    pub staleness: usize,
    pub activation: Activation,
    pub shuffle: bool,
    pub normalize_inputs: bool,
    pub normalize_random_block: bool,
    pub solver: LayerSolver,
    pub parallel: bool,
    /// Record wall-clock times; off makes all output byte-reproducible.
    pub timing: bool,
    /// Compare mode fails when the layer-0 decentralised readouts miss the
    /// pooled solution by more than this relative distance.
    pub equivalence_tol: Option<f64>,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(train_path: impl Into<PathBuf>, mode: Mode) -> Self {
        Self {
            train_path: train_path.into(),
            test_path: None,
            csv: CsvOptions::default(),
            mode,
            nodes: 1,
            degree: 2,
            edge_list: None,
            iters: 200,
            async_iters: None,
            gamma0: None,
            gamma: 0.1,
            mu0: 0.0,
            mu: 0.0,
            eta: 0.5,
            eps: None,
            layers: 20,
            width_extra: 1000,
            seed: 0,
            repeats: 1,
            staleness: 0,
            activation: Activation::Uniform,
            shuffle: true,
            normalize_inputs: true,
            normalize_random_block: true,
            solver: LayerSolver::Exact,
            parallel: false,
            timing: true,
            equivalence_tol: Some(DEFAULT_EQUIVALENCE_TOL),
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.width_extra == 0 {
            return Err(Error::Config("width-extra must be positive".into()));
        }
        if self.mode != Mode::Central {
            if self.nodes == 0 {
                return Err(Error::Config(
                    "decentralised modes need --nodes >= 1".into(),
                ));
            }
            self.solver_config(ConsensusMode::Sync, 0).validate()?;
            if self.edge_list.is_none() && self.nodes > 1 {
                circulant_graph(self.nodes, self.degree)?;
            }
        }
        Ok(())
    }

    fn graph(&self) -> Result<Graph> {
        match &self.edge_list {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let g = Graph::parse_edge_list(&text, Some(self.nodes))?;
                Ok(g)
            }
            None if self.nodes == 1 => Ok(Graph::single()),
            None => circulant_graph(self.nodes, self.degree),
        }
    }

    fn ssfn_config(&self, q: usize, seed: u64) -> SsfnConfig {
        SsfnConfig {
            max_layers: self.layers,
            hidden_width: 2 * q + self.width_extra,
            eps: self.eps.unwrap_or(2.0 * q as f64),
            mu_first: self.mu0,
            mu_rest: self.mu,
            seed,
            random_scale: None,
            normalize_random_block: self.normalize_random_block,
            solver: self.solver,
        }
    }

    fn solver_config(&self, mode: ConsensusMode, seed: u64) -> SolverConfig {
        let iters = match (mode, self.mode) {
            (ConsensusMode::Async, Mode::Compare) => {
                self.async_iters.unwrap_or(self.iters * self.nodes.max(1))
            }
            _ => self.iters,
        };
        SolverConfig {
            gamma: self.gamma,
            gamma_first: self.gamma0,
            eta: self.eta,
            max_iters: iters,
            mode,
            activation: self.activation,
            activation_seed: seed,
            staleness_cap: self.staleness,
            record_timing: self.timing,
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub repeat: usize,
    pub seed: u64,
    /// Final-layer accuracy (%) on the test set, if one was given.
    pub test_accuracy: Option<f64>,
    pub train_accuracy: f64,
    pub layer_costs: Vec<f64>,
    pub layer_test_accuracy: Vec<f64>,
    /// Final consensus error per layer (decentralised modes).
    pub consensus_errors: Vec<f64>,
    pub activations: u64,
    pub rounds: u64,
    pub messages: u64,
    pub wall_time_s: f64,
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: usize,
    pub mean_accuracy: Option<f64>,
    /// Sample standard deviation (0 for a single run).
    pub std_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub input_dim: usize,
    pub class_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<ModeSummary>,
    /// Compare mode: largest relative distance between a node's layer-0
    /// readout and the pooled solution.
    pub equivalence_gap: Option<f64>,
}

impl ExperimentResult {
    pub fn summary_for(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Compare-mode bound on the layer-0 relative distance between any node's
/// readout and the pooled solution.
pub const DEFAULT_EQUIVALENCE_TOL: f64 = 1e-2;

/// Loads the data named in `spec`, scales it, runs every requested variant
/// for every repeat and writes the outputs named in `spec.out`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let train =
        load_csv(&spec.train_path, &spec.csv).map_err(|e| e.context("loading training data"))?;
    let test = match &spec.test_path {
        Some(p) => {
            let opts = CsvOptions {
                class_count: Some(spec.csv.class_count.unwrap_or(train.class_count())),
                ..spec.csv.clone()
            };
            Some(load_csv(p, &opts).map_err(|e| e.context("loading test data"))?)
        }
        None => None,
    };
    run_experiment_on(spec, &train, test.as_ref())
}

/// [`run_experiment`] on datasets already in memory; the paths in `spec` are
/// only recorded.
pub fn run_experiment_on(
    spec: &ExperimentSpec,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<ExperimentResult> {
    spec.validate()?;
    if let Some(t) = test {
        if t.input_dim() != train.input_dim() {
            return Err(Error::Config(format!(
                "test set has {} features, training set {}",
                t.input_dim(),
                train.input_dim()
            )));
        }
    }
    let (train, test) = match (spec.normalize_inputs, test) {
        (true, Some(t)) => {
            let (a, b, _) = normalize_fit_apply(train, t)?;
            (a, Some(b))
        }
        (true, None) => {
            let (a, _, _) = normalize_fit_apply(train, train)?;
            (a, None)
        }
        (false, t) => (train.clone(), t.cloned()),
    };
    let q = train.class_count();
    let graph = if spec.mode == Mode::Central {
        None
    } else {
        Some(spec.graph()?)
    };
    if let Some(g) = &graph {
        if g.node_count() > train.len() {
            return Err(Error::Config(format!(
                "{} nodes but only {} training samples",
                g.node_count(),
                train.len()
            )));
        }
    }

    let mut runs = Vec::new();
    let mut equivalence_gap: Option<f64> = None;
    for repeat in 0..spec.repeats {
        let seed = spec.seed.wrapping_add(repeat as u64);
        let cfg = spec.ssfn_config(q, seed);
        for mode in spec.mode.variants() {
            let started = Instant::now();
            let context = format!("{} run, repeat {repeat} (seed {seed})", mode.label());
            let (stack, costs, dec) = match mode {
                Mode::Central => {
                    let run = train_centralized(train.features(), train.targets(), &cfg)
                        .map_err(|e| e.context(context.clone()))?;
                    (run.stack, run.layer_costs, None)
                }
                Mode::Sync | Mode::Async => {
                    let g = graph.as_ref().expect("decentralised modes build a graph");
                    let cm = if mode == Mode::Sync {
                        ConsensusMode::Sync
                    } else {
                        ConsensusMode::Async
                    };
                    let solver = spec.solver_config(cm, seed);
                    let parts = partition_uniform(&train, g.node_count(), seed, spec.shuffle)?;
                    let run = train_decentralized(&parts, g, &cfg, &solver)
                        .map_err(|e| e.context(context.clone()))?;
                    if spec.mode == Mode::Compare {
                        let gap = layer0_gap(&train, &run, cfg.eps)?;
                        equivalence_gap = Some(equivalence_gap.map_or(gap, |g: f64| g.max(gap)));
                    }
                    (run.stack.clone(), run.layer_costs.clone(), Some(run))
                }
                Mode::Compare => unreachable!("expanded above"),
            };
            let wall = if spec.timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let record = evaluate(
                spec,
                mode,
                repeat,
                seed,
                &stack,
                costs,
                dec.as_ref(),
                &train,
                test.as_ref(),
                wall,
            )?;
            log::info!(
                "{}: repeat {repeat}, test accuracy {:?}, final cost {:.4e}",
                mode.label(),
                record.test_accuracy,
                record.layer_costs.last().copied().unwrap_or(f64::NAN)
            );
            runs.push(record);
        }
    }

    let summary = spec
        .mode
        .variants()
        .into_iter()
        .map(|mode| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| r.test_accuracy)
                .collect();
            let (mean, std) = if accs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&accs);
                (Some(m), Some(s))
            };
            ModeSummary {
                mode,
                runs: spec.repeats,
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect();
    let result = ExperimentResult {
        spec: spec.clone(),
        input_dim: train.input_dim(),
        class_count: q,
        train_samples: train.len(),
        test_samples: test.as_ref().map_or(0, Dataset::len),
        runs,
        summary,
        equivalence_gap,
    };
    if let Some(out) = &spec.out {
        write_json(out, &result.to_json()?)?;
    }
    if let (Some(tol), Some(gap)) = (spec.equivalence_tol, equivalence_gap) {
        if gap > tol {
            return Err(Error::Equivalence { gap, tol });
        }
    }
    Ok(result)
}

/// Relative distance of every node's layer-0 readout from the pooled
/// optimum of the same consensus objective.
fn layer0_gap(train: &Dataset, run: &DecentralizedRun, eps: f64) -> Result<f64> {
    let pooled = centralized_layer_solve(train.features(), train.targets(), 0.0, eps)?;
    let scale = pooled.frobenius_norm().max(f64::MIN_POSITIVE);
    Ok(run.node_readouts[0]
        .iter()
        .map(|o| o.distance(&pooled) / scale)
        .fold(0.0, f64::max))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    spec: &ExperimentSpec,
    mode: Mode,
    repeat: usize,
    seed: u64,
    stack: &LayerStack,
    layer_costs: Vec<f64>,
    dec: Option<&DecentralizedRun>,
    train: &Dataset,
    test: Option<&Dataset>,
    wall_time_s: f64,
) -> Result<RunRecord> {
    let depth = stack.depth();
    let train_accuracy = accuracy(&stack.predict(train.features(), depth)?, train.labels());
    let layer_test_accuracy = match test {
        Some(t) => stack
            .predict_all_layers(t.features())?
            .iter()
            .map(|s| accuracy(s, t.labels()))
            .collect(),
        None => Vec::new(),
    };
    let test_accuracy = layer_test_accuracy.last().copied();
    let trace_dir = match (&spec.out, dec) {
        (Some(out), Some(run)) => Some(write_traces(out, spec, mode, repeat, run)?),
        _ => None,
    };
    let (consensus_errors, activations, rounds, messages) = match dec {
        Some(run) => (
            run.layer_stats.iter().map(|s| s.consensus_error).collect(),
            run.total_activations(),
            run.layer_stats.iter().map(|s| s.rounds).sum(),
            run.total_messages(),
        ),
        None => (Vec::new(), 0, 0, 0),
    };
    Ok(RunRecord {
        mode,
        repeat,
        seed,
        test_accuracy,
        train_accuracy,
        layer_costs,
        layer_test_accuracy,
        consensus_errors,
        activations,
        rounds,
        messages,
        wall_time_s,
        trace_dir,
    })
}

/// Trace directory for one run: `<out>.traces/<mode>-r<repeat>/`.
pub fn trace_dir(out: &Path, mode: Mode, repeat: usize) -> PathBuf {
    let mut base = out.as_os_str().to_owned();
    base.push(".traces");
    PathBuf::from(base).join(format!("{}-r{repeat}", mode.label()))
}

fn write_traces(
    out: &Path,
    spec: &ExperimentSpec,
    mode: Mode,
    repeat: usize,
    run: &DecentralizedRun,
) -> Result<PathBuf> {
    let dir = trace_dir(out, mode, repeat);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (l, trace) in run.traces.iter().enumerate() {
        trace.write_csv(&dir.join(format!("layer_{l:02}.csv")))?;
    }
    let spec_json = serde_json::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))?;
    write_json(&dir.join("spec.json"), &spec_json)?;
    Ok(dir)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub nodes: usize,
    pub degree: usize,
    pub mean_accuracy: Option<f64>,
    pub activations: u64,
    pub messages: u64,
    /// Messages per round (sync) or per activation (async).
    pub messages_per_step: f64,
    pub wall_time_s: f64,
    pub wall_per_activation_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub spec: ExperimentSpec,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    fn write(&self, out: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_json(out, &json)?;
        let csv_path = out.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))
    }
}

fn sweep_rows(spec: &ExperimentSpec, nodes: usize, degree: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for mode in [Mode::Sync, Mode::Async] {
        let sub = ExperimentSpec {
            mode,
            nodes,
            degree,
            edge_list: None,
            out: None,
            ..spec.clone()
        };
        let res = run_experiment(&sub)
            .map_err(|e| e.context(format!("{} with M={nodes}, d={degree}", mode.label())))?;
        let n = res.runs.len() as f64;
        let activations = res.runs.iter().map(|r| r.activations).sum::<u64>();
        let messages = res.runs.iter().map(|r| r.messages).sum::<u64>();
        let wall = res.runs.iter().map(|r| r.wall_time_s).sum::<f64>();
        let steps = match mode {
            Mode::Sync => res.runs.iter().map(|r| r.rounds).sum::<u64>(),
            _ => activations,
        };
        rows.push(SweepRow {
            mode,
            nodes,
            degree,
            mean_accuracy: res.summary_for(mode).and_then(|s| s.mean_accuracy),
            activations: activations / n as u64,
            messages: messages / n as u64,
            messages_per_step: messages as f64 / steps as f64,
            wall_time_s: wall / n,
            wall_per_activation_ns: 1e9 * wall / activations as f64,
        });
    }
    Ok(rows)
}

/// Sync and async runs for each degree on `spec.nodes` circulant nodes.
/// Every degree is validated before any training starts.
pub fn sweep_degree(spec: &ExperimentSpec, degrees: &[usize]) -> Result<SweepTable> {
    if degrees.is_empty() {
        return Err(Error::Config("no degrees to sweep".into()));
    }
    for &d in degrees {
        circulant_graph(spec.nodes, d)?;
    }
    let mut rows = Vec::new();
    for &d in degrees {
        rows.extend(sweep_rows(spec, spec.nodes, d)?);
    }
    let table = SweepTable {
        spec: spec.clone(),
        rows,
    };
    if let Some(out) = &spec.out {
        table.write(out)?;
    }
    Ok(table)
}

/// Sync and async runs on rings (`d = 2`, `d = 1` for two nodes) of each
/// size. Shards are redrawn per size from the same seed.
pub fn sweep_nodes(spec: &ExperimentSpec, counts: &[usize]) -> Result<SweepTable> {
    if counts.is_empty() {
        return Err(Error::Config("no node counts to sweep".into()));
    }
    let train = load_csv(&spec.train_path, &spec.csv)?;
    for &m in counts {
        if m > train.len() {
            return Err(Error::Config(format!(
                "{m} nodes but only {} training samples",
                train.len()
            )));
        }
        if m > 1 {
            circulant_graph(m, ring_degree(m))?;
        }
    }
    let mut rows = Vec::new();
    for &m in counts {
        rows.extend(sweep_rows(spec, m, ring_degree(m))?);
    }
    let table = SweepTable {
        spec: spec.clone(),
        rows,
    };
    if let Some(out) = &spec.out {
        table.write(out)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn compare_expands_to_three_modes() {
        assert_eq!(
            Mode::Compare.variants(),
            vec![Mode::Central, Mode::Sync, Mode::Async]
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::new("x.csv", Mode::Sync);
        s.nodes = 5;
        s.degree = 3;
        assert!(s.validate().is_err());
        s.degree = 2;
        assert!(s.validate().is_ok());
        s.repeats = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn async_budget_in_compare_mode() {
        let mut s = ExperimentSpec::new("x.csv", Mode::Compare);
        s.nodes = 20;
        s.iters = 200;
        assert_eq!(s.solver_config(ConsensusMode::Async, 0).max_iters, 4000);
        assert_eq!(s.solver_config(ConsensusMode::Sync, 0).max_iters, 200);
        s.mode = Mode::Async;
        assert_eq!(s.solver_config(ConsensusMode::Async, 0).max_iters, 200);
    }

    #[test]
    fn trace_dir_layout() {
        let d = trace_dir(Path::new("out/res.json"), Mode::Async, 2);
        assert_eq!(d, PathBuf::from("out/res.json.traces/async-r2"));
    }
}
