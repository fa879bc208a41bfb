use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dssfn::harness::{
    run_experiment, sweep_degree, sweep_nodes, ExperimentResult, ExperimentSpec, Mode, SweepTable,
};
use dssfn::{Activation, CsvOptions, LabelColumn, LayerSolver};

/// Train SSFN models centrally or by decentralised ADMM consensus.
#[derive(Parser, Debug)]
#[command(name = "dssfn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configuration.
    Train(Common),
    /// Sync and async runs for several circulant degrees.
    SweepDegree {
        #[command(flatten)]
        common: Common,
        /// Comma-separated degrees, e.g. 2,4,8.
        #[arg(long, value_delimiter = ',', required = true)]
        degrees: Vec<usize>,
    },
    /// Sync and async runs on rings of several sizes (d = 2, or 1 for two nodes).
    SweepNodes {
        #[command(flatten)]
        common: Common,
        /// Comma-separated node counts, e.g. 2,4,8.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Central,
    Sync,
    Async,
    Compare,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ActivationArg {
    Uniform,
    RoundRobin,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SolverArg {
    Exact,
    RidgeProject,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_enum, default_value = "central")]
    mode: ModeArg,
    /// Training CSV (features then label per row unless --label-column).
    #[arg(long)]
    data: PathBuf,
    /// Held-out CSV in the same layout.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Number of nodes M.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    /// Circulant degree d.
    #[arg(long, default_value_t = 2)]
    degree: usize,
    /// Edge-list file replacing the circulant graph.
    #[arg(long)]
    edge_list: Option<PathBuf>,
    /// K: rounds (sync) or activations (async).
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Async activations in compare mode [default: iters * nodes].
    #[arg(long)]
    async_iters: Option<usize>,
    /// γ for the readout on raw inputs [default: --gamma].
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Ridge floor μ for the first readout.
    #[arg(long, default_value_t = 0.0)]
    mu0: f64,
    /// Ridge floor μ for hidden-layer readouts.
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// Norm bound ε [default: 2Q].
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 20)]
    layers: usize,
    /// Hidden width is 2Q + this.
    #[arg(long, default_value_t = 1000)]
    width_extra: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repeats with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Maximum extra message delay in async mode, in activations.
    #[arg(long, default_value_t = 0)]
    staleness: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value = "exact")]
    solver: SolverArg,
    /// Result JSON path; traces go to <out>.traces/.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Thread-per-node consensus runtime.
    #[arg(long)]
    parallel: bool,
    /// Keep the file order when splitting data across nodes.
    #[arg(long)]
    no_shuffle: bool,
    /// Skip min/max input scaling.
    #[arg(long)]
    no_normalize: bool,
    /// Keep raw random-block activations (no per-sample ℓ2 scaling).
    #[arg(long)]
    raw_random_block: bool,
    /// Write 0 for all wall-clock fields (byte-reproducible output).
    #[arg(long)]
    no_timing: bool,
    /// Zero-based label column [default: last].
    #[arg(long)]
    label_column: Option<usize>,
    /// Input files start with a header row.
    #[arg(long)]
    header: bool,
    /// Class count Q [default: max label + 1].
    #[arg(long)]
    classes: Option<usize>,
    /// Compare mode: fail if a node's layer-0 readout is further than this
    /// (relative) from the pooled solution.
    #[arg(long, default_value_t = dssfn::harness::DEFAULT_EQUIVALENCE_TOL)]
    equivalence_tol: f64,
}

impl Common {
    fn spec(&self) -> ExperimentSpec {
        let mut s = ExperimentSpec::new(
            &self.data,
            match self.mode {
                ModeArg::Central => Mode::Central,
                ModeArg::Sync => Mode::Sync,
                ModeArg::Async => Mode::Async,
                ModeArg::Compare => Mode::Compare,
            },
        );
        s.test_path = self.test.clone();
        s.csv = CsvOptions {
            label_column: self
                .label_column
                .map_or(LabelColumn::Last, LabelColumn::Index),
            has_header: self.header,
            class_count: self.classes,
        };
        s.nodes = self.nodes;
        s.degree = self.degree;
        s.edge_list = self.edge_list.clone();
        s.iters = self.iters;
        s.async_iters = self.async_iters;
        s.gamma0 = self.gamma0;
        s.gamma = self.gamma;
        s.mu0 = self.mu0;
        s.mu = self.mu;
        s.eta = self.eta;
        s.eps = self.eps;
        s.layers = self.layers;
        s.width_extra = self.width_extra;
        s.seed = self.seed;
        s.repeats = self.repeats;
        s.staleness = self.staleness;
        s.activation = match self.activation {
            ActivationArg::Uniform => Activation::Uniform,
            ActivationArg::RoundRobin => Activation::RoundRobin,
        };
        s.solver = match self.solver {
            SolverArg::Exact => LayerSolver::Exact,
            SolverArg::RidgeProject => LayerSolver::RidgeProject,
        };
        s.shuffle = !self.no_shuffle;
        s.normalize_inputs = !self.no_normalize;
        s.normalize_random_block = !self.raw_random_block;
        s.parallel = self.parallel;
        s.timing = !self.no_timing;
        s.equivalence_tol = Some(self.equivalence_tol);
        s.out = self.out.clone();
        s
    }
}

fn print_result(res: &ExperimentResult) {
    for s in &res.summary {
        match (s.mean_accuracy, s.std_accuracy) {
            (Some(m), Some(sd)) => println!(
                "{:<8} test accuracy {m:.2} ± {sd:.2} over {} run(s)",
                s.mode.label(),
                s.runs
            ),
            _ => println!("{:<8} {} run(s), no test set", s.mode.label(), s.runs),
        }
    }
    for r in &res.runs {
        println!(
            "  {:<8} seed {:<4} final cost {:.4e}  train acc {:.2}  activations {}  messages {}  {:.2}s",
            r.mode.label(),
            r.seed,
            r.layer_costs.last().copied().unwrap_or(f64::NAN),
            r.train_accuracy,
            r.activations,
            r.messages,
            r.wall_time_s
        );
    }
    if let Some(gap) = res.equivalence_gap {
        println!("layer-0 relative gap to pooled solution: {gap:.3e}");
    }
}

fn print_table(t: &SweepTable) -> Result<()> {
    print!("{}", t.to_csv()?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSSFN_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => {
            let res = run_experiment(&c.spec()).context("training failed")?;
            print_result(&res);
        }
        Command::SweepDegree { common, degrees } => {
            if degrees.is_empty() {
                bail!("--degrees needs at least one value");
            }
            let t = sweep_degree(&common.spec(), &degrees).context("degree sweep failed")?;
            print_table(&t)?;
        }
        Command::SweepNodes { common, counts } => {
            if counts.is_empty() {
                bail!("--counts needs at least one value");
            }
            let t = sweep_nodes(&common.spec(), &counts).context("node sweep failed")?;
            print_table(&t)?;
        }
    }
    Ok(())
}
