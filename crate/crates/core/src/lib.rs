//! Layer-wise training of a fixed-size SSFN (self-size-estimating
//! feedforward network) over a simulated decentralised node graph.
//!
//! Each layer's readout is a Frobenius-ball constrained least-squares
//! problem. It is solved either centrally ([`model`]) or by edge-consensus
//! ADMM between nodes that only exchange dual variables with their
//! neighbours, synchronously or in the asynchronous ARock form
//! ([`consensus`]).
//!
//! ```no_run
//! use dssfn::{circulant_graph, load_csv, partition_uniform, CsvOptions, SsfnConfig,
//!             SolverConfig, train_decentralized};
//!
//! let data = load_csv("data/vowel_train.csv", &CsvOptions::default())?;
//! let parts = partition_uniform(&data, 20, 7, true)?;
//! let graph = circulant_graph(20, 8)?;
//! let cfg = SsfnConfig::for_targets(data.class_count());
//! let solver = SolverConfig::synchronous(0.1, 200).with_gamma_first(10f64.powf(1.5));
//! let run = train_decentralized(&parts, &graph, &cfg, &solver)?;
//! println!("final cost {}", run.layer_costs.last().unwrap());
//! # Ok::<(), dssfn::Error>(())
//! ```

pub mod consensus;
pub mod data;
mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod topology;

pub use consensus::{
    consensus_error, project_frobenius, run_layer_consensus, train_decentralized, Activation,
    ConsensusMode, ConsensusOutcome, DecentralizedRun, EventTrace, Mailbox, NodeState,
    SolverConfig, TraceEvent,
};
pub use data::{
    load_csv, normalize_fit_apply, partition_uniform, CsvOptions, Dataset, LabelColumn, Partition,
    Scaling,
};
pub use error::{Error, Result};
pub use harness::{
    run_experiment, sweep_degree, sweep_nodes, ExperimentResult, ExperimentSpec, Mode,
};
pub use linalg::{mat_mul, random_matrix, solve_spd, DenseMatrix, LinalgError, SeededRng};
pub use model::{
    centralized_layer_solve, predict, train_centralized, CentralRun, LayerSolver, LayerStack,
    SsfnConfig,
};
pub use topology::{circulant_graph, Graph};
