//! Edge-consensus ADMM for the layer-wise readout problem
//! `min Σ_m ‖T_m − O Y_m‖²  s.t. ‖O‖²_F ≤ ε`.
//!
//! Every node keeps its own iterate `O_m` and one outgoing dual `Z_{m,n}`
//! per neighbour. When node `m` is activated it computes
//!
//! ```text
//! O_m ← P_ε((2 T_m Y_mᵀ − Σ_n Z_{n,m}) · (2 Y_m Y_mᵀ + γ|E(m)| I)⁻¹)
//! Z_{m,n} ← Z_{m,n} − η((Z_{m,n} + Z_{n,m})/2 + γ O_m)      for n ∈ N(m)
//! ```
//!
//! and pushes the new `Z_{m,n}` to each neighbour. Nothing else is shared.
//! The synchronous mode runs all nodes per round on the previous round's
//! duals; the asynchronous mode activates one node at a time with whatever
//! (possibly stale) duals its mailbox has delivered.
//!
//! Two runtimes implement the same contract: the deterministic simulator in
//! [`run_layer_consensus`] and a thread-per-node runtime
//! ([`run_layer_parallel`]) whose results satisfy the same convergence
//! criteria but are not bit-reproducible.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Barrier, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::linalg::{
    add_diagonal, cholesky, gram_cols, gram_rows, mat_mul, mat_mul_nt, spectral_norm, DenseMatrix,
    LinalgError, SeededRng, SpdFactor,
};
use crate::model::{
    assemble_weight, propagate, random_block, residual_cost, LayerStack, SsfnConfig,
};
use crate::topology::Graph;
use crate::{Error, Result};

/// Projection onto `{O : ‖O‖²_F ≤ ε}`.
pub fn project_frobenius(o: &DenseMatrix, eps: f64) -> DenseMatrix {
    let mut out = o.clone();
    project_in_place(&mut out, eps);
    out
}

fn project_in_place(o: &mut DenseMatrix, eps: f64) {
    let sq = o.frobenius_norm_sq();
    if sq > eps {
        o.scale_in_place((eps / sq).sqrt());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusMode {
    /// Jacobi sweeps: `K` counts rounds of `M` updates.
    Sync,
    /// One activation at a time: `K` counts activations.
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// I.i.d. uniform node draws from the seeded generator.
    #[default]
    Uniform,
    /// Nodes `0, 1, …, M−1, 0, …`. Message delay is counted from the end of
    /// the sweep in which a message was sent, so with zero staleness every
    /// sweep sees exactly the previous sweep's duals (a synchronous round).
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Penalty `γ` for hidden layers.
    pub gamma: f64,
    /// Penalty for the readout on raw inputs; falls back to `gamma`.
    pub gamma_first: Option<f64>,
    pub eta: f64,
    /// `K`: rounds (sync) or activations (async).
    pub max_iters: usize,
    pub mode: ConsensusMode,
    pub activation: Activation,
    pub activation_seed: u64,
    /// Largest extra delivery delay, in activations.
    pub staleness_cap: usize,
    /// Record wall-clock time in traces; off gives byte-reproducible output.
    pub record_timing: bool,
    /// Thread-per-node runtime instead of the simulator.
    pub parallel: bool,
}

impl SolverConfig {
    pub fn synchronous(gamma: f64, rounds: usize) -> Self {
        Self {
            gamma,
            gamma_first: None,
            eta: 0.5,
            max_iters: rounds,
            mode: ConsensusMode::Sync,
            activation: Activation::Uniform,
            activation_seed: 0,
            staleness_cap: 0,
            record_timing: false,
            parallel: false,
        }
    }

    pub fn asynchronous(gamma: f64, activations: usize) -> Self {
        Self {
            mode: ConsensusMode::Async,
            ..Self::synchronous(gamma, activations)
        }
    }

    pub fn with_gamma_first(mut self, gamma: f64) -> Self {
        self.gamma_first = Some(gamma);
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_staleness(mut self, cap: usize) -> Self {
        self.staleness_cap = cap;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.activation_seed = seed;
        self
    }

    pub fn with_timing(mut self, on: bool) -> Self {
        self.record_timing = on;
        self
    }

    pub fn with_parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn gamma_for_layer(&self, layer: usize) -> f64 {
        match (layer, self.gamma_first) {
            (0, Some(g)) => g,
            _ => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [Some(self.gamma), self.gamma_first].into_iter().flatten() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cached factor of `2YYᵀ + cI`, stored in whichever form is smaller.
#[derive(Debug, Clone)]
enum NodeFactor {
    /// Cholesky of `2YYᵀ + cI` (p×p).
    Primal(SpdFactor),
    /// Cholesky of `cI + 2YᵀY` (J×J), applied through Woodbury:
    /// `B(cI + 2YYᵀ)⁻¹ = (B − 2(BY)(cI + 2YᵀY)⁻¹Yᵀ)/c`.
    Dual { factor: SpdFactor, c: f64 },
    /// No neighbours (`c = 0`): the update is the constant least-squares
    /// readout, computed once with dead feature rows dropped.
    Isolated(DenseMatrix),
}

/// A dual variable in flight from `from` to `to`.
#[derive(Debug, Clone)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    /// Sender's step counter at send time.
    pub sent_at: u64,
    pub payload: DenseMatrix,
}

/// One node's view of a layer problem.
#[derive(Debug, Clone)]
pub struct NodeState {
    id: usize,
    neighbors: Vec<usize>,
    y: DenseMatrix,
    t: DenseMatrix,
    gamma: f64,
    eps: f64,
    factor: NodeFactor,
    /// `2 T Yᵀ`.
    b0: DenseMatrix,
    o: DenseMatrix,
    out_duals: Vec<DenseMatrix>,
    in_duals: Vec<DenseMatrix>,
}

impl NodeState {
    /// Zero iterate and duals, factor of `2YYᵀ + γ|E(m)|I` cached.
    pub fn new(
        id: usize,
        y: DenseMatrix,
        t: DenseMatrix,
        neighbors: &[usize],
        gamma: f64,
        eps: f64,
    ) -> Result<Self> {
        if y.cols() != t.cols() {
            return Err(Error::from(LinalgError::DimensionMismatch {
                op: "node data",
                left: y.shape(),
                right: t.shape(),
            })
            .at_node(id));
        }
        let (p, j) = y.shape();
        let q = t.rows();
        let c = gamma * neighbors.len() as f64;
        let factor = if c == 0.0 {
            NodeFactor::Isolated(
                crate::model::ridge_solution(&y, &t, 0.0).map_err(|e| e.at_node(id))?,
            )
        } else if c > 0.0 && j < p {
            let mut a = gram_cols(&y).scale(2.0);
            add_diagonal(&mut a, c);
            NodeFactor::Dual {
                factor: cholesky(&a).map_err(|e| Error::from(e).at_node(id))?,
                c,
            }
        } else {
            let mut s = gram_rows(&y).scale(2.0);
            add_diagonal(&mut s, c);
            NodeFactor::Primal(cholesky(&s).map_err(|e| Error::from(e).at_node(id))?)
        };
        let b0 = mat_mul_nt(&t, &y)?.scale(2.0);
        let zero = DenseMatrix::zeros(q, p);
        Ok(Self {
            id,
            neighbors: neighbors.to_vec(),
            y,
            t,
            gamma,
            eps,
            factor,
            b0,
            o: zero.clone(),
            out_duals: vec![zero.clone(); neighbors.len()],
            in_duals: vec![zero; neighbors.len()],
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn iterate(&self) -> &DenseMatrix {
        &self.o
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.y
    }

    pub fn targets(&self) -> &DenseMatrix {
        &self.t
    }

    /// `Z_{m,n}` in neighbour order.
    pub fn out_duals(&self) -> &[DenseMatrix] {
        &self.out_duals
    }

    /// Last received `Z_{n,m}` in neighbour order.
    pub fn in_duals(&self) -> &[DenseMatrix] {
        &self.in_duals
    }

    pub fn uses_woodbury(&self) -> bool {
        matches!(self.factor, NodeFactor::Dual { .. })
    }

    /// `‖T_m − O_m Y_m‖²_F`.
    pub fn local_cost(&self) -> f64 {
        residual_cost(&self.o, &self.y, &self.t).expect("shapes fixed at construction")
    }

    /// Stores a neighbour's dual.
    pub fn receive(&mut self, from: usize, z: DenseMatrix) -> Result<()> {
        let slot = self
            .neighbors
            .binary_search(&from)
            .map_err(|_| Error::Topology(format!("node {} has no neighbour {from}", self.id)))?;
        if z.shape() != self.o.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "receive",
                left: self.o.shape(),
                right: z.shape(),
            }
            .into());
        }
        self.in_duals[slot] = z;
        Ok(())
    }

    fn solve_local(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        match &self.factor {
            NodeFactor::Primal(f) => Ok(f.solve_right(b)?),
            NodeFactor::Isolated(o) => Ok(o.clone()),
            NodeFactor::Dual { factor, c } => {
                let by = mat_mul(b, &self.y)?;
                let corr = mat_mul_nt(&factor.solve_right(&by)?, &self.y)?;
                let mut out = b.clone();
                out.axpy(-2.0, &corr);
                out.scale_in_place(1.0 / c);
                Ok(out)
            }
        }
    }

    /// One activation; see the module docs. Returns one message per
    /// neighbour, stamped with `step`.
    pub fn update(&mut self, eta: f64, step: u64) -> Result<Vec<Message>> {
        let mut b = self.b0.clone();
        for z in &self.in_duals {
            b.axpy(-1.0, z);
        }
        let mut o = self.solve_local(&b).map_err(|e| e.at_node(self.id))?;
        project_in_place(&mut o, self.eps);
        self.o = o;

        let g = self.gamma;
        let mut out = Vec::with_capacity(self.neighbors.len());
        for (i, &n) in self.neighbors.iter().enumerate() {
            let zin = self.in_duals[i].as_slice();
            let z = self.out_duals[i].as_mut_slice();
            for ((zv, &ziv), &ov) in z.iter_mut().zip(zin).zip(self.o.as_slice()) {
                *zv -= eta * (0.5 * (*zv + ziv) + g * ov);
            }
            out.push(Message {
                from: self.id,
                to: n,
                sent_at: step,
                payload: self.out_duals[i].clone(),
            });
        }
        Ok(out)
    }
}

/// Free-function form of [`NodeState::update`].
pub fn node_update(state: &mut NodeState, cfg: &SolverConfig, step: u64) -> Result<Vec<Message>> {
    state.update(cfg.eta, step)
}

/// FIFO queues, one per directed link, with delivery-time stamps.
#[derive(Debug)]
pub struct Mailbox {
    links: BTreeMap<(usize, usize), VecDeque<(u64, Message)>>,
    sent: u64,
    delivered: u64,
}

impl Mailbox {
    pub fn new(g: &Graph) -> Self {
        let mut links = BTreeMap::new();
        for &(a, b) in g.edges() {
            links.insert((a, b), VecDeque::new());
            links.insert((b, a), VecDeque::new());
        }
        Self {
            links,
            sent: 0,
            delivered: 0,
        }
    }

    /// Queues `msg` for delivery at step `due` or later. A message never
    /// becomes due before an earlier one on the same link.
    pub fn post(&mut self, msg: Message, due: u64) -> Result<()> {
        let queue = self
            .links
            .get_mut(&(msg.from, msg.to))
            .ok_or_else(|| Error::Topology(format!("no link {} -> {}", msg.from, msg.to)))?;
        let due = queue.back().map_or(due, |(last, _)| due.max(*last));
        queue.push_back((due, msg));
        self.sent += 1;
        Ok(())
    }

    /// Hands every message due at `now` to its receiver, in link order and
    /// FIFO within a link.
    pub fn deliver_due(&mut self, now: u64, nodes: &mut [NodeState]) -> Result<usize> {
        let mut count = 0;
        for queue in self.links.values_mut() {
            while queue.front().is_some_and(|(due, _)| *due <= now) {
                let (_, msg) = queue.pop_front().expect("front checked");
                nodes[msg.to].receive(msg.from, msg.payload)?;
                count += 1;
            }
        }
        self.delivered += count as u64;
        Ok(count)
    }

    pub fn flush(&mut self, nodes: &mut [NodeState]) -> Result<usize> {
        self.deliver_due(u64::MAX, nodes)
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn in_flight(&self) -> usize {
        self.links.values().map(VecDeque::len).sum()
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub k: u64,
    /// Activated node; empty for a synchronous round.
    pub node: Option<usize>,
    /// Activated node's local cost, or the sum over nodes for a round.
    pub local_cost: f64,
    pub consensus_error: f64,
    /// Nanoseconds since the layer's consensus started; 0 when timing is off.
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn consensus_errors(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.consensus_error).collect()
    }

    /// CSV with header `k,node,local_cost,consensus_error,wall_ns`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.events.is_empty() {
            w.write_record(["k", "node", "local_cost", "consensus_error", "wall_ns"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Result of one layer's consensus run.
#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub iterates: Vec<DenseMatrix>,
    pub trace: EventTrace,
    /// Total node updates.
    pub activations: u64,
    /// Synchronous rounds (0 in async mode).
    pub rounds: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    /// Messages sent in each step (round or activation).
    pub sends_per_step: Vec<u32>,
    pub final_consensus_error: f64,
}

/// `max_{(m,n) ∈ E} ‖O_m − O_n‖_F`.
pub fn consensus_error(iterates: &[DenseMatrix], g: &Graph) -> f64 {
    g.edges()
        .iter()
        .map(|&(a, b)| iterates[a].distance(&iterates[b]))
        .fold(0.0, f64::max)
}

/// `max ‖(Z_{m,n} + Z_{n,m})/2 + γ O_m‖_F` over directed links; zero at a
/// fixed point of the update.
pub fn dual_residual(nodes: &[NodeState]) -> f64 {
    let mut worst: f64 = 0.0;
    for node in nodes {
        for (i, &n) in node.neighbors.iter().enumerate() {
            let back = nodes[n]
                .neighbors
                .binary_search(&node.id)
                .expect("undirected graph");
            let zmn = node.out_duals[i].as_slice();
            let znm = nodes[n].out_duals[back].as_slice();
            let s: f64 = zmn
                .iter()
                .zip(znm)
                .zip(node.o.as_slice())
                .map(|((a, b), o)| {
                    let v = 0.5 * (a + b) + node.gamma * o;
                    v * v
                })
                .sum();
            worst = worst.max(s.sqrt());
        }
    }
    worst
}

fn check_nodes(nodes: &[NodeState], g: &Graph) -> Result<()> {
    if nodes.len() != g.node_count() {
        return Err(Error::Config(format!(
            "{} node states for a graph of {} nodes",
            nodes.len(),
            g.node_count()
        )));
    }
    if !g.is_connected() {
        return Err(Error::Topology("graph is disconnected".into()));
    }
    let shape = nodes[0].o.shape();
    for (m, node) in nodes.iter().enumerate() {
        if node.id != m || node.neighbors != g.adjacency()[m] {
            return Err(Error::Topology(format!(
                "node state {m} does not match the graph"
            )));
        }
        if node.o.shape() != shape {
            return Err(Error::Config(format!(
                "node {m} works on {:?}, node 0 on {shape:?}",
                node.o.shape()
            )));
        }
    }
    Ok(())
}

struct Clock(Option<Instant>);

impl Clock {
    fn new(on: bool) -> Self {
        Clock(on.then(Instant::now))
    }

    fn ns(&self) -> u64 {
        self.0.map_or(0, |t| t.elapsed().as_nanos() as u64)
    }
}

/// Runs one layer's consensus in the deterministic simulator. `layer`
/// selects the activation stream so layers draw independent schedules.
pub fn run_layer_consensus(
    nodes: &mut [NodeState],
    g: &Graph,
    cfg: &SolverConfig,
    layer: usize,
) -> Result<ConsensusOutcome> {
    cfg.validate()?;
    check_nodes(nodes, g)?;
    if cfg.parallel {
        return run_layer_parallel(nodes, g, cfg);
    }
    match cfg.mode {
        ConsensusMode::Sync => run_sync(nodes, g, cfg),
        ConsensusMode::Async => run_async(nodes, g, cfg, layer),
    }
}

fn iterates(nodes: &[NodeState]) -> Vec<DenseMatrix> {
    nodes.iter().map(|n| n.o.clone()).collect()
}

fn run_sync(nodes: &mut [NodeState], g: &Graph, cfg: &SolverConfig) -> Result<ConsensusOutcome> {
    let clock = Clock::new(cfg.record_timing);
    let mut mailbox = Mailbox::new(g);
    let mut trace = EventTrace::default();
    let mut sends = Vec::with_capacity(cfg.max_iters);
    for k in 1..=cfg.max_iters as u64 {
        let before = mailbox.sent();
        let mut outgoing = Vec::new();
        for node in nodes.iter_mut() {
            outgoing.extend(node.update(cfg.eta, k)?);
        }
        for msg in outgoing {
            mailbox.post(msg, k)?;
        }
        mailbox.deliver_due(k, nodes)?;
        sends.push((mailbox.sent() - before) as u32);
        let its: Vec<&DenseMatrix> = nodes.iter().map(|n| &n.o).collect();
        let err = g
            .edges()
            .iter()
            .map(|&(a, b)| its[a].distance(its[b]))
            .fold(0.0, f64::max);
        trace.events.push(TraceEvent {
            k,
            node: None,
            local_cost: nodes.iter().map(NodeState::local_cost).sum(),
            consensus_error: err,
            wall_ns: clock.ns(),
        });
    }
    let its = iterates(nodes);
    Ok(ConsensusOutcome {
        final_consensus_error: consensus_error(&its, g),
        iterates: its,
        trace,
        activations: (cfg.max_iters * nodes.len()) as u64,
        rounds: cfg.max_iters as u64,
        messages_sent: mailbox.sent(),
        messages_delivered: mailbox.delivered(),
        sends_per_step: sends,
    })
}

fn run_async(
    nodes: &mut [NodeState],
    g: &Graph,
    cfg: &SolverConfig,
    layer: usize,
) -> Result<ConsensusOutcome> {
    let clock = Clock::new(cfg.record_timing);
    let m_count = nodes.len() as u64;
    let mut rng = SeededRng::with_stream(cfg.activation_seed, layer as u64);
    let mut mailbox = Mailbox::new(g);
    let mut incident = vec![Vec::new(); nodes.len()];
    for (e, &(a, b)) in g.edges().iter().enumerate() {
        incident[a].push(e);
        incident[b].push(e);
    }
    let mut edge_dist = vec![0.0f64; g.edge_count()];
    let mut trace = EventTrace::default();
    let mut sends = Vec::with_capacity(cfg.max_iters);
    for k in 1..=cfg.max_iters as u64 {
        mailbox.deliver_due(k, nodes)?;
        let m = match cfg.activation {
            Activation::Uniform => rng.next_below(m_count) as usize,
            Activation::RoundRobin => ((k - 1) % m_count) as usize,
        };
        let msgs = nodes[m].update(cfg.eta, k)?;
        sends.push(msgs.len() as u32);
        for msg in msgs {
            let extra = if cfg.staleness_cap > 0 {
                rng.next_below(cfg.staleness_cap as u64 + 1)
            } else {
                0
            };
            let base = match cfg.activation {
                Activation::Uniform => k,
                Activation::RoundRobin => k.div_ceil(m_count) * m_count,
            };
            mailbox.post(msg, base + 1 + extra)?;
        }
        for &e in &incident[m] {
            let (a, b) = g.edges()[e];
            edge_dist[e] = nodes[a].o.distance(&nodes[b].o);
        }
        trace.events.push(TraceEvent {
            k,
            node: Some(m),
            local_cost: nodes[m].local_cost(),
            consensus_error: edge_dist.iter().copied().fold(0.0, f64::max),
            wall_ns: clock.ns(),
        });
    }
    mailbox.flush(nodes)?;
    let its = iterates(nodes);
    Ok(ConsensusOutcome {
        final_consensus_error: consensus_error(&its, g),
        iterates: its,
        trace,
        activations: cfg.max_iters as u64,
        rounds: 0,
        messages_sent: mailbox.sent(),
        messages_delivered: mailbox.delivered(),
        sends_per_step: sends,
    })
}

/// Thread-per-node runtime. Each worker owns its `NodeState`; the only
/// channels between workers are per-node mpsc inboxes (FIFO per sender).
/// Sync mode uses a barrier per round; async mode has none, and workers
/// claim activation numbers from a shared counter until `K` is spent.
///
/// Trace rows need every node's iterate, so workers also publish a copy of
/// `O_m` to a tracing snapshot after each update. The algorithm never reads
/// it.
pub fn run_layer_parallel(
    nodes: &mut [NodeState],
    g: &Graph,
    cfg: &SolverConfig,
) -> Result<ConsensusOutcome> {
    let m_count = nodes.len();
    let clock = Clock::new(cfg.record_timing);
    let (senders, receivers): (Vec<_>, Vec<_>) =
        (0..m_count).map(|_| mpsc::channel::<Message>()).unzip();
    let snapshot = Mutex::new(iterates(nodes));
    let rows = Mutex::new(Vec::<(TraceEvent, u32)>::new());
    let sent = AtomicU64::new(0);
    let delivered = AtomicU64::new(0);
    let counter = AtomicU64::new(0);
    let abort = AtomicBool::new(false);
    let barrier = Barrier::new(m_count);
    let failure = Mutex::new(None::<Error>);
    let k_max = cfg.max_iters as u64;

    let leftovers = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m_count);
        for (node, rx) in nodes.iter_mut().zip(receivers) {
            let senders = senders.clone();
            let (snapshot, rows, sent, delivered, counter, abort, barrier, failure, clock) = (
                &snapshot, &rows, &sent, &delivered, &counter, &abort, &barrier, &failure, &clock,
            );
            handles.push(scope.spawn(move || {
                let fail = |e: Error| {
                    abort.store(true, Ordering::SeqCst);
                    failure.lock().expect("failure slot").get_or_insert(e);
                };
                let drain = |node: &mut NodeState| -> Result<()> {
                    while let Ok(msg) = rx.try_recv() {
                        delivered.fetch_add(1, Ordering::Relaxed);
                        node.receive(msg.from, msg.payload)?;
                    }
                    Ok(())
                };
                let publish = |node: &NodeState, k: u64, n_sent: u32| {
                    let err = {
                        let mut snap = snapshot.lock().expect("snapshot");
                        snap[node.id] = node.o.clone();
                        consensus_error(&snap, g)
                    };
                    let ev = TraceEvent {
                        k,
                        node: Some(node.id),
                        local_cost: node.local_cost(),
                        consensus_error: err,
                        wall_ns: clock.ns(),
                    };
                    rows.lock().expect("rows").push((ev, n_sent));
                };
                match cfg.mode {
                    ConsensusMode::Sync => {
                        for k in 1..=k_max {
                            if !abort.load(Ordering::SeqCst) {
                                match node.update(cfg.eta, k) {
                                    Ok(msgs) => {
                                        let n = msgs.len() as u32;
                                        for msg in msgs {
                                            sent.fetch_add(1, Ordering::Relaxed);
                                            senders[msg.to].send(msg).expect("receiver alive");
                                        }
                                        publish(node, k, n);
                                    }
                                    Err(e) => fail(e),
                                }
                            }
                            barrier.wait();
                            if let Err(e) = drain(node) {
                                fail(e);
                            }
                            barrier.wait();
                            if abort.load(Ordering::SeqCst) {
                                break;
                            }
                        }
                    }
                    ConsensusMode::Async => loop {
                        if abort.load(Ordering::SeqCst) {
                            break;
                        }
                        let k = counter.fetch_add(1, Ordering::SeqCst) + 1;
                        if k > k_max {
                            break;
                        }
                        let step = drain(node).and_then(|_| node.update(cfg.eta, k));
                        match step {
                            Ok(msgs) => {
                                let n = msgs.len() as u32;
                                for msg in msgs {
                                    sent.fetch_add(1, Ordering::Relaxed);
                                    senders[msg.to].send(msg).expect("receiver alive");
                                }
                                publish(node, k, n);
                            }
                            Err(e) => {
                                fail(e);
                                break;
                            }
                        }
                        std::thread::yield_now();
                    },
                }
                // A finished worker hands its inbox back, keeping it alive for
                // neighbours that are still sending.
                (node.id, rx)
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect::<Vec<_>>()
    });
    if let Some(e) = failure.into_inner().expect("failure slot") {
        return Err(e);
    }
    drop(senders);
    for (id, rx) in leftovers {
        for msg in rx.try_iter() {
            delivered.fetch_add(1, Ordering::Relaxed);
            nodes[id].receive(msg.from, msg.payload)?;
        }
    }
    let mut rows = rows.into_inner().expect("rows");
    rows.sort_by_key(|(e, _)| (e.k, e.node));
    let (trace, sends) = match cfg.mode {
        ConsensusMode::Async => {
            let sends = rows.iter().map(|(_, n)| *n).collect();
            (rows.into_iter().map(|(e, _)| e).collect(), sends)
        }
        ConsensusMode::Sync => {
            let mut merged: Vec<TraceEvent> = Vec::new();
            let mut sends: Vec<u32> = Vec::new();
            for (e, n) in rows {
                match merged.last_mut() {
                    Some(last) if last.k == e.k => {
                        last.local_cost += e.local_cost;
                        last.consensus_error = last.consensus_error.max(e.consensus_error);
                        last.wall_ns = last.wall_ns.max(e.wall_ns);
                        *sends.last_mut().expect("paired") += n;
                    }
                    _ => {
                        merged.push(TraceEvent { node: None, ..e });
                        sends.push(n);
                    }
                }
            }
            (merged, sends)
        }
    };
    let its = iterates(nodes);
    let activations = match cfg.mode {
        ConsensusMode::Sync => k_max * m_count as u64,
        ConsensusMode::Async => k_max,
    };
    Ok(ConsensusOutcome {
        final_consensus_error: consensus_error(&its, g),
        iterates: its,
        trace: EventTrace { events: trace },
        activations,
        rounds: if cfg.mode == ConsensusMode::Sync {
            k_max
        } else {
            0
        },
        messages_sent: sent.load(Ordering::SeqCst),
        messages_delivered: delivered.load(Ordering::SeqCst),
        sends_per_step: sends,
    })
}

/// Per-layer bookkeeping of a decentralised run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub gamma: f64,
    pub activations: u64,
    pub rounds: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    /// Max edge disagreement after the last update.
    pub consensus_error: f64,
    pub dual_residual: f64,
    /// Largest spectral norm of the node feature matrices.
    pub max_feature_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DecentralizedRun {
    /// Shared stack built from the averaged readouts `O⋆_l`.
    pub stack: LayerStack,
    /// `Σ_m ‖T_m − O⋆_l Y_{l,m}‖²_F` for every layer.
    pub layer_costs: Vec<f64>,
    /// `node_readouts[l][m]` is node `m`'s final `O_{l,m}`.
    pub node_readouts: Vec<Vec<DenseMatrix>>,
    pub traces: Vec<EventTrace>,
    pub layer_stats: Vec<LayerStats>,
}

impl DecentralizedRun {
    /// Node `m`'s own stack: shared weights with its local readouts.
    pub fn node_stack(&self, m: usize) -> Result<LayerStack> {
        let readouts = self
            .node_readouts
            .iter()
            .map(|layer| layer[m].clone())
            .collect();
        LayerStack::new(
            self.stack.config().clone(),
            self.stack.input_dim(),
            self.stack.target_dim(),
            self.stack.weights().to_vec(),
            readouts,
        )
    }

    pub fn total_messages(&self) -> u64 {
        self.layer_stats.iter().map(|s| s.messages_sent).sum()
    }

    pub fn total_activations(&self) -> u64 {
        self.layer_stats.iter().map(|s| s.activations).sum()
    }
}

/// Layer-by-layer training where every readout comes out of
/// [`run_layer_consensus`]. All nodes draw the same random blocks from the
/// shared seed; the per-layer readouts are combined by an exact average
/// (an all-reduce in the simulator) so every node assembles the same
/// `W_{l+1}`.
pub fn train_decentralized(
    parts: &Partition,
    g: &Graph,
    cfg: &SsfnConfig,
    solver: &SolverConfig,
) -> Result<DecentralizedRun> {
    let q = parts.class_count();
    cfg.validate(q)?;
    solver.validate()?;
    let m_count = parts.shards().len();
    if g.node_count() != m_count {
        return Err(Error::Config(format!(
            "{m_count} data shards for a graph of {} nodes",
            g.node_count()
        )));
    }
    let targets: Vec<&DenseMatrix> = parts.shards().iter().map(|s| s.targets()).collect();
    let mut ys: Vec<DenseMatrix> = parts
        .shards()
        .iter()
        .map(|s| s.features().clone())
        .collect();
    let input_dim = ys[0].rows();

    let mut weights = Vec::with_capacity(cfg.max_layers);
    let mut shared: Vec<DenseMatrix> = Vec::with_capacity(cfg.max_layers + 1);
    let mut node_readouts = Vec::with_capacity(cfg.max_layers + 1);
    let mut costs = Vec::with_capacity(cfg.max_layers + 1);
    let mut traces = Vec::with_capacity(cfg.max_layers + 1);
    let mut stats = Vec::with_capacity(cfg.max_layers + 1);

    for l in 0..=cfg.max_layers {
        let layer_err = |e: Error| e.at_layer(l);
        if l > 0 {
            let r = random_block(cfg, l, ys[0].rows(), q);
            let w = assemble_weight(&shared[l - 1], &r, q).map_err(layer_err)?;
            for y in ys.iter_mut() {
                *y = propagate(&w, y, q, cfg.normalize_random_block).map_err(layer_err)?;
            }
            weights.push(w);
        }
        let gamma = solver.gamma_for_layer(l);
        let max_norm = ys.iter().map(spectral_norm).fold(0.0, f64::max);
        if gamma >= 2.0 / max_norm {
            log::warn!(
                "layer {l}: gamma = {gamma} exceeds the step bound 2/||Y|| = {:.4e}",
                2.0 / max_norm
            );
        }
        let mut nodes = ys
            .iter()
            .zip(&targets)
            .enumerate()
            .map(|(m, (y, t))| {
                NodeState::new(m, y.clone(), (*t).clone(), g.neighbors(m)?, gamma, cfg.eps)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(layer_err)?;
        let outcome = run_layer_consensus(&mut nodes, g, solver, l).map_err(layer_err)?;

        let mut avg = outcome.iterates[0].clone();
        for o in &outcome.iterates[1..] {
            avg.axpy(1.0, o);
        }
        avg.scale_in_place(1.0 / m_count as f64);
        project_in_place(&mut avg, cfg.eps);

        let mut cost = 0.0;
        for (y, t) in ys.iter().zip(&targets) {
            cost += residual_cost(&avg, y, t)?;
        }
        log::debug!(
            "layer {l}: cost {cost:.6e}, consensus error {:.3e}",
            outcome.final_consensus_error
        );
        stats.push(LayerStats {
            gamma,
            activations: outcome.activations,
            rounds: outcome.rounds,
            messages_sent: outcome.messages_sent,
            messages_delivered: outcome.messages_delivered,
            consensus_error: outcome.final_consensus_error,
            dual_residual: dual_residual(&nodes),
            max_feature_norm: max_norm,
        });
        costs.push(cost);
        shared.push(avg);
        node_readouts.push(outcome.iterates);
        traces.push(outcome.trace);
    }
    let stack = LayerStack::new(cfg.clone(), input_dim, q, weights, shared)?;
    Ok(DecentralizedRun {
        stack,
        layer_costs: costs,
        node_readouts,
        traces,
        layer_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_matrix;
    use crate::topology::circulant_graph;
    use std::num::NonZeroUsize;

    fn rand_mat(seed: u64, r: usize, c: usize) -> DenseMatrix {
        random_matrix(
            &mut SeededRng::new(seed),
            NonZeroUsize::new(r).unwrap(),
            NonZeroUsize::new(c).unwrap(),
            1.0,
        )
    }

    #[test]
    fn projection_cases() {
        let o = DenseMatrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        let p = project_frobenius(&o, 4.0);
        assert_eq!(p.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(p.frobenius_norm_sq(), 4.0);
        let small = o.scale(0.1);
        assert_eq!(project_frobenius(&small, 4.0), small);
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(project_frobenius(&z, 1.0), z);
    }

    fn ring_nodes(gamma: f64, eps: f64) -> (Graph, Vec<NodeState>) {
        let g = circulant_graph(4, 2).unwrap();
        let nodes = (0..4)
            .map(|m| {
                NodeState::new(
                    m,
                    rand_mat(10 + m as u64, 5, 12),
                    rand_mat(20 + m as u64, 2, 12),
                    g.neighbors(m).unwrap(),
                    gamma,
                    eps,
                )
                .unwrap()
            })
            .collect();
        (g, nodes)
    }

    #[test]
    fn first_activation_matches_direct_formula() {
        let (_, mut nodes) = ring_nodes(0.3, 100.0);
        let node = &mut nodes[0];
        let (y, t) = (node.features().clone(), node.targets().clone());
        let msgs = node.update(0.5, 1).unwrap();
        let mut s = gram_rows(&y).scale(2.0);
        add_diagonal(&mut s, 0.3 * 2.0);
        let b = mat_mul_nt(&t, &y).unwrap().scale(2.0);
        let direct = project_frobenius(
            &crate::linalg::solve_spd(&s, &b.transpose())
                .unwrap()
                .transpose(),
            100.0,
        );
        assert!(node.iterate().distance(&direct) <= 1e-10 * direct.frobenius_norm());
        assert_eq!(msgs.len(), 2);
        let expect = node.iterate().scale(-0.5 * 0.3);
        for m in msgs {
            assert!(m.payload.distance(&expect) <= 1e-14);
        }
    }

    #[test]
    fn woodbury_matches_primal_factor() {
        // J < p triggers the dual factor; compare against a direct solve.
        let y = rand_mat(1, 9, 4);
        let t = rand_mat(2, 2, 4);
        let mut node = NodeState::new(0, y.clone(), t.clone(), &[1, 2], 0.7, 1e6).unwrap();
        assert!(node.uses_woodbury());
        node.update(0.5, 1).unwrap();
        let mut s = gram_rows(&y).scale(2.0);
        add_diagonal(&mut s, 1.4);
        let b = mat_mul_nt(&t, &y).unwrap().scale(2.0);
        let direct = crate::linalg::solve_spd(&s, &b.transpose())
            .unwrap()
            .transpose();
        assert!(node.iterate().distance(&direct) <= 1e-10 * direct.frobenius_norm());
    }

    #[test]
    fn update_keeps_iterate_feasible() {
        let (g, mut nodes) = ring_nodes(0.5, 0.05);
        let cfg = SolverConfig::asynchronous(0.5, 60)
            .with_staleness(3)
            .with_seed(9);
        let out = run_layer_consensus(&mut nodes, &g, &cfg, 0).unwrap();
        for o in &out.iterates {
            assert!(o.frobenius_norm_sq() <= 0.05 + 1e-9);
        }
    }

    #[test]
    fn consensus_error_cases() {
        let g = circulant_graph(2, 1).unwrap();
        let a = DenseMatrix::zeros(1, 3);
        assert_eq!(consensus_error(&[a.clone(), a.clone()], &g), 0.0);
        let b = DenseMatrix::from_rows(&[vec![3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(consensus_error(&[a, b], &g), 3.0);

        let g = circulant_graph(6, 2).unwrap();
        let its: Vec<_> = (0..6).map(|m| rand_mat(m, 2, 3)).collect();
        let mut brute: f64 = 0.0;
        for a in 0..6 {
            for &b in g.neighbors(a).unwrap() {
                let d: f64 = its[a]
                    .as_slice()
                    .iter()
                    .zip(its[b].as_slice())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                brute = brute.max(d);
            }
        }
        assert_eq!(consensus_error(&its, &g), brute);
    }

    #[test]
    fn identical_data_two_nodes_stay_symmetric() {
        let g = circulant_graph(2, 1).unwrap();
        let y = rand_mat(3, 4, 10);
        let t = rand_mat(4, 2, 10);
        let mut nodes: Vec<_> = (0..2)
            .map(|m| {
                NodeState::new(m, y.clone(), t.clone(), g.neighbors(m).unwrap(), 0.4, 50.0).unwrap()
            })
            .collect();
        let cfg = SolverConfig::synchronous(0.4, 1);
        for k in 0..20 {
            run_layer_consensus(&mut nodes, &g, &cfg, k).unwrap();
            assert_eq!(nodes[0].iterate(), nodes[1].iterate());
        }
    }

    #[test]
    fn mailbox_is_fifo_and_conserves_messages() {
        let (g, mut nodes) = ring_nodes(0.5, 10.0);
        let mut mb = Mailbox::new(&g);
        let z = |v: f64| DenseMatrix::from_fn(2, 5, |_, _| v);
        let msg = |v: f64, at: u64| Message {
            from: 0,
            to: 1,
            sent_at: at,
            payload: z(v),
        };
        mb.post(msg(1.0, 1), 5).unwrap();
        mb.post(msg(2.0, 2), 3).unwrap();
        assert_eq!(mb.deliver_due(4, &mut nodes).unwrap(), 0);
        assert_eq!(mb.deliver_due(5, &mut nodes).unwrap(), 2);
        assert_eq!(nodes[1].in_duals()[0], z(2.0));
        assert_eq!((mb.sent(), mb.delivered(), mb.in_flight()), (2, 2, 0));
        let bad = Message {
            from: 0,
            to: 2,
            sent_at: 0,
            payload: z(0.0),
        };
        assert!(mb.post(bad, 0).is_err());
    }

    #[test]
    fn async_run_is_deterministic() {
        let cfg = SolverConfig::asynchronous(0.5, 80)
            .with_staleness(4)
            .with_seed(3);
        let (g, mut a) = ring_nodes(0.5, 10.0);
        let (_, mut b) = ring_nodes(0.5, 10.0);
        let ra = run_layer_consensus(&mut a, &g, &cfg, 2).unwrap();
        let rb = run_layer_consensus(&mut b, &g, &cfg, 2).unwrap();
        assert_eq!(ra.trace, rb.trace);
        assert_eq!(ra.iterates, rb.iterates);
        assert_eq!(ra.messages_sent, ra.messages_delivered);
    }

    #[test]
    fn parallel_sync_matches_simulator() {
        // Sync rounds are deterministic even across threads.
        let cfg = SolverConfig::synchronous(0.5, 30);
        let (g, mut a) = ring_nodes(0.5, 10.0);
        let (_, mut b) = ring_nodes(0.5, 10.0);
        let sim = run_layer_consensus(&mut a, &g, &cfg, 0).unwrap();
        let par = run_layer_consensus(&mut b, &g, &cfg.clone().with_parallel(true), 0).unwrap();
        assert_eq!(sim.iterates, par.iterates);
        assert_eq!(par.messages_sent, 30 * 8);
        assert_eq!(par.messages_sent, par.messages_delivered);
        assert_eq!(par.trace.len(), 30);
    }

    #[test]
    fn parallel_async_converges() {
        let cfg = SolverConfig::asynchronous(0.5, 4000).with_parallel(true);
        let (g, mut nodes) = ring_nodes(0.5, 10.0);
        let out = run_layer_consensus(&mut nodes, &g, &cfg, 0).unwrap();
        assert_eq!(out.trace.len(), 4000);
        let scale = out.iterates[0].frobenius_norm();
        assert!(
            out.final_consensus_error <= 1e-3 * scale,
            "{}",
            out.final_consensus_error
        );
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::synchronous(0.0, 1).validate().is_err());
        assert!(SolverConfig::synchronous(1.0, 0).validate().is_err());
        assert!(SolverConfig::synchronous(1.0, 1)
            .with_eta(1.5)
            .validate()
            .is_err());
        assert!(SolverConfig::synchronous(1.0, 1)
            .with_gamma_first(-1.0)
            .validate()
            .is_err());
        let c = SolverConfig::synchronous(0.1, 1).with_gamma_first(3.0);
        assert_eq!((c.gamma_for_layer(0), c.gamma_for_layer(4)), (3.0, 0.1));
    }

    #[test]
    fn trace_csv_header() {
        let t = EventTrace {
            events: vec![
                TraceEvent {
                    k: 1,
                    node: None,
                    local_cost: 0.5,
                    consensus_error: 1e-20,
                    wall_ns: 0,
                },
                TraceEvent {
                    k: 2,
                    node: Some(3),
                    local_cost: 2.0,
                    consensus_error: 0.0,
                    wall_ns: 7,
                },
            ],
        };
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("k,node,local_cost,consensus_error,wall_ns")
        );
        assert_eq!(lines.next(), Some("1,,0.5,1e-20,0"));
        assert_eq!(lines.next(), Some("2,3,2.0,0.0,7"));
        let empty = String::from_utf8(EventTrace::default().to_csv().unwrap()).unwrap();
        assert_eq!(empty.trim(), "k,node,local_cost,consensus_error,wall_ns");
    }
}
