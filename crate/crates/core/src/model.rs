//! Centralised SSFN construction.
//!
//! Layer `l` maps features `y_l` to targets through a readout `O_l` with
//! `‖O_l‖²_F ≤ ε`. The next weight matrix stacks `V_Q·O_l` on top of a
//! seeded random block, so the first `2Q` rows of `y_{l+1}` carry the
//! previous prediction split into positive and negative parts. Because
//! `[I, −I, 0]` is then a feasible readout that reproduces the previous
//! output, the per-layer training cost can only go down.

use std::io::{Read, Write};
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::consensus::project_frobenius;
use crate::linalg::{
    self, add_diagonal, cholesky, gram_cols, gram_rows, mat_mul, mat_mul_nt, DenseMatrix,
    LinalgError, SeededRng, SpdFactor,
};
use crate::{Error, Result};

/// How the layer-wise constrained least-squares problem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSolver {
    /// Exact minimiser of `‖T − OY‖² + μ‖O‖²` over the ε-ball.
    #[default]
    Exact,
    /// Ridge solution with weight μ, then scaled onto the ε-ball.
    RidgeProject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsfnConfig {
    /// Number of hidden layers `L`; readouts `O_0..O_L` are learned.
    pub max_layers: usize,
    /// Hidden width `n`; must exceed `2Q`.
    pub hidden_width: usize,
    pub eps: f64,
    /// Ridge floor for the readout on raw inputs.
    pub mu_first: f64,
    /// Ridge floor for hidden-layer readouts.
    pub mu_rest: f64,
    pub seed: u64,
    /// Half-width of the uniform random block; `None` means `1/√fan_in`.
    pub random_scale: Option<f64>,
    /// Rescale each sample's random-block features to unit ℓ2 norm.
    pub normalize_random_block: bool,
    pub solver: LayerSolver,
}

impl SsfnConfig {
    /// Defaults for `q` classes: `L = 20`, `n = 2Q + 1000`, `ε = 2Q`.
    pub fn for_targets(q: usize) -> Self {
        Self {
            max_layers: 20,
            hidden_width: 2 * q + 1000,
            eps: 2.0 * q as f64,
            mu_first: 0.0,
            mu_rest: 0.0,
            seed: 0,
            random_scale: None,
            normalize_random_block: true,
            solver: LayerSolver::Exact,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.max_layers < 1 {
            return Err(Error::Config("max_layers must be at least 1".into()));
        }
        if self.hidden_width <= 2 * q {
            return Err(Error::Config(format!(
                "hidden_width {} must exceed 2Q = {}",
                self.hidden_width,
                2 * q
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        for (name, mu) in [("mu_first", self.mu_first), ("mu_rest", self.mu_rest)] {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {mu}"
                )));
            }
        }
        if let Some(s) = self.random_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "random_scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn mu_for_layer(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.mu_first
        } else {
            self.mu_rest
        }
    }
}

pub fn relu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|v| v.max(0.0))
}

/// `[I_Q; −I_Q]`, of shape `2Q × Q`.
pub fn build_vq(q: usize) -> DenseMatrix {
    DenseMatrix::from_fn(2 * q, q, |i, j| {
        if i == j {
            1.0
        } else if i == j + q {
            -1.0
        } else {
            0.0
        }
    })
}

/// `[V_Q·o_star; r_next]`.
pub fn assemble_weight(
    o_star: &DenseMatrix,
    r_next: &DenseMatrix,
    q: usize,
) -> Result<DenseMatrix> {
    if o_star.rows() != q {
        return Err(Error::Config(format!(
            "readout has {} rows, expected Q = {q}",
            o_star.rows()
        )));
    }
    // V_Q·O is just O stacked on −O; build it directly so the block is exact.
    let top = DenseMatrix::vstack(o_star, &o_star.scale(-1.0))?;
    Ok(DenseMatrix::vstack(&top, r_next)?)
}

/// `relu(w · y_prev)`.
pub fn forward_layer(w: &DenseMatrix, y_prev: &DenseMatrix) -> Result<DenseMatrix> {
    let mut z = mat_mul(w, y_prev)?;
    z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(z)
}

/// Next-layer features: [`forward_layer`], then (optionally) every column of
/// the random block (rows `2Q..`) rescaled to unit ℓ2 norm.
pub fn propagate(
    w: &DenseMatrix,
    y_prev: &DenseMatrix,
    q: usize,
    normalize: bool,
) -> Result<DenseMatrix> {
    let mut y = forward_layer(w, y_prev)?;
    if normalize {
        normalize_columns_from(&mut y, 2 * q);
    }
    Ok(y)
}

fn normalize_columns_from(y: &mut DenseMatrix, first_row: usize) {
    let cols = y.cols();
    let mut norms = vec![0.0; cols];
    for i in first_row..y.rows() {
        for (acc, v) in norms.iter_mut().zip(y.row(i)) {
            *acc += v * v;
        }
    }
    let inv: Vec<f64> = norms
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 })
        .collect();
    for i in first_row..y.rows() {
        for (v, s) in y.row_mut(i).iter_mut().zip(&inv) {
            *v *= s;
        }
    }
}

/// Random block `R_l` (layer index `l ≥ 1`), shared by every node through
/// the common seed: ChaCha8 stream `l` under `cfg.seed`.
pub fn random_block(cfg: &SsfnConfig, layer: usize, fan_in: usize, q: usize) -> DenseMatrix {
    let rows = NonZeroUsize::new(cfg.hidden_width - 2 * q).expect("validated width");
    let cols = NonZeroUsize::new(fan_in).expect("positive fan-in");
    let scale = cfg.random_scale.unwrap_or(1.0 / (fan_in as f64).sqrt());
    let mut rng = SeededRng::with_stream(cfg.seed, layer as u64);
    linalg::random_matrix(&mut rng, rows, cols, scale)
}

/// `‖t − o·y‖²_F`.
pub fn residual_cost(o: &DenseMatrix, y: &DenseMatrix, t: &DenseMatrix) -> Result<f64> {
    let pred = mat_mul(o, y)?;
    if pred.shape() != t.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "residual_cost",
            left: pred.shape(),
            right: t.shape(),
        }
        .into());
    }
    Ok(pred.distance(t).powi(2))
}

fn check_solve_inputs(y: &DenseMatrix, t: &DenseMatrix, mu: f64, eps: f64) -> Result<()> {
    if y.cols() != t.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "layer_solve",
            left: y.shape(),
            right: t.shape(),
        }
        .into());
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("mu must be non-negative, got {mu}")));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Ridge family `O(λ) = T·Yᵀ·(Y·Yᵀ + λI)⁻¹`, evaluated through whichever
/// Gram matrix is smaller.
enum RidgeFamily<'a> {
    /// `p ≤ J`: factor `YYᵀ + λI` (p×p); `b = TYᵀ`.
    Primal { gram: DenseMatrix, b: DenseMatrix },
    /// `p > J`: `O = T(YᵀY + λI)⁻¹Yᵀ`, factor J×J.
    Dual {
        gram: DenseMatrix,
        y: &'a DenseMatrix,
        t: &'a DenseMatrix,
    },
}

struct RidgePoint {
    o: DenseMatrix,
    /// `‖O(λ)‖²_F`.
    phi: f64,
    /// `dφ/dλ ≤ 0`.
    dphi: f64,
}

impl<'a> RidgeFamily<'a> {
    fn new(y: &'a DenseMatrix, t: &'a DenseMatrix) -> Result<Self> {
        Ok(if y.rows() <= y.cols() {
            RidgeFamily::Primal {
                gram: gram_rows(y),
                b: mat_mul_nt(t, y)?,
            }
        } else {
            RidgeFamily::Dual {
                gram: gram_cols(y),
                y,
                t,
            }
        })
    }

    fn gram(&self) -> &DenseMatrix {
        match self {
            RidgeFamily::Primal { gram, .. } | RidgeFamily::Dual { gram, .. } => gram,
        }
    }

    fn factor(&self, lambda: f64) -> std::result::Result<SpdFactor, LinalgError> {
        let mut s = self.gram().clone();
        add_diagonal(&mut s, lambda);
        cholesky(&s)
    }

    fn solution(&self, lambda: f64) -> std::result::Result<DenseMatrix, LinalgError> {
        let f = self.factor(lambda)?;
        match self {
            RidgeFamily::Primal { b, .. } => f.solve_right(b),
            RidgeFamily::Dual { y, t, .. } => mat_mul_nt(&f.solve_right(t)?, y),
        }
    }

    fn eval(&self, lambda: f64) -> std::result::Result<RidgePoint, LinalgError> {
        let f = self.factor(lambda)?;
        match self {
            RidgeFamily::Primal { b, .. } => {
                let o = f.solve_right(b)?;
                let phi = o.frobenius_norm_sq();
                // φ' = −2·tr(O S⁻¹ Oᵀ)
                let dphi = -2.0 * f.forward_norm_sq_rows(&o);
                Ok(RidgePoint { o, phi, dphi })
            }
            RidgeFamily::Dual { y, t, .. } => {
                let g = f.solve_right(t)?;
                let o = mat_mul_nt(&g, y)?;
                let phi = o.frobenius_norm_sq();
                // φ' = −2·⟨G A⁻¹ Yᵀ, G Yᵀ⟩ with A = YᵀY + λI
                let h = mat_mul_nt(&f.solve_right(&g)?, y)?;
                let dphi = -2.0 * linalg::dot(h.as_slice(), o.as_slice());
                Ok(RidgePoint { o, phi, dphi })
            }
        }
    }
}

/// Ridge shift standing in for `λ → 0⁺` when `μ = 0` and the Gram matrix
/// is singular, relative to its largest diagonal entry.
const SINGULAR_PROBE: f64 = 1e-10;

fn singular_shift(gram: &DenseMatrix) -> f64 {
    let max_diag = (0..gram.rows()).map(|i| gram.get(i, i)).fold(0.0, f64::max);
    SINGULAR_PROBE * max_diag.max(f64::MIN_POSITIVE)
}
const MAX_NEWTON: usize = 100;
const NEWTON_RTOL: f64 = 1e-12;

/// Exact solution of
/// `min ‖t − O·y‖²_F + μ‖O‖²_F  s.t. ‖O‖²_F ≤ ε`.
///
/// If the ridge solution at `λ = μ` is feasible it is returned. Otherwise
/// the multiplier `λ > μ` with `‖O(λ)‖² = ε` is found by safeguarded
/// Newton iteration on `1/‖O(λ)‖ − 1/√ε`, which is concave and increasing
/// in `λ` and therefore converges monotonically from the left.
///
/// Feature rows that are zero on every sample (dead ReLU units) get zero
/// readout columns and are dropped before solving; this is the
/// minimum-norm choice and leaves objective and constraint unchanged.
pub fn centralized_layer_solve(
    y: &DenseMatrix,
    t: &DenseMatrix,
    mu: f64,
    eps: f64,
) -> Result<DenseMatrix> {
    check_solve_inputs(y, t, mu, eps)?;
    on_live_rows(y, t, |y| exact_solve(y, t, mu, eps))
}

fn exact_solve(y: &DenseMatrix, t: &DenseMatrix, mu: f64, eps: f64) -> Result<DenseMatrix> {
    if t.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(DenseMatrix::zeros(t.rows(), y.rows()));
    }
    let family = RidgeFamily::new(y, t)?;
    let (mut lambda, mut point) = match family.eval(mu) {
        Ok(p) => (mu, p),
        Err(LinalgError::NotPositiveDefinite { .. }) if mu == 0.0 => {
            // λ → 0⁺ limit: with the constraint inactive this is the
            // minimum-norm least-squares readout up to O(τ).
            let tau = singular_shift(family.gram());
            (tau, family.eval(tau)?)
        }
        Err(e) => return Err(e.into()),
    };
    if point.phi <= eps {
        return Ok(point.o);
    }

    let (mut lo, mut hi) = (lambda, f64::INFINITY);
    for _ in 0..MAX_NEWTON {
        if point.phi > eps {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if (point.phi - eps).abs() <= NEWTON_RTOL * eps {
            break;
        }
        let psi = 1.0 / point.phi.sqrt() - 1.0 / eps.sqrt();
        let dpsi = -0.5 * point.dphi / point.phi.powf(1.5);
        let mut next = lambda - psi / dpsi;
        if !(next.is_finite() && next > lo && next < hi) {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * lambda.max(f64::MIN_POSITIVE.sqrt())
            };
        }
        if next == lambda {
            break;
        }
        lambda = next;
        point = family.eval(lambda)?;
    }
    // The last iterate sits on the sphere up to rounding; make it feasible.
    Ok(project_frobenius(&point.o, eps))
}

/// `P_ε(T·Yᵀ·(Y·Yᵀ + μI)⁻¹)`, with dead feature rows handled as in
/// [`centralized_layer_solve`].
pub fn ridge_project_solve(
    y: &DenseMatrix,
    t: &DenseMatrix,
    mu: f64,
    eps: f64,
) -> Result<DenseMatrix> {
    check_solve_inputs(y, t, mu, eps)?;
    Ok(project_frobenius(&ridge_solution(y, t, mu)?, eps))
}

/// `T·Yᵀ·(Y·Yᵀ + μI)⁻¹` over the live rows of `y`.
pub(crate) fn ridge_solution(y: &DenseMatrix, t: &DenseMatrix, mu: f64) -> Result<DenseMatrix> {
    on_live_rows(y, t, |y| {
        let family = RidgeFamily::new(y, t)?;
        match family.solution(mu) {
            Ok(o) => Ok(o),
            Err(LinalgError::NotPositiveDefinite { .. }) if mu == 0.0 => {
                Ok(family.solution(singular_shift(family.gram()))?)
            }
            Err(e) => Err(e.into()),
        }
    })
}

/// Runs `solve` on the rows of `y` that are nonzero somewhere and scatters
/// the readout back, with zero columns for the dropped rows.
fn on_live_rows(
    y: &DenseMatrix,
    t: &DenseMatrix,
    solve: impl FnOnce(&DenseMatrix) -> Result<DenseMatrix>,
) -> Result<DenseMatrix> {
    let live: Vec<usize> = (0..y.rows())
        .filter(|&i| y.row(i).iter().any(|&v| v != 0.0))
        .collect();
    if live.len() == y.rows() {
        return solve(y);
    }
    let mut o = DenseMatrix::zeros(t.rows(), y.rows());
    if live.is_empty() {
        return Ok(o);
    }
    let reduced = DenseMatrix::from_fn(live.len(), y.cols(), |i, j| y.get(live[i], j));
    let part = solve(&reduced)?;
    for q in 0..t.rows() {
        for (k, &i) in live.iter().enumerate() {
            o.set(q, i, part.get(q, k));
        }
    }
    Ok(o)
}

pub fn layer_solve(
    y: &DenseMatrix,
    t: &DenseMatrix,
    mu: f64,
    eps: f64,
    solver: LayerSolver,
) -> Result<DenseMatrix> {
    match solver {
        LayerSolver::Exact => centralized_layer_solve(y, t, mu, eps),
        LayerSolver::RidgeProject => ridge_project_solve(y, t, mu, eps),
    }
}

/// The learned model: weights `W_1..W_L` and readouts `O_0..O_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    config: SsfnConfig,
    input_dim: usize,
    target_dim: usize,
    weights: Vec<DenseMatrix>,
    readouts: Vec<DenseMatrix>,
}

impl LayerStack {
    /// Validates every shape and norm invariant.
    pub fn new(
        config: SsfnConfig,
        input_dim: usize,
        target_dim: usize,
        weights: Vec<DenseMatrix>,
        readouts: Vec<DenseMatrix>,
    ) -> Result<Self> {
        config.validate(target_dim)?;
        let fmt = |m: String| Err(Error::Format(m));
        if readouts.len() != weights.len() + 1 {
            return fmt(format!(
                "{} weights need {} readouts, got {}",
                weights.len(),
                weights.len() + 1,
                readouts.len()
            ));
        }
        let n = config.hidden_width;
        for (i, w) in weights.iter().enumerate() {
            let want = (n, if i == 0 { input_dim } else { n });
            if w.shape() != want {
                return fmt(format!(
                    "W_{} has shape {:?}, expected {want:?}",
                    i + 1,
                    w.shape()
                ));
            }
        }
        for (l, o) in readouts.iter().enumerate() {
            let want = (target_dim, if l == 0 { input_dim } else { n });
            if o.shape() != want {
                return fmt(format!(
                    "O_{l} has shape {:?}, expected {want:?}",
                    o.shape()
                ));
            }
            if o.frobenius_norm_sq() > config.eps + 1e-9 {
                return fmt(format!("O_{l} lies outside the norm ball"));
            }
        }
        Ok(Self {
            config,
            input_dim,
            target_dim,
            weights,
            readouts,
        })
    }

    pub fn config(&self) -> &SsfnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `W_l` for `l` in `1..=L`.
    pub fn weight(&self, l: usize) -> &DenseMatrix {
        &self.weights[l - 1]
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn readout(&self, l: usize) -> &DenseMatrix {
        &self.readouts[l]
    }

    pub fn readouts(&self) -> &[DenseMatrix] {
        &self.readouts
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.rows() != self.input_dim {
            return Err(LinalgError::DimensionMismatch {
                op: "predict",
                left: (self.input_dim, 0),
                right: x.shape(),
            }
            .into());
        }
        Ok(())
    }

    /// Layer-`l` features of `x` (`y_0 = x`).
    pub fn features(&self, x: &DenseMatrix, l: usize) -> Result<DenseMatrix> {
        if l > self.depth() {
            return Err(Error::LayerOutOfRange {
                layer: l,
                max: self.depth(),
            });
        }
        self.check_input(x)?;
        let mut y = x.clone();
        for w in &self.weights[..l] {
            y = propagate(w, &y, self.target_dim, self.config.normalize_random_block)?;
        }
        Ok(y)
    }

    /// `O_l · y_l(x)`, a `Q × J` score matrix.
    pub fn predict(&self, x: &DenseMatrix, l: usize) -> Result<DenseMatrix> {
        let y = self.features(x, l)?;
        Ok(mat_mul(&self.readouts[l], &y)?)
    }

    /// Scores at every layer `0..=L` in a single forward pass.
    pub fn predict_all_layers(&self, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.readouts.len());
        let mut y = x.clone();
        out.push(mat_mul(&self.readouts[0], &y)?);
        for (w, o) in self.weights.iter().zip(&self.readouts[1..]) {
            y = propagate(w, &y, self.target_dim, self.config.normalize_random_block)?;
            out.push(mat_mul(o, &y)?);
        }
        Ok(out)
    }

    pub fn save(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = StackHeader {
            config: self.config.clone(),
            input_dim: self.input_dim,
            target_dim: self.target_dim,
            weights: self.weights.iter().map(DenseMatrix::shape).collect(),
            readouts: self.readouts.iter().map(DenseMatrix::shape).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for m in self.weights.iter().chain(&self.readouts) {
            let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(mut input: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .ok()
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| Error::Format("header too large".into()))?;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(io)?;
        let header: StackHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut read_matrix = |(r, c): (usize, usize)| -> Result<DenseMatrix> {
            let mut bytes = vec![0u8; r * c * 8];
            input.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            Ok(DenseMatrix::new(r, c, data)?)
        };
        let weights = header
            .weights
            .iter()
            .map(|&s| read_matrix(s))
            .collect::<Result<Vec<_>>>()?;
        let readouts = header
            .readouts
            .iter()
            .map(|&s| read_matrix(s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            header.config,
            header.input_dim,
            header.target_dim,
            weights,
            readouts,
        )
    }
}

const MAGIC: &[u8; 8] = b"DSSFNSTK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StackHeader {
    config: SsfnConfig,
    input_dim: usize,
    target_dim: usize,
    weights: Vec<(usize, usize)>,
    readouts: Vec<(usize, usize)>,
}

pub fn predict(stack: &LayerStack, x: &DenseMatrix, l: usize) -> Result<DenseMatrix> {
    stack.predict(x, l)
}

/// Row index of each column's maximum; ties go to the lowest index.
pub fn argmax_columns(scores: &DenseMatrix) -> Vec<usize> {
    (0..scores.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..scores.rows() {
                if scores.get(i, j) > scores.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Percentage of columns whose argmax equals the label.
pub fn accuracy(scores: &DenseMatrix, labels: &[usize]) -> f64 {
    assert_eq!(scores.cols(), labels.len(), "one label per column");
    let hits = argmax_columns(scores)
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

/// A trained stack with its per-layer training cost `‖T − O_l Y_l‖²_F`.
#[derive(Debug, Clone)]
pub struct CentralRun {
    pub stack: LayerStack,
    pub layer_costs: Vec<f64>,
}

pub fn train_centralized(x: &DenseMatrix, t: &DenseMatrix, cfg: &SsfnConfig) -> Result<CentralRun> {
    let q = t.rows();
    cfg.validate(q)?;
    if x.cols() != t.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "train_centralized",
            left: x.shape(),
            right: t.shape(),
        }
        .into());
    }
    let mut weights = Vec::with_capacity(cfg.max_layers);
    let mut readouts = Vec::with_capacity(cfg.max_layers + 1);
    let mut costs = Vec::with_capacity(cfg.max_layers + 1);
    let mut y = x.clone();
    for l in 0..=cfg.max_layers {
        if l > 0 {
            let r = random_block(cfg, l, y.rows(), q);
            let w = assemble_weight(&readouts[l - 1], &r, q).map_err(|e| e.at_layer(l))?;
            y = propagate(&w, &y, q, cfg.normalize_random_block).map_err(|e| e.at_layer(l))?;
            weights.push(w);
        }
        let o = layer_solve(&y, t, cfg.mu_for_layer(l), cfg.eps, cfg.solver)
            .map_err(|e| e.at_layer(l))?;
        let cost = residual_cost(&o, &y, t)?;
        log::debug!(
            "layer {l}: cost {cost:.6e}, |O|^2 {:.4}",
            o.frobenius_norm_sq()
        );
        costs.push(cost);
        readouts.push(o);
    }
    let stack = LayerStack::new(cfg.clone(), x.rows(), q, weights, readouts)?;
    Ok(CentralRun {
        stack,
        layer_costs: costs,
    })
}
