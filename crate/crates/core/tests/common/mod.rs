//! Independent reference implementations built on nalgebra.
#![allow(dead_code)]

use dssfn::DenseMatrix;
use nalgebra::DMatrix;

pub fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j))
}

pub fn from_na(a: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn rel_dist(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let d = a.distance(b);
    d / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// `T Yᵀ (Y Yᵀ + λ I)⁻¹`; minimum-norm least squares when `λ = 0`.
pub fn ridge(y: &DMatrix<f64>, t: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    if lambda == 0.0 {
        let pinv = y.clone().pseudo_inverse(1e-12).expect("svd");
        return t * pinv;
    }
    let p = y.nrows();
    let a = y * y.transpose() + DMatrix::identity(p, p) * lambda;
    let inv = a.try_inverse().expect("ridge system invertible");
    t * y.transpose() * inv
}

pub fn objective(y: &DMatrix<f64>, t: &DMatrix<f64>, o: &DMatrix<f64>, mu: f64) -> f64 {
    (t - o * y).norm_squared() + mu * o.norm_squared()
}

/// min ‖T − OY‖² + μ‖O‖² s.t. ‖O‖² ≤ ε by bisection on the multiplier.
pub fn constrained_oracle(y: &DMatrix<f64>, t: &DMatrix<f64>, mu: f64, eps: f64) -> DMatrix<f64> {
    let o = ridge(y, t, mu);
    if o.norm_squared() <= eps {
        return o;
    }
    let mut lo = mu;
    let mut hi = mu.max(1.0);
    while ridge(y, t, hi).norm_squared() > eps {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ridge(y, t, mid).norm_squared() > eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    ridge(y, t, hi)
}

/// Euclidean projection onto `{‖X‖² ≤ ε}` from the KKT system
/// `X = A / (1 + ν)`, `ν ≥ 0`, with ν found by bisection.
pub fn ball_projection_oracle(a: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let n2 = a.norm_squared();
    if n2 <= eps {
        return a.clone();
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while n2 / (1.0 + hi).powi(2) > eps {
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if n2 / (1.0 + mid).powi(2) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    a / (1.0 + hi)
}

pub fn gaussian(seed: u64, r: usize, c: usize, scale: f64) -> DenseMatrix {
    let mut rng = dssfn::SeededRng::new(seed);
    DenseMatrix::from_fn(r, c, |_, _| scale * rng.next_gaussian())
}

/// Writes a dataset as `features..., label` rows.
pub fn write_csv(path: &std::path::Path, d: &dssfn::Dataset) {
    use std::fmt::Write as _;
    let mut s = String::new();
    let x = d.features();
    for j in 0..d.len() {
        for i in 0..x.rows() {
            write!(s, "{:?},", x.get(i, j)).unwrap();
        }
        writeln!(s, "{}", d.labels()[j]).unwrap();
    }
    std::fs::write(path, s).unwrap();
}

/// The synthetic consensus problem: P=10, Q=3, J=200 split contiguously
/// over a circulant graph. Returns the pooled `(X, T)` as well.
pub fn synthetic_nodes(
    m: usize,
    d: usize,
    gamma: f64,
    eps: f64,
) -> (
    dssfn::Graph,
    Vec<dssfn::NodeState>,
    DenseMatrix,
    DenseMatrix,
) {
    let (x, t) = dssfn::data::synthetic_regression(10, 3, 200, 2.0, 0.01, 42);
    let g = dssfn::circulant_graph(m, d).unwrap();
    let per = x.cols() / m;
    let nodes = (0..m)
        .map(|i| {
            let idx: Vec<usize> =
                (i * per..if i + 1 == m { x.cols() } else { (i + 1) * per }).collect();
            dssfn::NodeState::new(
                i,
                x.select_columns(&idx),
                t.select_columns(&idx),
                g.neighbors(i).unwrap(),
                gamma,
                eps,
            )
            .unwrap()
        })
        .collect();
    (g, nodes, x, t)
}

/// Largest relative distance of any node iterate to `reference`.
pub fn max_rel_dist(iterates: &[DenseMatrix], reference: &DenseMatrix) -> f64 {
    iterates
        .iter()
        .map(|o| rel_dist(o, reference))
        .fold(0.0, f64::max)
}

/// Maxima of consecutive windows of `w` values.
pub fn window_max(v: &[f64], w: usize) -> Vec<f64> {
    v.chunks(w)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect()
}
