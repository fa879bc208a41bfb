//! Shared fixtures for the criterion benches.

use std::num::NonZeroUsize;

use dssfn::linalg::{random_matrix, DenseMatrix, SeededRng};

pub fn matrix(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
    random_matrix(
        &mut SeededRng::new(seed),
        NonZeroUsize::new(rows).expect("rows > 0"),
        NonZeroUsize::new(cols).expect("cols > 0"),
        1.0,
    )
}

/// Non-negative features and one-hot-like targets, shaped like one hidden
/// layer of a node: `p × j` features, `q × j` targets.
pub fn layer_problem(seed: u64, p: usize, q: usize, j: usize) -> (DenseMatrix, DenseMatrix) {
    let y = matrix(seed, p, j).map(|v| v.max(0.0));
    let labels: Vec<usize> = (0..j).map(|s| s % q).collect();
    (y, dssfn::data::one_hot(&labels, q))
}
