//! Dataset ingestion, one-hot targets, input scaling and node partitions.
//!
//! Samples are stored as columns: features are `P × J`, targets `Q × J`.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{DenseMatrix, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: DenseMatrix,
    targets: DenseMatrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// `features` is `P × J`; `labels` holds one class id in `0..class_count`
    /// per column.
    pub fn new(
        name: impl Into<String>,
        features: DenseMatrix,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(Error::Config(format!(
                "{} labels for {} samples",
                labels.len(),
                features.cols()
            )));
        }
        if class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        let targets = one_hot(&labels, class_count);
        Ok(Self {
            name: name.into(),
            features,
            targets,
            labels,
            class_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn targets(&self) -> &DenseMatrix {
        &self.targets
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.features.rows()
    }

    /// Sample count `J`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_columns(idx),
            targets: self.targets.select_columns(idx),
            labels: idx.iter().map(|&j| self.labels[j]).collect(),
            class_count: self.class_count,
        }
    }

    fn with_features(&self, features: DenseMatrix) -> Dataset {
        Dataset {
            features,
            ..self.clone()
        }
    }
}

/// `Q × J` matrix with a single 1 per column.
pub fn one_hot(labels: &[usize], class_count: usize) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(class_count, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        t.set(l, j, 1.0);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelColumn {
    #[default]
    Last,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CsvOptions {
    pub label_column: LabelColumn,
    /// Skip the first row.
    pub has_header: bool,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub class_count: Option<usize>,
}

/// Reads a comma-separated file of numeric features and one integer label
/// per row. LF and CRLF line endings are both accepted.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map_or_else(
        || "dataset".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    read_csv(file, &name, opts).map_err(|e| match e {
        Error::Parse { line, reason, .. } => Error::Parse {
            source_name: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}

/// [`load_csv`] on any reader; `name` labels the dataset and errors.
pub fn read_csv(input: impl Read, name: &str, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                source_name: name.into(),
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Parse {
            source_name: name.into(),
            line,
            reason,
        };
        if record.len() < 2 {
            return Err(bad(format!(
                "expected a label and at least one feature, found {} fields",
                record.len()
            )));
        }
        let label_at = match opts.label_column {
            LabelColumn::Last => record.len() - 1,
            LabelColumn::Index(i) if i < record.len() => i,
            LabelColumn::Index(i) => return Err(bad(format!("label column {i} missing"))),
        };
        width.get_or_insert(record.len() - 1);
        for (i, field) in record.iter().enumerate() {
            if i == label_at {
                labels.push(parse_label(field).map_err(&bad)?);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("field {}: {field:?} is not a number", i + 1)))?;
                if !v.is_finite() {
                    return Err(bad(format!("field {}: non-finite value", i + 1)));
                }
                rows.push(v);
            }
        }
    }
    let p = width.ok_or_else(|| Error::Parse {
        source_name: name.into(),
        line: 0,
        reason: "no data rows".into(),
    })?;
    let j = labels.len();
    let class_count = match opts.class_count {
        Some(q) => {
            if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= q) {
                return Err(Error::Parse {
                    source_name: name.into(),
                    line: (row + 1 + usize::from(opts.has_header)) as u64,
                    reason: format!("label {l} outside 0..{q}"),
                });
            }
            q
        }
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    let features = DenseMatrix::new(j, p, rows)?.transpose();
    Dataset::new(name, features, labels, class_count)
}

fn parse_label(field: &str) -> std::result::Result<usize, String> {
    if let Ok(v) = field.parse::<usize>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 => Ok(v as usize),
        _ => Err(format!("label {field:?} is not a non-negative integer")),
    }
}

/// Per-feature affine map onto `[−1, 1]` fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(features: &DenseMatrix) -> Self {
        let (min, max) = (0..features.rows())
            .map(|i| {
                let row = features.row(i);
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .unzip();
        Self { min, max }
    }

    /// Constant training features map to 0.
    pub fn apply_matrix(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        if features.rows() != self.min.len() {
            return Err(Error::Config(format!(
                "scaling fitted on {} features, applied to {}",
                self.min.len(),
                features.rows()
            )));
        }
        let mut out = features.clone();
        for i in 0..out.rows() {
            let (lo, hi) = (self.min[i], self.max[i]);
            let range = hi - lo;
            for v in out.row_mut(i) {
                *v = if range > 0.0 {
                    2.0 * (*v - lo) / range - 1.0
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        Ok(d.with_features(self.apply_matrix(d.features())?))
    }
}

pub fn normalize_fit_apply(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Scaling)> {
    let s = Scaling::fit(train.features());
    Ok((s.apply(train)?, s.apply(test)?, s))
}

/// Disjoint shards whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    shards: Vec<Dataset>,
    indices: Vec<Vec<usize>>,
    class_count: usize,
}

impl Partition {
    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    /// Original sample indices held by each shard.
    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn node_count(&self) -> usize {
        self.shards.len()
    }
}

/// Optionally shuffles the samples with `seed`, then cuts them into `m`
/// contiguous shards; the first `J mod M` shards get the extra sample.
pub fn partition_uniform(d: &Dataset, m: usize, seed: u64, shuffle: bool) -> Result<Partition> {
    let j = d.len();
    if m == 0 {
        return Err(Error::Config("node count must be positive".into()));
    }
    if m > j {
        return Err(Error::Config(format!("{m} nodes but only {j} samples")));
    }
    let mut order: Vec<usize> = (0..j).collect();
    if shuffle {
        SeededRng::new(seed).shuffle(&mut order);
    }
    let (base, extra) = (j / m, j % m);
    let mut indices = Vec::with_capacity(m);
    let mut start = 0;
    for k in 0..m {
        let len = base + usize::from(k < extra);
        indices.push(order[start..start + len].to_vec());
        start += len;
    }
    let shards = indices.iter().map(|idx| d.select(idx)).collect();
    Ok(Partition {
        shards,
        indices,
        class_count: d.class_count(),
    })
}

/// A single shard holding everything (the `M = 1` case).
pub fn whole(d: &Dataset) -> Partition {
    Partition {
        shards: vec![d.clone()],
        indices: vec![(0..d.len()).collect()],
        class_count: d.class_count(),
    }
}

/// Gaussian class blobs: class `c` is centred at a uniform point of
/// `[−1, 1]^P` with isotropic noise of standard deviation `spread`; labels
/// cycle `0, 1, …, Q−1`.
pub fn synthetic_blobs(p: usize, q: usize, j: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if p == 0 || q == 0 || j == 0 {
        return Err(Error::Config(
            "synthetic dimensions must be positive".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    let centres: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..p).map(|_| 2.0 * rng.next_f64() - 1.0).collect())
        .collect();
    let labels: Vec<usize> = (0..j).map(|s| s % q).collect();
    let mut x = DenseMatrix::zeros(p, j);
    for (s, &c) in labels.iter().enumerate() {
        for (i, &centre) in centres[c].iter().enumerate() {
            x.set(i, s, centre + spread * rng.next_gaussian());
        }
    }
    Dataset::new("synthetic", x, labels, q)
}

/// Linear-model data `T = O_true X + noise`: `X` uniform on `[−½, ½]`,
/// `O_true` Gaussian rescaled to `‖O_true‖²_F = true_norm_sq`.
pub fn synthetic_regression(
    p: usize,
    q: usize,
    j: usize,
    true_norm_sq: f64,
    noise: f64,
    seed: u64,
) -> (DenseMatrix, DenseMatrix) {
    let mut rng = SeededRng::new(seed);
    let x = DenseMatrix::from_fn(p, j, |_, _| rng.next_f64() - 0.5);
    let o = DenseMatrix::from_fn(q, p, |_, _| rng.next_gaussian());
    let o = o.scale((true_norm_sq / o.frobenius_norm_sq()).sqrt());
    let mut t = crate::linalg::mat_mul(&o, &x).expect("conforming");
    for v in t.as_mut_slice() {
        *v += noise * rng.next_gaussian();
    }
    (x, t)
}
