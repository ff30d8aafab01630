//! Datasets: synthetic generators, CSV ingestion, splitting, partitioning.
//!
//! A [`Dataset`] is a feature matrix with optional per-row labels (probit),
//! optional per-row partition ids (for the distributed update rule), and an
//! optional record of the generative truth (for calibration against the
//! parameters that actually produced the data).
//!
//! Generation is fully deterministic in the config seed: every random
//! ingredient (true parameters, cluster centers, assignments, inputs,
//! labels) draws from its own tagged substream, so changing one setting
//! never shifts the draws of the others.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::rng::PortableRng;
use crate::special::norm_cdf;
use crate::{Error, Real, Result};

const TAG_THETA: u64 = 1;
const TAG_CENTERS: u64 = 2;
const TAG_ASSIGNMENTS: u64 = 3;
const TAG_INPUTS: u64 = 4;
const TAG_LABELS: u64 = 5;
const TAG_SPLIT: u64 = 6;

/// Standard deviation of the cluster-center draw for mixture-shaped inputs.
const CENTER_SCALE: f64 = 4.0;
/// Minimum pairwise distance between cluster centers; sets of centers closer
/// than this are rejected and redrawn so the clusters stay distinguishable.
const CENTER_MIN_DIST: f64 = 4.0;
const CENTER_MAX_TRIES: usize = 10_000;

/// The generative parameters behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Truth<F> {
    /// True probit weight vector.
    Probit { theta: Array1<F> },
    /// True mixture component means and per-row component assignments.
    Mog {
        means: Vec<Array1<F>>,
        assignments: Vec<usize>,
    },
}

/// Feature rows plus optional labels, partition ids, and generative truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    inputs: Array2<F>,
    labels: Option<Vec<i8>>,
    partition_of: Option<Vec<usize>>,
    truth: Option<Truth<F>>,
}

impl<F: Real> Dataset<F> {
    pub fn new(
        inputs: Array2<F>,
        labels: Option<Vec<i8>>,
        partition_of: Option<Vec<usize>>,
        truth: Option<Truth<F>>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || inputs.ncols() == 0 {
            return Err(Error::DegenerateInput("dataset has no rows or columns".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("dataset has non-finite features".into()));
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{n} rows but {} labels",
                    ls.len()
                )));
            }
            if ls.iter().any(|&y| y != 1 && y != -1) {
                return Err(Error::DegenerateInput("labels must be -1 or +1".into()));
            }
        }
        if let Some(ps) = &partition_of {
            if ps.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{n} rows but {} partition ids",
                    ps.len()
                )));
            }
            let max = *ps.iter().max().expect("n > 0");
            let mut seen = vec![false; max + 1];
            for &p in ps {
                seen[p] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::DegenerateInput(
                    "partition ids must be dense 0..L".into(),
                ));
            }
        }
        if let Some(Truth::Mog { assignments, .. }) = &truth {
            if assignments.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{n} rows but {} truth assignments",
                    assignments.len()
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            partition_of,
            truth,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &Array2<F> {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[i8]> {
        self.labels.as_deref()
    }

    pub fn partition_of(&self) -> Option<&[usize]> {
        self.partition_of.as_deref()
    }

    pub fn truth(&self) -> Option<&Truth<F>> {
        self.truth.as_ref()
    }

    /// Number of distinct partition labels, if any are attached.
    pub fn n_partitions(&self) -> Option<usize> {
        self.partition_of
            .as_ref()
            .map(|ps| ps.iter().max().expect("non-empty") + 1)
    }

    /// Row subset in the given index order. Truth assignments follow the
    /// rows; other truth fields are shared unchanged.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::DegenerateInput("empty subset".into()));
        }
        if idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::DimensionMismatch("subset index out of range".into()));
        }
        let mut inputs = Array2::zeros((idx.len(), self.dim()));
        for (row, &i) in idx.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|ls| idx.iter().map(|&i| ls[i]).collect());
        let partition_of = self
            .partition_of
            .as_ref()
            .map(|ps| compact_ids(&idx.iter().map(|&i| ps[i]).collect::<Vec<_>>()));
        let truth = self.truth.as_ref().map(|t| match t {
            Truth::Probit { theta } => Truth::Probit {
                theta: theta.clone(),
            },
            Truth::Mog { means, assignments } => Truth::Mog {
                means: means.clone(),
                assignments: idx.iter().map(|&i| assignments[i]).collect(),
            },
        });
        Self::new(inputs, labels, partition_of, truth)
    }
}

/// Remaps arbitrary ids to dense 0..L, preserving order of first id value.
fn compact_ids(ids: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    for &id in ids {
        let next = map.len();
        map.entry(id).or_insert(next);
    }
    // BTreeMap iteration is sorted by original id; rebuild the mapping so
    // dense ids follow the sorted original ids deterministically.
    let ordered: BTreeMap<usize, usize> = map
        .keys()
        .enumerate()
        .map(|(dense, &orig)| (orig, dense))
        .collect();
    ids.iter().map(|id| ordered[id]).collect()
}

/// Shape of the input distribution for probit data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InputDist {
    /// Rows drawn iid standard normal.
    Gaussian,
    /// Rows drawn around well-separated cluster centers; the cluster id of
    /// each row is recorded as its partition id.
    Mog { components: usize },
}

/// Configuration for synthetic probit classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbitGenConfig {
    pub n: usize,
    pub d: usize,
    pub inputs: InputDist,
    /// Prior variance of the true weights: `theta ~ N(0, gamma I)`.
    pub gamma: f64,
    pub seed: u64,
}

/// Configuration for synthetic mixture-of-Gaussians data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogGenConfig {
    pub n: usize,
    pub d: usize,
    pub components: usize,
    /// Isotropic observation noise (standard deviation).
    pub sigma: f64,
    /// Center of the component-mean prior `N(center, I)`.
    pub center: Vec<f64>,
    pub seed: u64,
}

fn draw_normal_matrix(rng: &mut PortableRng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            m[[i, j]] = rng.normal();
        }
    }
    m
}

fn draw_separated_centers(rng: &mut PortableRng, j: usize, d: usize) -> Result<Vec<Array1<f64>>> {
    'attempt: for _ in 0..CENTER_MAX_TRIES {
        let centers: Vec<Array1<f64>> = (0..j)
            .map(|_| Array1::from_iter((0..d).map(|_| CENTER_SCALE * rng.normal())))
            .collect();
        for a in 0..j {
            for b in a + 1..j {
                let dist = (&centers[a] - &centers[b]).mapv(|v| v * v).sum().sqrt();
                if dist < CENTER_MIN_DIST {
                    continue 'attempt;
                }
            }
        }
        return Ok(centers);
    }
    Err(Error::DegenerateInput(format!(
        "could not place {j} centers at pairwise distance {CENTER_MIN_DIST} in {d} dimensions"
    )))
}

/// Generates probit data: `theta ~ N(0, gamma I)`,
/// `P(y = +1 | x) = Phi(theta^T x)`.
pub fn gen_probit<F: Real>(cfg: &ProbitGenConfig) -> Result<Dataset<F>> {
    if cfg.n == 0 || cfg.d == 0 {
        return Err(Error::ConfigInvalid("n and d must be positive".into()));
    }
    if !(cfg.gamma > 0.0) || !cfg.gamma.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "gamma must be positive and finite, got {}",
            cfg.gamma
        )));
    }
    if let InputDist::Mog { components } = cfg.inputs {
        if components < 2 {
            return Err(Error::ConfigInvalid(
                "mixture-shaped inputs need at least 2 components".into(),
            ));
        }
    }

    let mut theta_rng = PortableRng::substream(cfg.seed, TAG_THETA);
    let theta =
        Array1::from_iter((0..cfg.d).map(|_| cfg.gamma.sqrt() * theta_rng.normal()));

    let mut input_rng = PortableRng::substream(cfg.seed, TAG_INPUTS);
    let (inputs, partition_of) = match cfg.inputs {
        InputDist::Gaussian => (draw_normal_matrix(&mut input_rng, cfg.n, cfg.d), None),
        InputDist::Mog { components } => {
            let mut center_rng = PortableRng::substream(cfg.seed, TAG_CENTERS);
            let centers = draw_separated_centers(&mut center_rng, components, cfg.d)?;
            let mut assign_rng = PortableRng::substream(cfg.seed, TAG_ASSIGNMENTS);
            let assignments: Vec<usize> =
                (0..cfg.n).map(|_| assign_rng.index(components)).collect();
            let mut m = draw_normal_matrix(&mut input_rng, cfg.n, cfg.d);
            for (i, &a) in assignments.iter().enumerate() {
                for j in 0..cfg.d {
                    m[[i, j]] += centers[a][j];
                }
            }
            (m, Some(compact_ids(&assignments)))
        }
    };

    let mut label_rng = PortableRng::substream(cfg.seed, TAG_LABELS);
    let labels: Vec<i8> = (0..cfg.n)
        .map(|i| {
            let activation = inputs.row(i).dot(&theta);
            if label_rng.uniform() < norm_cdf(activation) {
                1
            } else {
                -1
            }
        })
        .collect();

    Dataset::new(
        inputs.mapv(F::of),
        Some(labels),
        partition_of,
        Some(Truth::Probit {
            theta: theta.mapv(F::of),
        }),
    )
}

/// Generates mixture data: component means `mu_h ~ N(center, I)`, uniform
/// assignments, observations `x ~ N(mu_h, sigma^2 I)`.
pub fn gen_mog<F: Real>(cfg: &MogGenConfig) -> Result<Dataset<F>> {
    if cfg.n == 0 || cfg.d == 0 {
        return Err(Error::ConfigInvalid("n and d must be positive".into()));
    }
    if cfg.components < 2 {
        return Err(Error::ConfigInvalid(
            "mixture needs at least 2 components".into(),
        ));
    }
    if !(cfg.sigma > 0.0) || !cfg.sigma.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "sigma must be positive and finite, got {}",
            cfg.sigma
        )));
    }
    if cfg.center.len() != cfg.d {
        return Err(Error::DimensionMismatch(format!(
            "center has length {}, d is {}",
            cfg.center.len(),
            cfg.d
        )));
    }

    let mut mean_rng = PortableRng::substream(cfg.seed, TAG_CENTERS);
    let offset = Array1::from_iter(cfg.center.iter().copied());
    let means: Vec<Array1<f64>> = (0..cfg.components)
        .map(|_| &offset + &Array1::from_iter((0..cfg.d).map(|_| mean_rng.normal())))
        .collect();
    let mut assign_rng = PortableRng::substream(cfg.seed, TAG_ASSIGNMENTS);
    let assignments: Vec<usize> = (0..cfg.n)
        .map(|_| assign_rng.index(cfg.components))
        .collect();
    let mut input_rng = PortableRng::substream(cfg.seed, TAG_INPUTS);
    let mut inputs = Array2::zeros((cfg.n, cfg.d));
    for (i, &a) in assignments.iter().enumerate() {
        for j in 0..cfg.d {
            inputs[[i, j]] = means[a][j] + cfg.sigma * input_rng.normal();
        }
    }

    Dataset::new(
        inputs.mapv(F::of),
        None,
        None,
        Some(Truth::Mog {
            means: means.into_iter().map(|m| m.mapv(F::of)).collect(),
            assignments,
        }),
    )
}

/// Column selection for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Name of the label column, if the file has one.
    pub label_column: Option<String>,
    /// Cell value mapped to label +1; every other value maps to -1.
    pub positive_label: String,
    /// Name of the partition-id column, if the file has one.
    pub partition_column: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: Some("label".into()),
            positive_label: "1".into(),
            partition_column: None,
        }
    }
}

/// Loads a headered CSV, standardizing every feature column to zero mean and
/// unit variance over the whole file. Constant columns are dropped with a
/// warning. Missing or unparseable cells are hard errors.
pub fn load_csv<F: Real>(path: &Path, schema: &CsvSchema) -> Result<Dataset<F>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_idx = match &schema.label_column {
        Some(name) => Some(
            find(name).ok_or_else(|| Error::Schema(format!("label column '{name}' not found")))?,
        ),
        None => None,
    };
    let partition_idx = match &schema.partition_column {
        Some(name) => Some(
            find(name)
                .ok_or_else(|| Error::Schema(format!("partition column '{name}' not found")))?,
        ),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|i| Some(*i) != label_idx && Some(*i) != partition_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i8> = Vec::new();
    let mut partitions: Vec<usize> = Vec::new();
    for (row_i, record) in reader.records().enumerate() {
        let row_no = row_i + 1;
        let record = record.map_err(|e| Error::Schema(format!("row {row_no}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Schema(format!(
                "row {row_no} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(feature_idx.len());
        for &ci in &feature_idx {
            let cell = record[ci].trim();
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: headers[ci].clone(),
                message: if cell.is_empty() {
                    "missing value".into()
                } else {
                    format!("'{cell}' is not a number")
                },
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    column: headers[ci].clone(),
                    message: "value is not finite".into(),
                });
            }
            row.push(value);
        }
        features.push(row);
        if let Some(li) = label_idx {
            labels.push(if record[li].trim() == schema.positive_label {
                1
            } else {
                -1
            });
        }
        if let Some(pi) = partition_idx {
            let cell = record[pi].trim();
            let id: usize = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: headers[pi].clone(),
                message: format!("'{cell}' is not a partition id"),
            })?;
            partitions.push(id);
        }
    }
    if features.is_empty() {
        return Err(Error::DegenerateInput("file has no data rows".into()));
    }

    let n = features.len();
    let mut inputs = Array2::zeros((n, feature_idx.len()));
    for (i, row) in features.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            inputs[[i, j]] = v;
        }
    }
    let kept = standardize_in_place(&mut inputs);
    if kept.len() < feature_idx.len() {
        let dropped: Vec<&str> = feature_idx
            .iter()
            .enumerate()
            .filter(|(j, _)| !kept.contains(j))
            .map(|(_, &ci)| headers[ci].as_str())
            .collect();
        log::warn!("dropped constant feature columns: {}", dropped.join(", "));
        inputs = select_columns(&inputs, &kept);
    }
    if inputs.ncols() == 0 {
        return Err(Error::DegenerateInput("all feature columns are constant".into()));
    }

    Dataset::new(
        inputs.mapv(F::of),
        label_idx.map(|_| labels),
        partition_idx.map(|_| compact_ids(&partitions)),
        None,
    )
}

fn csv_err(e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        _ => Error::Schema(msg),
    }
}

const CONSTANT_COLUMN_TOL: f64 = 1e-12;

/// Standardizes columns of `inputs` in place and returns the indices of the
/// columns that were kept (non-constant). Dropped columns are left
/// unstandardized; callers remove them with [`select_columns`].
fn standardize_in_place(inputs: &mut Array2<f64>) -> Vec<usize> {
    let n = inputs.nrows() as f64;
    let mut kept = Vec::new();
    for j in 0..inputs.ncols() {
        let mean = inputs.column(j).sum() / n;
        let var = inputs.column(j).mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let std = var.sqrt();
        if std <= CONSTANT_COLUMN_TOL * mean.abs().max(1.0) {
            continue;
        }
        inputs.column_mut(j).mapv_inplace(|v| (v - mean) / std);
        kept.push(j);
    }
    kept
}

fn select_columns(inputs: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((inputs.nrows(), cols.len()));
    for (new_j, &j) in cols.iter().enumerate() {
        out.column_mut(new_j).assign(&inputs.column(j));
    }
    out
}

/// Standardizes `train` by its own column statistics and applies those same
/// statistics to `test`, the protocol for honest test-set evaluation.
/// Columns constant in the training rows are dropped from both sets.
pub fn standardize_by_train<F: Real>(train: &Dataset<F>, test: &Dataset<F>) -> Result<(Dataset<F>, Dataset<F>)> {
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let n = train.n() as f64;
    let mut stats = Vec::new();
    for j in 0..train.dim() {
        let col = train.inputs().column(j).mapv(|v| v.as_f64());
        let mean = col.sum() / n;
        let var = col.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        stats.push((mean, var.sqrt()));
    }
    let kept: Vec<usize> = (0..train.dim())
        .filter(|&j| stats[j].1 > CONSTANT_COLUMN_TOL * stats[j].0.abs().max(1.0))
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateInput(
            "all feature columns are constant in the training rows".into(),
        ));
    }
    if kept.len() < train.dim() {
        log::warn!(
            "dropped {} feature columns constant in the training rows",
            train.dim() - kept.len()
        );
    }

    let apply = |ds: &Dataset<F>| -> Result<Dataset<F>> {
        let mut out = Array2::zeros((ds.n(), kept.len()));
        for (new_j, &j) in kept.iter().enumerate() {
            let (mean, std) = stats[j];
            for i in 0..ds.n() {
                out[[i, new_j]] = F::of((ds.inputs()[[i, j]].as_f64() - mean) / std);
            }
        }
        Dataset::new(
            out,
            ds.labels().map(|l| l.to_vec()),
            ds.partition_of().map(|p| p.to_vec()),
            // Feature rescaling invalidates parameter-space truth.
            None,
        )
    };
    Ok((apply(train)?, apply(test)?))
}

/// Splits rows into disjoint train and test sets of the given test fraction
/// (rounded to the nearest row count), shuffled deterministically by `seed`.
/// Row order within each side follows the original dataset.
pub fn split<F: Real>(
    data: &Dataset<F>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::ConfigInvalid(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.n();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::ConfigInvalid(format!(
            "test fraction {test_fraction} leaves an empty side of a {n}-row split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    PortableRng::substream(seed, TAG_SPLIT).shuffle(&mut idx);
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((data.subset(&train_idx)?, data.subset(&test_idx)?))
}

/// Assigns every row to one of `k` partitions.
///
/// - `k = 1`: everything in partition 0.
/// - Dataset carries partition ids with `L` groups and `k = L`: use them.
/// - Dataset carries partition ids and `k` is a multiple of `L`: split each
///   group round-robin into `k / L` sub-partitions, preserving alignment
///   between partitions and natural groups.
/// - Otherwise: round-robin `row mod k` (with a warning if natural groups
///   were present but unusable).
pub fn assign_partitions<F: Real>(data: &Dataset<F>, k: usize) -> Result<Vec<usize>> {
    let n = data.n();
    if k == 0 || k > n {
        return Err(Error::ConfigInvalid(format!(
            "partition count must be in 1..={n}, got {k}"
        )));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    if let Some(groups) = data.partition_of() {
        let l = data.n_partitions().expect("partition ids present");
        if k == l {
            return Ok(groups.to_vec());
        }
        if k % l == 0 {
            let per = k / l;
            let mut counters = vec![0usize; l];
            return Ok(groups
                .iter()
                .map(|&g| {
                    let c = counters[g];
                    counters[g] += 1;
                    g * per + (c % per)
                })
                .collect());
        }
        log::warn!(
            "requested {k} partitions does not align with the {l} natural groups; falling back to round-robin"
        );
    }
    Ok((0..n).map(|i| i % k).collect())
}
