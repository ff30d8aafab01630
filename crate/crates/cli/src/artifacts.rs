//! On-disk formats shared by the subcommands: dataset CSV files, generator
//! sidecars, run traces, recorded moments, and reference posteriors.
//!
//! Everything here is deterministic. Floats are written in Rust's shortest
//! round-trip form, JSON keeps struct field order, and absent metric values
//! are spelled `nan`, so rerunning a command with the same inputs
//! reproduces each artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sepia::data::{Dataset, MogGenConfig, ProbitGenConfig, Truth};
use sepia::expfam::{BlockMoment, GaussianMoment};
use sepia::inference::TraceRow;
use sepia::oracle::McmcDiagnostics;
use sepia::{Error, Result};

/// Metric columns of a trace file, in file order after `iter`.
pub const TRACE_COLUMNS: [&str; 8] = [
    "kl",
    "mean_fnorm",
    "cov_fnorm",
    "test_ll",
    "test_err",
    "factor_delta",
    "trace_cov",
    "wall_ms",
];

/// Ground-truth sidecar written next to every generated dataset, named
/// `<stem>.truth.json`. `run` uses it to read the file in raw coordinates
/// and to default the model to the generating one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sidecar {
    Probit {
        config: ProbitGenConfig,
        theta: Vec<f64>,
    },
    Mog {
        config: MogGenConfig,
        means: Vec<Vec<f64>>,
        assignments: Vec<usize>,
    },
}

impl Sidecar {
    /// The generative parameters in the form `Dataset` carries them.
    pub fn truth(&self) -> Truth<f64> {
        match self {
            Sidecar::Probit { theta, .. } => Truth::Probit {
                theta: Array1::from_vec(theta.clone()),
            },
            Sidecar::Mog {
                means, assignments, ..
            } => Truth::Mog {
                means: means.iter().map(|m| Array1::from_vec(m.clone())).collect(),
                assignments: assignments.clone(),
            },
        }
    }
}

/// Sidecar path for a dataset: the `.csv` extension replaced by
/// `.truth.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("truth.json")
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Schema(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

/// Reads and deserializes a JSON artifact.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{} is not valid: {e}", path.display())))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt_f64(x),
        None => "nan".into(),
    }
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        message: format!("expected a number, got {field:?}"),
    })
}

fn parse_opt(field: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let v = parse_f64(field, row, column)?;
    Ok(if v.is_nan() { None } else { Some(v) })
}

/// Writes a dataset as CSV with feature columns `x0..x{d-1}`, then a
/// `label` column when labels are present and a `partition` column when
/// natural group ids are.
pub fn write_dataset_csv(path: &Path, data: &Dataset<f64>) -> Result<()> {
    let d = data.dim();
    let mut text = String::new();
    for j in 0..d {
        if j > 0 {
            text.push(',');
        }
        text.push_str(&format!("x{j}"));
    }
    if data.labels().is_some() {
        text.push_str(",label");
    }
    if data.partition_of().is_some() {
        text.push_str(",partition");
    }
    text.push('\n');
    for i in 0..data.n() {
        for j in 0..d {
            if j > 0 {
                text.push(',');
            }
            text.push_str(&fmt_f64(data.inputs()[[i, j]]));
        }
        if let Some(labels) = data.labels() {
            text.push_str(&format!(",{}", labels[i]));
        }
        if let Some(parts) = data.partition_of() {
            text.push_str(&format!(",{}", parts[i]));
        }
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

/// Reads a generated dataset back in raw coordinates: columns named
/// `label` and `partition` are interpreted, every other column is a
/// feature in file order. External files should go through the schema
///-aware standardizing loader instead.
pub fn read_dataset_csv(path: &Path, truth: Option<Truth<f64>>) -> Result<Dataset<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_col = headers.iter().position(|h| h == "label");
    let part_col = headers.iter().position(|h| h == "partition");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| Some(*c) != label_col && Some(*c) != part_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<i8> = Vec::new();
    let mut parts: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: i + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        for &c in &feature_cols {
            rows.push(parse_f64(&record[c], i + 1, &headers[c])?);
        }
        if let Some(c) = label_col {
            labels.push(record[c].trim().parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: "label".into(),
                message: format!("expected 1 or -1, got {:?}", &record[c]),
            })?);
        }
        if let Some(c) = part_col {
            parts.push(record[c].trim().parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: "partition".into(),
                message: format!("expected a group id, got {:?}", &record[c]),
            })?);
        }
        n += 1;
    }
    let inputs = Array2::from_shape_vec((n, feature_cols.len()), rows)
        .map_err(|e| Error::Schema(format!("ragged rows: {e}")))?;
    Dataset::new(
        inputs,
        label_col.map(|_| labels),
        part_col.map(|_| parts),
        truth,
    )
}

/// Writes the metric trace of a run, one row per recorded state, with
/// `nan` for metrics that were not evaluated.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow<f64>]) -> Result<()> {
    let mut text = String::from("iter,");
    text.push_str(&TRACE_COLUMNS.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.iter,
            fmt_opt(row.kl),
            fmt_opt(row.mean_fnorm),
            fmt_opt(row.cov_fnorm),
            fmt_opt(row.test_ll),
            fmt_opt(row.test_err),
            fmt_f64(row.factor_delta),
            fmt_opt(row.trace_cov),
            fmt_f64(row.wall_ms),
        ));
    }
    Ok(fs::write(path, text)?)
}

/// One parsed trace row: the update counter plus the metric columns in
/// [`TRACE_COLUMNS`] order, `None` where the file says `nan`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: u64,
    pub values: [Option<f64>; TRACE_COLUMNS.len()],
}

/// Reads a trace file back, validating the header.
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let expected: Vec<&str> = std::iter::once("iter").chain(TRACE_COLUMNS).collect();
    if headers != expected {
        return Err(Error::Schema(format!(
            "{} is not a trace file: header {headers:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: i + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let iter = record[0].trim().parse().map_err(|_| Error::Parse {
            row: i + 1,
            column: "iter".into(),
            message: format!("expected a count, got {:?}", &record[0]),
        })?;
        let mut values = [None; TRACE_COLUMNS.len()];
        for (k, column) in TRACE_COLUMNS.iter().enumerate() {
            values[k] = parse_opt(&record[k + 1], i + 1, column)?;
        }
        out.push(TraceRecord { iter, values });
    }
    Ok(out)
}

/// Writes the recorded moments of `q` in long form with header
/// `iter,block,kind,i,j,value`: one `mean` row per coordinate (`j` is 0)
/// and one `cov` row per matrix entry.
pub fn write_moments_csv(path: &Path, rows: &[TraceRow<f64>]) -> Result<()> {
    let mut text = String::from("iter,block,kind,i,j,value\n");
    for row in rows {
        let Some(moments) = &row.moments else {
            continue;
        };
        for (b, block) in moments.blocks().iter().enumerate() {
            for (i, v) in block.mean().iter().enumerate() {
                text.push_str(&format!("{},{b},mean,{i},0,{}\n", row.iter, fmt_f64(*v)));
            }
            for ((i, j), v) in block.cov().indexed_iter() {
                text.push_str(&format!("{},{b},cov,{i},{j},{}\n", row.iter, fmt_f64(*v)));
            }
        }
    }
    Ok(fs::write(path, text)?)
}

/// Reads a moments file back into one block structure per recorded
/// iteration, ordered by iteration.
pub fn read_moments_csv(path: &Path) -> Result<Vec<(u64, BlockMoment<f64>)>> {
    use std::collections::BTreeMap;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers != ["iter", "block", "kind", "i", "j", "value"] {
        return Err(Error::Schema(format!(
            "{} is not a moments file: header {headers:?}",
            path.display()
        )));
    }

    type Cells = (BTreeMap<usize, f64>, BTreeMap<(usize, usize), f64>);
    let mut table: BTreeMap<u64, BTreeMap<usize, Cells>> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let parse_idx = |field: &str, column: &str| -> Result<usize> {
            field.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: column.into(),
                message: format!("expected an index, got {field:?}"),
            })
        };
        let iter: u64 = parse_idx(&record[0], "iter")? as u64;
        let block = parse_idx(&record[1], "block")?;
        let i = parse_idx(&record[3], "i")?;
        let j = parse_idx(&record[4], "j")?;
        let value = parse_f64(&record[5], r + 1, "value")?;
        let cells = table.entry(iter).or_default().entry(block).or_default();
        match &record[2] {
            "mean" => {
                cells.0.insert(i, value);
            }
            "cov" => {
                cells.1.insert((i, j), value);
            }
            other => {
                return Err(Error::Parse {
                    row: r + 1,
                    column: "kind".into(),
                    message: format!("expected mean or cov, got {other:?}"),
                });
            }
        }
    }

    let mut out = Vec::with_capacity(table.len());
    for (iter, blocks) in table {
        let mut list = Vec::with_capacity(blocks.len());
        for (b, (means, covs)) in blocks {
            let d = means.len();
            let complete = means.keys().copied().eq(0..d) && covs.len() == d * d;
            if !complete {
                return Err(Error::Schema(format!(
                    "moments for iter {iter} block {b} are incomplete"
                )));
            }
            let mean = Array1::from_iter(means.values().copied());
            let mut cov = Array2::zeros((d, d));
            for ((i, j), v) in covs {
                if i >= d || j >= d {
                    return Err(Error::Schema(format!(
                        "cov index ({i}, {j}) outside block of dim {d}"
                    )));
                }
                cov[[i, j]] = v;
            }
            list.push(GaussianMoment::new(mean, cov)?);
        }
        out.push((iter, BlockMoment::from_blocks(list)?));
    }
    Ok(out)
}

/// One Gaussian block in JSON form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianJson {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianJson {
    fn from_moment(g: &GaussianMoment<f64>) -> Self {
        Self {
            mean: g.mean().to_vec(),
            cov: g.cov().rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn to_moment(&self) -> Result<GaussianMoment<f64>> {
        let d = self.mean.len();
        let mut cov = Array2::zeros((d, d));
        for (i, row) in self.cov.iter().enumerate() {
            if self.cov.len() != d || row.len() != d {
                return Err(Error::Schema(format!(
                    "cov must be {d}x{d} to match the mean"
                )));
            }
            for (j, v) in row.iter().enumerate() {
                cov[[i, j]] = *v;
            }
        }
        GaussianMoment::new(Array1::from_vec(self.mean.clone()), cov)
    }
}

/// A reference posterior on disk: per-block moments plus provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceFile {
    /// How the moments were obtained, `mcmc` or `grid`.
    pub kind: String,
    pub blocks: Vec<GaussianJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<McmcDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_mass: Option<f64>,
}

impl ReferenceFile {
    pub fn from_moments(kind: &str, moments: &BlockMoment<f64>) -> Self {
        Self {
            kind: kind.into(),
            blocks: moments.blocks().iter().map(GaussianJson::from_moment).collect(),
            diagnostics: None,
            log_z: None,
            boundary_mass: None,
        }
    }

    pub fn to_moments(&self) -> Result<BlockMoment<f64>> {
        let blocks: Result<Vec<_>> = self.blocks.iter().map(GaussianJson::to_moment).collect();
        BlockMoment::from_blocks(blocks?)
    }
}
