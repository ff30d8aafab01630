//! `sepia eval`: align traces from several runs into one table.
//!
//! Rows are inner-joined on the update counter, each input contributes a
//! labeled copy of its metric columns, and every trace after the first
//! gets difference columns against the first, so the output feeds plotting
//! tools directly. With `--moments` and `--reference`, the calibration
//! divergence is recomputed from the recorded moments as a check on the
//! traced values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use sepia::expfam::BlockMoment;
use sepia::oracle::calibration_kl;
use sepia::{Error, Result};

use crate::artifacts::{
    load_json, read_moments_csv, read_trace_csv, ReferenceFile, TraceRecord, TRACE_COLUMNS,
};

/// Metric columns that get difference-against-first columns; wall time is
/// excluded because timings are not comparable across runs.
const DIFF_COLUMNS: usize = TRACE_COLUMNS.len() - 1;

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Trace CSV of one run (repeat per run).
    #[arg(long = "trace", value_name = "FILE", required = true)]
    traces: Vec<PathBuf>,

    /// Column label per trace (default: derived from the paths).
    #[arg(long = "label")]
    labels: Vec<String>,

    /// Moments CSV matching each trace, for KL recomputation.
    #[arg(long = "moments", value_name = "FILE", requires = "reference")]
    moments: Vec<PathBuf>,

    /// Reference posterior the recomputation compares against.
    #[arg(long, value_name = "FILE", requires = "moments")]
    reference: Option<PathBuf>,

    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.traces.len() {
        return Err(Error::ConfigInvalid(format!(
            "--label given {} times for {} traces",
            args.labels.len(),
            args.traces.len()
        )));
    }
    if !args.moments.is_empty() && args.moments.len() != args.traces.len() {
        return Err(Error::ConfigInvalid(format!(
            "--moments given {} times for {} traces",
            args.moments.len(),
            args.traces.len()
        )));
    }

    let labels = resolve_labels(&args);
    let traces: Result<Vec<BTreeMap<u64, TraceRecord>>> = args
        .traces
        .iter()
        .map(|path| {
            Ok(read_trace_csv(path)?
                .into_iter()
                .map(|r| (r.iter, r))
                .collect())
        })
        .collect();
    let traces = traces?;

    let reference: Option<BlockMoment<f64>> = match &args.reference {
        Some(path) => Some(load_json::<ReferenceFile>(path)?.to_moments()?),
        None => None,
    };
    let moments: Result<Vec<BTreeMap<u64, BlockMoment<f64>>>> = args
        .moments
        .iter()
        .map(|path| Ok(read_moments_csv(path)?.into_iter().collect()))
        .collect();
    let moments = moments?;

    let mut iters: BTreeSet<u64> = traces[0].keys().copied().collect();
    for trace in &traces[1..] {
        iters.retain(|i| trace.contains_key(i));
    }
    if iters.is_empty() {
        return Err(Error::Schema(
            "the traces share no recorded iterations".into(),
        ));
    }

    let table = build_table(&iters, &traces, &labels, reference.as_ref(), &moments)?;
    match &args.out {
        Some(path) => {
            fs::write(path, table)?;
            println!("{}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn resolve_labels(args: &EvalArgs) -> Vec<String> {
    let mut labels: Vec<String> = if args.labels.is_empty() {
        args.traces.iter().map(|p| derive_label(p)).collect()
    } else {
        args.labels.clone()
    };
    for i in 0..labels.len() {
        let mut k = 1;
        while labels[..i].contains(&labels[i]) {
            k += 1;
            labels[i] = format!("{}-{k}", derive_label(&args.traces[i]));
        }
    }
    labels
}

/// A trace file usually sits at `<run dir>/trace.csv`; the run directory
/// is the distinguishing name. Any other file name speaks for itself.
fn derive_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem != "trace" && !stem.is_empty() {
        return stem;
    }
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(stem)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if !x.is_nan() => format!("{x}"),
        _ => "nan".into(),
    }
}

fn build_table(
    iters: &BTreeSet<u64>,
    traces: &[BTreeMap<u64, TraceRecord>],
    labels: &[String],
    reference: Option<&BlockMoment<f64>>,
    moments: &[BTreeMap<u64, BlockMoment<f64>>],
) -> Result<String> {
    let mut header = vec!["iter".to_string()];
    for (t, label) in labels.iter().enumerate() {
        for column in TRACE_COLUMNS {
            header.push(format!("{column}_{label}"));
        }
        if t < moments.len() {
            header.push(format!("kl_recomputed_{label}"));
        }
    }
    for label in &labels[1..] {
        for column in &TRACE_COLUMNS[..DIFF_COLUMNS] {
            header.push(format!("d_{column}_{label}"));
        }
    }

    let mut text = header.join(",");
    text.push('\n');
    for &iter in iters {
        let rows: Vec<&TraceRecord> = traces
            .iter()
            .map(|t| t.get(&iter).expect("joined iterations are present"))
            .collect();
        let mut cells = vec![iter.to_string()];
        for (t, row) in rows.iter().enumerate() {
            for v in row.values {
                cells.push(fmt_opt(v));
            }
            if t < moments.len() {
                let recomputed = match (reference, moments[t].get(&iter)) {
                    (Some(reference), Some(q)) => Some(calibration_kl(reference, q)?),
                    _ => None,
                };
                cells.push(fmt_opt(recomputed));
            }
        }
        for row in &rows[1..] {
            for k in 0..DIFF_COLUMNS {
                let diff = match (row.values[k], rows[0].values[k]) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                };
                cells.push(fmt_opt(diff));
            }
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    Ok(text)
}
