//! `sepia run`: fit an approximation to a dataset and write artifacts.
//!
//! A run produces, inside the output directory:
//!
//! - `trace.csv`, one metric row per recorded state;
//! - `moments.csv` (with `--moments`), the recorded moments of `q`;
//! - `reference.json` (with `--oracle`), the computed reference posterior;
//! - `summary.json`, the resolved experiment plus result counters, enough
//!   to reproduce the run via `--spec`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sepia::data::{load_csv, split, CsvSchema, Dataset};
use sepia::expfam::{BlockMoment, GaussianMoment};
use sepia::inference::{run, Algorithm, DampingSchedule, EvalContext, ModelSpec, SweepOrder};
use sepia::likelihoods::MoGModel;
use sepia::oracle::{
    grid_posterior_moments, mog_mcmc_reference, mog_means_log_posterior, probit_log_posterior,
    probit_mcmc_reference, GridSpec, McmcConfig, McmcDiagnostics,
};
use sepia::{Error, Result, RunConfig64};

use crate::artifacts::{
    load_json, read_dataset_csv, save_json, sidecar_path, write_moments_csv, write_trace_csv,
    ReferenceFile, Sidecar,
};
use crate::gen::parse_f64_list;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AlgArg {
    Ep,
    Adf,
    Sep,
    ParallelSep,
    Dsep,
    LatentSep,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Self {
        match a {
            AlgArg::Ep => Algorithm::Ep,
            AlgArg::Adf => Algorithm::Adf,
            AlgArg::Sep => Algorithm::Sep,
            AlgArg::ParallelSep => Algorithm::ParallelSep,
            AlgArg::Dsep => Algorithm::Dsep,
            AlgArg::LatentSep => Algorithm::LatentSep,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    /// Derive the model from the dataset's sidecar.
    Auto,
    Probit,
    Mog,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DampingArg {
    /// Weight `1 / N_local`, the natural inclusion weight of tied and
    /// partitioned factors.
    OneOverN,
    /// Decaying weight `epsilon0 * (tau / (tau + t))^kappa`.
    RobbinsMonro,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepArg {
    Sequential,
    Shuffled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OracleArg {
    None,
    /// Random-walk Metropolis moments of the exact posterior.
    Mcmc,
    /// Dense-grid moments (1 or 2 dimensions).
    Grid,
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// JSON experiment spec; replaces the tuning flags below.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,

    /// Dataset CSV. Files with a `.truth.json` sidecar are read in raw
    /// coordinates; external files go through the standardizing schema
    /// loader.
    #[arg(long, value_name = "FILE", required_unless_present = "spec")]
    data: Option<PathBuf>,

    /// Update rule.
    #[arg(long = "alg", value_enum, required_unless_present = "spec")]
    algorithm: Option<AlgArg>,

    /// Model family.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,

    /// Probit prior variance (default: the sidecar's, else 1).
    #[arg(long)]
    gamma: Option<f64>,

    /// Mixture component count (default: the sidecar's).
    #[arg(long)]
    components: Option<usize>,

    /// Mixture observation noise (default: the sidecar's).
    #[arg(long)]
    sigma: Option<f64>,

    /// Mixture prior center, `d` comma-separated values (default: the
    /// sidecar's, else the origin).
    #[arg(long)]
    prior_center: Option<String>,

    /// Mixture prior variance scale.
    #[arg(long)]
    prior_scale: Option<f64>,

    /// Sweep budget.
    #[arg(long)]
    passes: Option<usize>,

    /// Convergence threshold on the largest factor change over one pass.
    #[arg(long)]
    tol: Option<f64>,

    /// Record a trace row every this many updates.
    #[arg(long)]
    stride: Option<usize>,

    /// Site power in the tilted step (1 selects closed forms).
    #[arg(long)]
    alpha: Option<f64>,

    /// Minibatch size for the parallel tied update.
    #[arg(long)]
    minibatch: Option<usize>,

    /// Partition count for dsep.
    #[arg(long)]
    k: Option<usize>,

    /// Update weight: `auto` for the algorithm's natural damping, or a
    /// fixed number.
    #[arg(long)]
    epsilon: Option<String>,

    /// Damping schedule by name.
    #[arg(long, value_enum, conflicts_with = "epsilon")]
    damping: Option<DampingArg>,

    /// Initial weight for `--damping robbins-monro`.
    #[arg(long)]
    epsilon0: Option<f64>,

    /// Delay constant for `--damping robbins-monro`.
    #[arg(long)]
    tau: Option<f64>,

    /// Decay exponent in (1/2, 1] for `--damping robbins-monro`.
    #[arg(long)]
    kappa: Option<f64>,

    /// Site visit order within a pass.
    #[arg(long, value_enum)]
    sweep: Option<SweepArg>,

    /// Seed for `--sweep shuffled`.
    #[arg(long)]
    sweep_seed: Option<u64>,

    /// Hold out this fraction of rows for predictive metrics.
    #[arg(long)]
    test_fraction: Option<f64>,

    /// Seed of the train/test shuffle.
    #[arg(long)]
    split_seed: Option<u64>,

    /// Compute a reference posterior on the training rows before the run.
    #[arg(long, value_enum, conflicts_with = "reference")]
    oracle: Option<OracleArg>,

    /// Retained draws per chain.
    #[arg(long)]
    mcmc_steps: Option<usize>,

    /// Discarded adaptation draws per chain.
    #[arg(long)]
    mcmc_burn_in: Option<usize>,

    /// Initial proposal standard deviation.
    #[arg(long)]
    mcmc_scale: Option<f64>,

    #[arg(long)]
    mcmc_seed: Option<u64>,

    #[arg(long)]
    mcmc_chains: Option<usize>,

    /// Grid lower corner, comma-separated.
    #[arg(long)]
    grid_lo: Option<String>,

    /// Grid upper corner, comma-separated.
    #[arg(long)]
    grid_hi: Option<String>,

    /// Grid points per dimension, comma-separated.
    #[arg(long)]
    grid_points: Option<String>,

    /// Reuse a reference posterior written by an earlier run.
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,

    /// Label column of an external CSV; pass an empty string for
    /// unlabeled data.
    #[arg(long)]
    label_column: Option<String>,

    /// Cell value mapped to label +1 in an external CSV.
    #[arg(long)]
    positive_label: Option<String>,

    /// Partition-id column of an external CSV.
    #[arg(long)]
    partition_column: Option<String>,

    /// Record wall-clock milliseconds in the trace (breaks
    /// bit-reproducibility).
    #[arg(long)]
    timing: bool,

    /// Also write `moments.csv` with the recorded moments of `q`.
    #[arg(long)]
    moments: bool,

    /// Output directory.
    #[arg(long, env = "SEPIA_OUT_DIR")]
    out: Option<PathBuf>,
}

/// Model description as it appears in specs and summaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelJson {
    /// Probit regression with weight prior `N(0, gamma I)`.
    Probit { gamma: f64 },
    /// Gaussian mixture with unknown component means.
    Mog {
        components: usize,
        sigma: f64,
        /// Mean of the component-mean prior (default: the origin).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior_center: Option<Vec<f64>>,
        /// Isotropic prior variance scale.
        #[serde(default = "one")]
        prior_scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Reference computation as it appears in specs and summaries.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleJson {
    #[default]
    None,
    Mcmc {
        #[serde(default)]
        config: McmcConfig,
    },
    Grid {
        lo: Vec<f64>,
        hi: Vec<f64>,
        points: Vec<usize>,
    },
}

/// A fully resolved experiment. `run` writes this into `summary.json`
/// under `experiment`, and `--spec` accepts the same shape back.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Dataset path, as given on the command line.
    pub data: PathBuf,
    /// Full run configuration.
    pub config: RunConfig64,
    /// Model; omit to derive it from the dataset's sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelJson>,
    /// Column schema for external CSV files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    #[serde(default)]
    pub oracle: OracleJson,
    /// Load the reference from this file instead of computing one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Hold out this fraction of rows for predictive metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub split_seed: u64,
    /// Record wall-clock milliseconds in the trace.
    #[serde(default)]
    pub timing: bool,
    /// Also write `moments.csv`.
    #[serde(default)]
    pub write_moments: bool,
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'static str,
    experiment: &'a ExperimentSpec,
    data: DataSummary,
    /// The model the run actually used (resolved from the experiment's
    /// model or the sidecar).
    model: &'a ModelJson,
    oracle: OracleSummary,
    result: ResultSummary,
}

#[derive(Serialize)]
struct DataSummary {
    path: String,
    n_total: usize,
    n_train: usize,
    n_test: usize,
    d: usize,
    labeled: bool,
    /// Natural partition groups carried by the data, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
}

#[derive(Serialize)]
struct OracleSummary {
    /// Where the reference came from: `none`, `mcmc`, `grid`, or `file`.
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<McmcDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundary_mass: Option<f64>,
}

#[derive(Serialize)]
struct ResultSummary {
    updates: u64,
    applied: u64,
    skipped: u64,
    passes_completed: usize,
    converged: bool,
    /// Scalar parameters stored by the finished state: prior, `q`, and
    /// factors.
    parameter_count: usize,
    rows: usize,
    #[serde(rename = "final")]
    final_row: FinalRow,
}

#[derive(Serialize)]
struct FinalRow {
    iter: u64,
    kl: Option<f64>,
    mean_fnorm: Option<f64>,
    cov_fnorm: Option<f64>,
    test_ll: Option<f64>,
    test_err: Option<f64>,
    factor_delta: f64,
    trace_cov: Option<f64>,
}

pub fn run_cmd(args: RunArgs) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let spec = resolve(args)?;
    execute(&spec, &out)
}

/// Flags that `--spec` replaces, with whether each was given.
fn flags_given(args: &RunArgs) -> Vec<(&'static str, bool)> {
    vec![
        ("--data", args.data.is_some()),
        ("--alg", args.algorithm.is_some()),
        ("--model", args.model.is_some()),
        ("--gamma", args.gamma.is_some()),
        ("--components", args.components.is_some()),
        ("--sigma", args.sigma.is_some()),
        ("--prior-center", args.prior_center.is_some()),
        ("--prior-scale", args.prior_scale.is_some()),
        ("--passes", args.passes.is_some()),
        ("--tol", args.tol.is_some()),
        ("--stride", args.stride.is_some()),
        ("--alpha", args.alpha.is_some()),
        ("--minibatch", args.minibatch.is_some()),
        ("--k", args.k.is_some()),
        ("--epsilon", args.epsilon.is_some()),
        ("--damping", args.damping.is_some()),
        ("--epsilon0", args.epsilon0.is_some()),
        ("--tau", args.tau.is_some()),
        ("--kappa", args.kappa.is_some()),
        ("--sweep", args.sweep.is_some()),
        ("--sweep-seed", args.sweep_seed.is_some()),
        ("--test-fraction", args.test_fraction.is_some()),
        ("--split-seed", args.split_seed.is_some()),
        ("--oracle", args.oracle.is_some()),
        ("--mcmc-steps", args.mcmc_steps.is_some()),
        ("--mcmc-burn-in", args.mcmc_burn_in.is_some()),
        ("--mcmc-scale", args.mcmc_scale.is_some()),
        ("--mcmc-seed", args.mcmc_seed.is_some()),
        ("--mcmc-chains", args.mcmc_chains.is_some()),
        ("--grid-lo", args.grid_lo.is_some()),
        ("--grid-hi", args.grid_hi.is_some()),
        ("--grid-points", args.grid_points.is_some()),
        ("--reference", args.reference.is_some()),
        ("--label-column", args.label_column.is_some()),
        ("--positive-label", args.positive_label.is_some()),
        ("--partition-column", args.partition_column.is_some()),
    ]
}

fn resolve(args: RunArgs) -> Result<ExperimentSpec> {
    if let Some(path) = &args.spec {
        if let Some(flag) = flags_given(&args).iter().find_map(|&(f, g)| g.then_some(f)) {
            return Err(Error::ConfigInvalid(format!(
                "--spec replaces {flag}; set it in the spec file instead"
            )));
        }
        let mut spec: ExperimentSpec = load_json(path)?;
        if args.timing {
            spec.timing = true;
        }
        if args.moments {
            spec.write_moments = true;
        }
        return Ok(spec);
    }

    let data = args.data.clone().expect("clap requires --data");
    let algorithm = Algorithm::from(args.algorithm.expect("clap requires --alg"));
    let sidecar: Option<Sidecar> = {
        let path = sidecar_path(&data);
        if path.exists() {
            Some(load_json(&path)?)
        } else {
            None
        }
    };

    let model = Some(resolve_model(&args, sidecar.as_ref())?);
    let schema = resolve_schema(&args, sidecar.is_some())?;

    let mut config = RunConfig64::for_algorithm(algorithm);
    if let Some(v) = args.passes {
        config.passes = v;
    }
    if let Some(v) = args.tol {
        config.tol = v;
    }
    if let Some(v) = args.stride {
        config.stride = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.minibatch {
        config.minibatch = v;
    }
    if let Some(v) = args.k {
        config.partitions = v;
    }
    config.sweep = match args.sweep {
        None | Some(SweepArg::Sequential) => SweepOrder::Sequential,
        Some(SweepArg::Shuffled) => SweepOrder::Shuffled {
            seed: args.sweep_seed.unwrap_or(0),
        },
    };
    config.damping = match (args.epsilon.as_deref(), args.damping) {
        (None | Some("auto"), None) => config.damping,
        (Some(text), None) => DampingSchedule::Fixed {
            epsilon0: text.parse().map_err(|_| {
                Error::ConfigInvalid(format!("--epsilon must be auto or a number, got {text:?}"))
            })?,
        },
        (None, Some(DampingArg::OneOverN)) => DampingSchedule::OneOverN,
        (None, Some(DampingArg::RobbinsMonro)) => DampingSchedule::RobbinsMonro {
            epsilon0: args.epsilon0.unwrap_or(1.0),
            tau: args.tau.unwrap_or(1.0),
            kappa: args.kappa.unwrap_or(1.0),
        },
        (Some(_), Some(_)) => unreachable!("clap rejects --epsilon with --damping"),
    };
    config.record_walltime = args.timing;

    let oracle = match args.oracle {
        None | Some(OracleArg::None) => OracleJson::None,
        Some(OracleArg::Mcmc) => {
            let base = McmcConfig::default();
            OracleJson::Mcmc {
                config: McmcConfig {
                    steps: args.mcmc_steps.unwrap_or(base.steps),
                    burn_in: args.mcmc_burn_in.unwrap_or(base.burn_in),
                    proposal_scale: args.mcmc_scale.unwrap_or(base.proposal_scale),
                    seed: args.mcmc_seed.unwrap_or(base.seed),
                    chains: args.mcmc_chains.unwrap_or(base.chains),
                },
            }
        }
        Some(OracleArg::Grid) => {
            let (Some(lo), Some(hi), Some(points)) = (&args.grid_lo, &args.grid_hi, &args.grid_points) else {
                return Err(Error::ConfigInvalid(
                    "--oracle grid needs --grid-lo, --grid-hi, and --grid-points".into(),
                ));
            };
            let lo = parse_free_list("--grid-lo", lo)?;
            let hi = parse_free_list("--grid-hi", hi)?;
            let points: Result<Vec<usize>> = points
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::ConfigInvalid(format!(
                            "--grid-points has a non-integer entry {s:?}"
                        ))
                    })
                })
                .collect();
            OracleJson::Grid {
                lo,
                hi,
                points: points?,
            }
        }
    };

    Ok(ExperimentSpec {
        data,
        config,
        model,
        schema,
        oracle,
        reference: args.reference,
        test_fraction: args.test_fraction,
        split_seed: args.split_seed.unwrap_or(0),
        timing: args.timing,
        write_moments: args.moments,
    })
}

/// Comma-separated numbers without a length requirement; lengths are
/// validated where the target dimension is known.
fn parse_free_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    let n = text.split(',').count();
    parse_f64_list(flag, text, n)
}

fn resolve_model(args: &RunArgs, sidecar: Option<&Sidecar>) -> Result<ModelJson> {
    let kind = match (args.model, sidecar) {
        (Some(ModelArg::Probit), Some(Sidecar::Mog { .. })) => {
            return Err(Error::ConfigInvalid(
                "--model probit disagrees with the dataset's mog sidecar".into(),
            ));
        }
        (Some(ModelArg::Mog), Some(Sidecar::Probit { .. })) => {
            return Err(Error::ConfigInvalid(
                "--model mog disagrees with the dataset's probit sidecar".into(),
            ));
        }
        (Some(ModelArg::Probit), _) | (None | Some(ModelArg::Auto), None) => ModelArg::Probit,
        (Some(ModelArg::Mog), _) => ModelArg::Mog,
        (None | Some(ModelArg::Auto), Some(Sidecar::Probit { .. })) => ModelArg::Probit,
        (None | Some(ModelArg::Auto), Some(Sidecar::Mog { .. })) => ModelArg::Mog,
    };
    match kind {
        ModelArg::Probit => {
            let side_gamma = match sidecar {
                Some(Sidecar::Probit { config, .. }) => Some(config.gamma),
                _ => None,
            };
            Ok(ModelJson::Probit {
                gamma: args.gamma.or(side_gamma).unwrap_or(1.0),
            })
        }
        ModelArg::Mog => {
            let side = match sidecar {
                Some(Sidecar::Mog { config, .. }) => Some(config),
                _ => None,
            };
            let components = args
                .components
                .or(side.map(|c| c.components))
                .ok_or_else(|| Error::ConfigInvalid("--model mog needs --components".into()))?;
            let sigma = args
                .sigma
                .or(side.map(|c| c.sigma))
                .ok_or_else(|| Error::ConfigInvalid("--model mog needs --sigma".into()))?;
            let prior_center = match &args.prior_center {
                Some(text) => Some(parse_free_list("--prior-center", text)?),
                None => side.map(|c| c.center.clone()),
            };
            Ok(ModelJson::Mog {
                components,
                sigma,
                prior_center,
                prior_scale: args.prior_scale.unwrap_or(1.0),
            })
        }
        ModelArg::Auto => unreachable!("auto resolved above"),
    }
}

fn resolve_schema(args: &RunArgs, has_sidecar: bool) -> Result<Option<CsvSchema>> {
    let given = args.label_column.is_some()
        || args.positive_label.is_some()
        || args.partition_column.is_some();
    if has_sidecar {
        if given {
            return Err(Error::ConfigInvalid(
                "column-schema flags only apply to files without a sidecar".into(),
            ));
        }
        return Ok(None);
    }
    if !given {
        return Ok(None);
    }
    let base = CsvSchema::default();
    Ok(Some(CsvSchema {
        label_column: match &args.label_column {
            Some(name) if name.is_empty() => None,
            Some(name) => Some(name.clone()),
            None => base.label_column,
        },
        positive_label: args
            .positive_label
            .clone()
            .unwrap_or(base.positive_label),
        partition_column: args.partition_column.clone().or(base.partition_column),
    }))
}

fn execute(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let sidecar: Option<Sidecar> = {
        let path = sidecar_path(&spec.data);
        if path.exists() {
            Some(load_json(&path)?)
        } else {
            None
        }
    };
    let data: Dataset<f64> = match &sidecar {
        Some(side) => {
            if spec.schema.is_some() {
                return Err(Error::ConfigInvalid(
                    "column-schema flags only apply to files without a sidecar".into(),
                ));
            }
            read_dataset_csv(&spec.data, Some(side.truth()))?
        }
        None => load_csv(&spec.data, &spec.schema.clone().unwrap_or_default())?,
    };

    let model_json = match (&spec.model, &sidecar) {
        (Some(m), _) => m.clone(),
        (None, Some(Sidecar::Probit { config, .. })) => ModelJson::Probit {
            gamma: config.gamma,
        },
        (None, Some(Sidecar::Mog { config, .. })) => ModelJson::Mog {
            components: config.components,
            sigma: config.sigma,
            prior_center: Some(config.center.clone()),
            prior_scale: 1.0,
        },
        (None, None) => {
            return Err(Error::ConfigInvalid(
                "no sidecar to derive the model from; set the spec's model".into(),
            ));
        }
    };
    let model_spec = build_model(&model_json, &data)?;

    let (train, test) = match spec.test_fraction {
        Some(f) => {
            let (train, test) = split(&data, f, spec.split_seed)?;
            (train, Some(test))
        }
        None => (data, None),
    };

    let (reference, reference_file, oracle_kind) = build_reference(spec, &model_spec, &train)?;
    if let Some(reference) = &reference {
        let dims = model_dims(&model_spec, &train);
        if reference.block_dims() != dims {
            return Err(Error::MissingReference(format!(
                "reference blocks {:?} do not match the model blocks {:?}",
                reference.block_dims(),
                dims
            )));
        }
    }

    let eval = EvalContext {
        reference: reference.as_ref(),
        test: test.as_ref(),
    };
    let trace = run(&spec.config, &model_spec, &train, &eval)?;

    fs::create_dir_all(out)?;
    if let Some(file) = &reference_file {
        let path = out.join("reference.json");
        save_json(&path, file)?;
        println!("{}", path.display());
    }
    let trace_path = out.join("trace.csv");
    write_trace_csv(&trace_path, &trace.rows)?;
    println!("{}", trace_path.display());
    if spec.write_moments {
        let path = out.join("moments.csv");
        write_moments_csv(&path, &trace.rows)?;
        println!("{}", path.display());
    }

    let last = trace.rows.last().expect("a run records at least one row");
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        experiment: spec,
        data: DataSummary {
            path: spec.data.display().to_string(),
            n_total: train.n() + test.as_ref().map_or(0, |t| t.n()),
            n_train: train.n(),
            n_test: test.as_ref().map_or(0, |t| t.n()),
            d: train.dim(),
            labeled: train.labels().is_some(),
            groups: train.n_partitions(),
        },
        model: &model_json,
        oracle: OracleSummary {
            kind: oracle_kind,
            diagnostics: reference_file.as_ref().and_then(|f| f.diagnostics),
            log_z: reference_file.as_ref().and_then(|f| f.log_z),
            boundary_mass: reference_file.as_ref().and_then(|f| f.boundary_mass),
        },
        result: ResultSummary {
            updates: trace.updates,
            applied: trace.applied,
            skipped: trace.skipped,
            passes_completed: trace.passes_completed,
            converged: trace.converged,
            parameter_count: trace.final_state.parameter_count(),
            rows: trace.rows.len(),
            final_row: FinalRow {
                iter: last.iter,
                kl: last.kl,
                mean_fnorm: last.mean_fnorm,
                cov_fnorm: last.cov_fnorm,
                test_ll: last.test_ll,
                test_err: last.test_err,
                factor_delta: last.factor_delta,
                trace_cov: last.trace_cov,
            },
        },
    };
    let summary_path = out.join("summary.json");
    save_json(&summary_path, &summary)?;
    println!("{}", summary_path.display());
    println!(
        "converged={} passes={} updates={} applied={} skipped={} params={}",
        trace.converged,
        trace.passes_completed,
        trace.updates,
        trace.applied,
        trace.skipped,
        summary.result.parameter_count,
    );

    if trace.all_skipped() {
        return Err(Error::DegenerateInput(format!(
            "all {} updates were skipped; see {}",
            trace.updates,
            summary_path.display()
        )));
    }
    Ok(())
}

/// Block structure the reference must match: one `d` block for probit,
/// one `d` block per component for the mixture.
fn model_dims(model: &ModelSpec<f64>, data: &Dataset<f64>) -> Vec<usize> {
    match model {
        ModelSpec::Probit { .. } => vec![data.dim()],
        ModelSpec::Mog(m) => vec![m.dim(); m.n_components()],
    }
}

fn build_model(json: &ModelJson, data: &Dataset<f64>) -> Result<ModelSpec<f64>> {
    match json {
        ModelJson::Probit { gamma } => {
            if data.labels().is_none() {
                return Err(Error::ConfigInvalid(
                    "the probit model needs a labeled dataset".into(),
                ));
            }
            Ok(ModelSpec::Probit { gamma: *gamma })
        }
        ModelJson::Mog {
            components,
            sigma,
            prior_center,
            prior_scale,
        } => {
            let d = data.dim();
            let center = match prior_center {
                Some(c) if c.len() != d => {
                    return Err(Error::ConfigInvalid(format!(
                        "--prior-center needs {d} values, got {}",
                        c.len()
                    )));
                }
                Some(c) => Array1::from_vec(c.clone()),
                None => Array1::zeros(d),
            };
            let prior = GaussianMoment::new(center, Array2::eye(d) * *prior_scale)?;
            Ok(ModelSpec::Mog(MoGModel::new(*components, *sigma, prior)?))
        }
    }
}

/// Computes or loads the reference posterior, returning the moments, the
/// file to write (when computed here), and the provenance label.
fn build_reference(
    spec: &ExperimentSpec,
    model: &ModelSpec<f64>,
    train: &Dataset<f64>,
) -> Result<(Option<BlockMoment<f64>>, Option<ReferenceFile>, &'static str)> {
    if let Some(path) = &spec.reference {
        if !matches!(spec.oracle, OracleJson::None) {
            return Err(Error::ConfigInvalid(
                "pass either an oracle or a reference file, not both".into(),
            ));
        }
        let file: ReferenceFile = load_json(path)?;
        return Ok((Some(file.to_moments()?), None, "file"));
    }
    match &spec.oracle {
        OracleJson::None => Ok((None, None, "none")),
        OracleJson::Mcmc { config } => {
            let (moments, diagnostics) = match model {
                ModelSpec::Probit { gamma } => probit_mcmc_reference(train, *gamma, config)?,
                ModelSpec::Mog(m) => mog_mcmc_reference(train, m, None, config)?,
            };
            let mut file = ReferenceFile::from_moments("mcmc", &moments);
            file.diagnostics = Some(diagnostics);
            Ok((Some(moments), Some(file), "mcmc"))
        }
        OracleJson::Grid { lo, hi, points } => {
            let grid = GridSpec::new(lo.clone(), hi.clone(), points.clone())?;
            let (moments, result) = match model {
                ModelSpec::Probit { gamma } => {
                    let log_post = probit_log_posterior(train, *gamma)?;
                    let result = grid_posterior_moments(log_post, &grid)?;
                    (BlockMoment::single(result.moments.clone()), result)
                }
                ModelSpec::Mog(m) => {
                    let log_post = mog_means_log_posterior(train, m)?;
                    let result = grid_posterior_moments(log_post, &grid)?;
                    (
                        BlockMoment::from_stacked(&result.moments, &m.block_dims())?,
                        result,
                    )
                }
            };
            let mut file = ReferenceFile::from_moments("grid", &moments);
            file.log_z = Some(result.log_z);
            file.boundary_mass = Some(result.boundary_mass);
            Ok((Some(moments), Some(file), "grid"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Harness {
        #[command(flatten)]
        args: RunArgs,
    }

    fn parse(line: &[&str]) -> RunArgs {
        Harness::try_parse_from(std::iter::once("test").chain(line.iter().copied()))
            .expect("flags parse")
            .args
    }

    #[test]
    fn epsilon_number_becomes_fixed_damping() {
        let args = parse(&["--data", "x.csv", "--alg", "sep", "--epsilon", "0.25"]);
        let spec = resolve(args).unwrap();
        assert_eq!(
            spec.config.damping,
            DampingSchedule::Fixed { epsilon0: 0.25 }
        );
    }

    #[test]
    fn epsilon_auto_keeps_the_algorithm_default() {
        let args = parse(&["--data", "x.csv", "--alg", "sep", "--epsilon", "auto"]);
        let spec = resolve(args).unwrap();
        assert_eq!(spec.config.damping, DampingSchedule::OneOverN);
        let args = parse(&["--data", "x.csv", "--alg", "ep", "--epsilon", "auto"]);
        let spec = resolve(args).unwrap();
        assert_eq!(spec.config.damping, DampingSchedule::Fixed { epsilon0: 1.0 });
    }

    #[test]
    fn bad_epsilon_names_the_flag() {
        let args = parse(&["--data", "x.csv", "--alg", "sep", "--epsilon", "fast"]);
        let err = resolve(args).unwrap_err();
        assert!(err.to_string().contains("--epsilon"));
    }

    #[test]
    fn partitions_and_minibatch_flags_land_in_the_config() {
        let args = parse(&[
            "--data", "x.csv", "--alg", "dsep", "--k", "5", "--minibatch", "4",
        ]);
        let spec = resolve(args).unwrap();
        assert_eq!(spec.config.partitions, 5);
        assert_eq!(spec.config.minibatch, 4);
        assert_eq!(spec.config.algorithm, Algorithm::Dsep);
    }

    #[test]
    fn grid_oracle_requires_bounds() {
        let args = parse(&["--data", "x.csv", "--alg", "ep", "--oracle", "grid"]);
        let err = resolve(args).unwrap_err();
        assert!(err.to_string().contains("--grid-lo"));
    }

    #[test]
    fn schema_flags_without_sidecar_build_a_schema() {
        let args = parse(&[
            "--data",
            "x.csv",
            "--alg",
            "ep",
            "--label-column",
            "y",
            "--positive-label",
            "yes",
        ]);
        let spec = resolve(args).unwrap();
        let schema = spec.schema.unwrap();
        assert_eq!(schema.label_column.as_deref(), Some("y"));
        assert_eq!(schema.positive_label, "yes");
    }

    #[test]
    fn empty_label_column_means_unlabeled() {
        let args = parse(&["--data", "x.csv", "--alg", "ep", "--label-column", ""]);
        let spec = resolve(args).unwrap();
        assert_eq!(spec.schema.unwrap().label_column, None);
    }
}
