//! `sepia gen`: synthetic datasets with ground-truth sidecars.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use sepia::data::{gen_mog, gen_probit, InputDist, MogGenConfig, ProbitGenConfig, Truth};
use sepia::{Error, Result};

use crate::artifacts::{save_json, sidecar_path, write_dataset_csv, Sidecar};

#[derive(Clone, Debug, Subcommand)]
pub enum GenCmd {
    /// Probit classification data with a known weight vector.
    Probit(ProbitArgs),
    /// Mixture-of-Gaussians observations with known component means.
    Mog(MogArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InputKind {
    /// Standard normal features.
    Gaussian,
    /// Features drawn from a mixture of well-separated Gaussian clusters;
    /// each row's cluster becomes its partition id.
    Mog,
}

#[derive(Clone, Debug, Args)]
pub struct ProbitArgs {
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Feature dimension.
    #[arg(long)]
    d: usize,
    /// Input distribution.
    #[arg(long, value_enum, default_value_t = InputKind::Gaussian)]
    inputs: InputKind,
    /// Cluster count for `--inputs mog`.
    #[arg(long)]
    components: Option<usize>,
    /// Prior variance of the true weights, `theta ~ N(0, gamma I)`.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `<name>.csv` and `<name>.truth.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Stem of the output files.
    #[arg(long, default_value = "probit")]
    name: String,
}

#[derive(Clone, Debug, Args)]
pub struct MogArgs {
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Observation dimension.
    #[arg(long)]
    d: usize,
    /// Mixture components.
    #[arg(long)]
    components: usize,
    /// Isotropic observation noise (standard deviation).
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Center of the component-mean prior, `d` comma-separated values
    /// (default origin).
    #[arg(long)]
    center: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `<name>.csv` and `<name>.truth.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Stem of the output files.
    #[arg(long, default_value = "mog")]
    name: String,
}

/// Parses `d` comma-separated numbers, as used by `--center` and the grid
/// bounds of `run`.
pub fn parse_f64_list(flag: &str, text: &str, expect: usize) -> Result<Vec<f64>> {
    let values: Result<Vec<f64>> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("{flag} has a non-numeric entry {s:?}")))
        })
        .collect();
    let values = values?;
    if values.len() != expect {
        return Err(Error::ConfigInvalid(format!(
            "{flag} needs {expect} comma-separated values, got {}",
            values.len()
        )));
    }
    Ok(values)
}

fn check_positive(flag: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::ConfigInvalid(format!(
            "{flag} must be positive, got 0"
        )));
    }
    Ok(())
}

pub fn gen(cmd: GenCmd) -> Result<()> {
    match cmd {
        GenCmd::Probit(args) => gen_probit_cmd(args),
        GenCmd::Mog(args) => gen_mog_cmd(args),
    }
}

fn gen_probit_cmd(args: ProbitArgs) -> Result<()> {
    check_positive("--n", args.n)?;
    check_positive("--d", args.d)?;
    if !(args.gamma > 0.0) || !args.gamma.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "--gamma must be positive and finite, got {}",
            args.gamma
        )));
    }
    let inputs = match (args.inputs, args.components) {
        (InputKind::Gaussian, None) => InputDist::Gaussian,
        (InputKind::Gaussian, Some(_)) => {
            return Err(Error::ConfigInvalid(
                "--components only applies to --inputs mog".into(),
            ));
        }
        (InputKind::Mog, components) => InputDist::Mog {
            components: components.unwrap_or(5),
        },
    };
    let config = ProbitGenConfig {
        n: args.n,
        d: args.d,
        inputs,
        gamma: args.gamma,
        seed: args.seed,
    };
    let data = gen_probit::<f64>(&config)?;
    let Some(Truth::Probit { theta }) = data.truth() else {
        unreachable!("generator always attaches probit truth");
    };
    let sidecar = Sidecar::Probit {
        config,
        theta: theta.to_vec(),
    };
    write_outputs(&args.out, &args.name, &data, &sidecar)
}

fn gen_mog_cmd(args: MogArgs) -> Result<()> {
    check_positive("--n", args.n)?;
    check_positive("--d", args.d)?;
    if args.components < 2 {
        return Err(Error::ConfigInvalid(format!(
            "--components must be at least 2, got {}",
            args.components
        )));
    }
    if !(args.sigma > 0.0) || !args.sigma.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "--sigma must be positive and finite, got {}",
            args.sigma
        )));
    }
    let center = match &args.center {
        Some(text) => parse_f64_list("--center", text, args.d)?,
        None => vec![0.0; args.d],
    };
    let config = MogGenConfig {
        n: args.n,
        d: args.d,
        components: args.components,
        sigma: args.sigma,
        center,
        seed: args.seed,
    };
    let data = gen_mog::<f64>(&config)?;
    let Some(Truth::Mog { means, assignments }) = data.truth() else {
        unreachable!("generator always attaches mixture truth");
    };
    let sidecar = Sidecar::Mog {
        config,
        means: means.iter().map(|m| m.to_vec()).collect(),
        assignments: assignments.clone(),
    };
    write_outputs(&args.out, &args.name, &data, &sidecar)
}

fn write_outputs(
    out: &std::path::Path,
    name: &str,
    data: &sepia::Dataset64,
    sidecar: &Sidecar,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let csv = out.join(format!("{name}.csv"));
    let truth = sidecar_path(&csv);
    write_dataset_csv(&csv, data)?;
    save_json(&truth, sidecar)?;
    println!("{}", csv.display());
    println!("{}", truth.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parser_checks_length_and_content() {
        assert_eq!(parse_f64_list("--center", "1, -2,0.5", 3).unwrap(), vec![
            1.0, -2.0, 0.5
        ]);
        assert!(parse_f64_list("--center", "1,2", 3).is_err());
        assert!(parse_f64_list("--center", "1,x", 2).is_err());
    }

    #[test]
    fn zero_dimension_is_rejected_by_name() {
        let err = check_positive("--d", 0).unwrap_err();
        assert!(err.to_string().contains("--d"));
    }
}
