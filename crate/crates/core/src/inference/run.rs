//! Sweep driver: repeated passes of an update rule over a dataset, with
//! trace recording, convergence detection, and per-pass consistency checks.

use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::data::{assign_partitions, Dataset};
use crate::expfam::{BlockMoment, BlockNatural, GaussianMoment};
use crate::likelihoods::{MoGModel, MogSites, ProbitSites, SiteComputation};
use crate::oracle;
use crate::quadrature::DEFAULT_ORDER;
use crate::rng::PortableRng;
use crate::{Error, Real, Result};

use super::{
    adf_update, dsep_update, ep_update, parallel_sep_update, sep_update, Algorithm, ApproxState,
    RunConfig, SweepOrder, UpdateOutcome,
};

/// Which likelihood the sites come from and its fixed hyperparameters.
#[derive(Clone, Debug)]
pub enum ModelSpec<F> {
    /// Binary probit regression with prior `N(0, gamma I)` over the weights.
    Probit { gamma: F },
    /// Gaussian mixture with unknown component means.
    Mog(MoGModel<F>),
}

/// Optional evaluation inputs consulted at every recorded trace row.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a, F> {
    /// Ground-truth posterior moments; enables the calibration columns.
    pub reference: Option<&'a BlockMoment<F>>,
    /// Held-out set; enables predictive columns (probit only).
    pub test: Option<&'a Dataset<F>>,
}

impl<F> Default for EvalContext<'_, F> {
    fn default() -> Self {
        Self {
            reference: None,
            test: None,
        }
    }
}

/// One recorded point along a run.
///
/// Metric columns are `None` when their inputs are unavailable (no
/// reference, no test set, or a momentarily non-invertible `q`).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow<F> {
    /// Update counter at recording time (0 is the untouched prior state).
    pub iter: u64,
    /// Calibration divergence from the reference to `q`, summed over blocks.
    pub kl: Option<F>,
    /// Euclidean distance between reference and approximate means, averaged
    /// over blocks.
    pub mean_fnorm: Option<F>,
    /// Frobenius distance between reference and approximate covariances,
    /// averaged over blocks.
    pub cov_fnorm: Option<F>,
    /// Held-out mean predictive log-likelihood.
    pub test_ll: Option<F>,
    /// Held-out classification error rate.
    pub test_err: Option<F>,
    /// Factor change caused by the most recent update (0 at `iter` 0 and
    /// after skips).
    pub factor_delta: F,
    /// Total posterior variance, the standard collapse/overcounting
    /// diagnostic.
    pub trace_cov: Option<F>,
    /// Milliseconds since the run started; 0 unless wall-time recording is
    /// enabled.
    pub wall_ms: f64,
    /// Moments of `q` at this point, for offline re-evaluation.
    pub moments: Option<BlockMoment<F>>,
}

/// Everything a finished run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace<F> {
    pub rows: Vec<TraceRow<F>>,
    /// Update operations attempted (a minibatch counts once).
    pub updates: u64,
    /// Update operations that changed the state.
    pub applied: u64,
    /// Site visits that were skipped for numerical reasons.
    pub skipped: u64,
    pub passes_completed: usize,
    pub converged: bool,
    pub final_state: ApproxState<F>,
}

impl<F> RunTrace<F> {
    /// True when at least one update was attempted and none succeeded: the
    /// run produced nothing beyond its starting point.
    pub fn all_skipped(&self) -> bool {
        self.updates > 0 && self.applied == 0
    }
}

/// Runs `config.algorithm` on `data` under `model`, recording a trace.
///
/// The returned error distinguishes misuse (`ConfigInvalid`,
/// `DimensionMismatch`) from data problems; numerical trouble inside
/// individual updates is not an error, it shows up as skip counts.
pub fn run<F: Real>(
    config: &RunConfig<F>,
    model: &ModelSpec<F>,
    data: &Dataset<F>,
    eval: &EvalContext<'_, F>,
) -> Result<RunTrace<F>> {
    config.validate(data.n())?;
    let assignment = if config.algorithm == Algorithm::Dsep {
        Some(assign_partitions(data, config.partitions)?)
    } else {
        None
    };
    match model {
        ModelSpec::Probit { gamma } => {
            if !(*gamma > F::zero()) || !gamma.is_finite() {
                return Err(Error::ConfigInvalid(format!(
                    "probit prior variance gamma must be positive and finite, got {gamma}"
                )));
            }
            if config.algorithm == Algorithm::LatentSep {
                return Err(Error::ConfigInvalid(
                    "the latent-variable update needs a latent-variable model; \
                     use the plain tied update for probit"
                        .into(),
                ));
            }
            let labels = data
                .labels()
                .ok_or_else(|| Error::ConfigInvalid("probit model needs labeled data".into()))?;
            let d = data.dim();
            let prior = BlockMoment::single(GaussianMoment::new(
                Array1::zeros(d),
                Array2::eye(d) * *gamma,
            )?);
            let sites = ProbitSites::new(data.inputs(), labels, config.alpha, DEFAULT_ORDER)?;
            run_sweeps(config, &prior, &sites, assignment, eval)
        }
        ModelSpec::Mog(mog) => {
            if config.alpha != F::one() {
                return Err(Error::ConfigInvalid(
                    "fractional site powers are only supported for probit sites".into(),
                ));
            }
            let sites = MogSites::new(data.inputs(), mog)?;
            run_sweeps(config, &mog.prior_blocks(), &sites, assignment, eval)
        }
    }
}

/// Snapshot of the posterior at the start of a pass.
///
/// Convergence is judged on q rather than on the stored factors: tied and
/// partitioned factors carry 1/N (or K/N) of the posterior's natural
/// parameters, so a factor-level delta understates how far q still moves
/// per pass by the same ratio, and a fixed tolerance would stop SEP-family
/// runs far short of their fixed point.
struct PassAnchor<F>(BlockNatural<F>);

fn pass_anchor<F: Real>(state: &ApproxState<F>) -> PassAnchor<F> {
    PassAnchor(state.q().clone())
}

fn pass_delta<F: Real>(state: &ApproxState<F>, anchor: &PassAnchor<F>) -> F {
    anchor.0.max_abs_diff(state.q())
}

fn sweep_order(n: usize, pass: usize, sweep: &SweepOrder) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let SweepOrder::Shuffled { seed } = sweep {
        let mut rng = PortableRng::substream(*seed, pass as u64);
        rng.shuffle(&mut order);
    }
    order
}

fn run_sweeps<F: Real, S: SiteComputation<F>>(
    config: &RunConfig<F>,
    prior: &BlockMoment<F>,
    sites: &S,
    assignment: Option<Vec<usize>>,
    eval: &EvalContext<'_, F>,
) -> Result<RunTrace<F>> {
    let n = sites.n_sites();
    let counts: Option<Vec<usize>> = assignment.as_ref().map(|a| {
        let k = a.iter().copied().max().map_or(0, |m| m + 1);
        let mut c = vec![0usize; k];
        for &id in a {
            c[id] += 1;
        }
        c
    });
    let mut state = match config.algorithm {
        Algorithm::Ep => ApproxState::new_ep(prior, n)?,
        Algorithm::Adf => ApproxState::new_adf(prior)?,
        Algorithm::Sep | Algorithm::LatentSep | Algorithm::ParallelSep => {
            ApproxState::new_sep(prior, n)?
        }
        Algorithm::Dsep => {
            ApproxState::new_dsep(prior, counts.clone().expect("dsep assigns partitions"))?
        }
    };

    let started = Instant::now();
    let wall = |on: bool| {
        if on {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };

    let chunk = if config.algorithm == Algorithm::ParallelSep {
        config.minibatch
    } else {
        1
    };
    let mut rows = vec![trace_row(
        0,
        &state,
        eval,
        F::zero(),
        wall(config.record_walltime),
    )];
    let mut updates: u64 = 0;
    let mut applied: u64 = 0;
    let mut skipped: u64 = 0;
    let mut last_recorded: u64 = 0;
    let mut iter: u64 = 0;
    let mut last_delta = F::zero();
    let mut passes_completed = 0usize;
    let mut converged = false;

    for pass in 0..config.passes {
        let anchor = pass_anchor(&state);
        let order = sweep_order(n, pass, &config.sweep);
        for batch in order.chunks(chunk) {
            let n_local = match config.algorithm {
                Algorithm::Dsep => {
                    let a = assignment.as_ref().expect("dsep assigns partitions");
                    counts.as_ref().expect("dsep counts partitions")[a[batch[0]]]
                }
                Algorithm::Adf => 1,
                _ => n,
            };
            let eps = config.damping.epsilon_at(updates, n_local);
            let outcome = match config.algorithm {
                Algorithm::Ep => ep_update(&mut state, batch[0], sites, eps)?,
                Algorithm::Adf => adf_update(&mut state, batch[0], sites)?,
                // The latent-variable update is the tied update with the
                // latent posteriors recomputed inside the tilted step.
                Algorithm::Sep | Algorithm::LatentSep => {
                    sep_update(&mut state, batch[0], sites, eps)?
                }
                Algorithm::ParallelSep => parallel_sep_update(&mut state, batch, sites, eps)?,
                Algorithm::Dsep => {
                    let point = batch[0];
                    let k = assignment.as_ref().expect("dsep assigns partitions")[point];
                    dsep_update(&mut state, k, point, sites, eps)?
                }
            };
            updates += 1;
            iter += 1;
            match &outcome {
                UpdateOutcome::Applied {
                    factor_delta,
                    skipped_sites,
                    ..
                } => {
                    applied += 1;
                    skipped += *skipped_sites as u64;
                    last_delta = *factor_delta;
                }
                UpdateOutcome::Skipped(_) => {
                    skipped += batch.len() as u64;
                    last_delta = F::zero();
                }
            }
            if iter % config.stride as u64 == 0 {
                rows.push(trace_row(
                    iter,
                    &state,
                    eval,
                    last_delta,
                    wall(config.record_walltime),
                ));
                last_recorded = iter;
            }
        }
        passes_completed = pass + 1;

        // Stored factorizations must keep reproducing q.
        if let Some(gap) = state.reconstruction_gap()? {
            let scale = F::one() + state.q_scale();
            assert!(
                gap <= F::of(1e-7) * scale,
                "stored factors drifted from q: gap {gap}"
            );
        }

        if pass_delta(&state, &anchor) < config.tol {
            converged = true;
            break;
        }
    }

    if last_recorded != iter {
        rows.push(trace_row(
            iter,
            &state,
            eval,
            last_delta,
            wall(config.record_walltime),
        ));
    }

    Ok(RunTrace {
        rows,
        updates,
        applied,
        skipped,
        passes_completed,
        converged,
        final_state: state,
    })
}

fn trace_row<F: Real>(
    iter: u64,
    state: &ApproxState<F>,
    eval: &EvalContext<'_, F>,
    factor_delta: F,
    wall_ms: f64,
) -> TraceRow<F> {
    let q_mom = state.q_moments().ok();
    let trace_cov = q_mom.as_ref().map(|m| m.trace_cov());
    let (kl, mean_fnorm, cov_fnorm) = match (eval.reference, &q_mom) {
        (Some(r), Some(q)) => {
            let kl = oracle::calibration_kl(r, q).ok();
            match oracle::fnorm_errors(r, q) {
                Ok((m, c)) => (kl, Some(m), Some(c)),
                Err(_) => (kl, None, None),
            }
        }
        _ => (None, None, None),
    };
    let (test_ll, test_err) = match (eval.test, &q_mom) {
        (Some(t), Some(q)) if q.n_blocks() == 1 => match oracle::test_metrics(q.block(0), t) {
            Ok(m) => (Some(m.mean_log_lik), Some(m.error_rate)),
            Err(_) => (None, None),
        },
        _ => (None, None),
    };
    TraceRow {
        iter,
        kl,
        mean_fnorm,
        cov_fnorm,
        test_ll,
        test_err,
        factor_delta,
        trace_cov,
        wall_ms,
        moments: q_mom,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mog, gen_probit, split, InputDist, MogGenConfig, ProbitGenConfig};
    use crate::inference::{DampingSchedule, FactorStore};

    fn probit_data(n: usize, d: usize, seed: u64) -> Dataset<f64> {
        gen_probit(&ProbitGenConfig {
            n,
            d,
            inputs: InputDist::Gaussian,
            gamma: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn repeated_runs_are_identical() {
        let data = probit_data(30, 2, 11);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Sep);
        cfg.passes = 5;
        cfg.stride = 3;
        cfg.sweep = SweepOrder::Shuffled { seed: 7 };
        let model = ModelSpec::Probit { gamma: 1.0 };
        let a = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        let b = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        assert_eq!(a, b, "identical configs must reproduce bit-identical traces");
    }

    #[test]
    fn full_ep_converges_on_a_small_problem() {
        let data = probit_data(40, 2, 3);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Ep);
        cfg.passes = 60;
        cfg.tol = 1e-8;
        cfg.damping = DampingSchedule::Fixed { epsilon0: 0.5 };
        let model = ModelSpec::Probit { gamma: 1.0 };
        let trace = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        assert!(trace.converged, "EP should converge on an easy problem");
        assert!(trace.passes_completed < 60);
        assert_eq!(trace.skipped, 0);
        assert!(!trace.all_skipped());
        let q = trace.final_state.q_moments().unwrap();
        assert_eq!(q.n_blocks(), 1);
        assert!(q.block(0).mean().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stride_records_endpoints() {
        let data = probit_data(10, 2, 1);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Sep);
        cfg.passes = 2;
        cfg.stride = 7;
        cfg.tol = 1e-300;
        let model = ModelSpec::Probit { gamma: 1.0 };
        let trace = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        let iters: Vec<u64> = trace.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 7, 14, 20]);
        assert_eq!(trace.updates, 20);
    }

    #[test]
    fn zero_passes_records_the_prior_state() {
        let data = probit_data(10, 2, 1);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Ep);
        cfg.passes = 0;
        let model = ModelSpec::Probit { gamma: 1.0 };
        let trace = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].iter, 0);
        assert_eq!(trace.updates, 0);
        assert!(!trace.converged);
        assert!(!trace.all_skipped());
        // Prior state: trace of gamma * I in 2 dimensions.
        assert_eq!(trace.rows[0].trace_cov, Some(2.0));
    }

    #[test]
    fn model_algorithm_mismatches_are_rejected() {
        let probit = probit_data(10, 2, 1);
        let mog_data = gen_mog(&MogGenConfig {
            n: 10,
            d: 2,
            components: 2,
            sigma: 0.5,
            center: vec![0.0, 0.0],
            seed: 2,
        })
        .unwrap();
        let mog_model = ModelSpec::Mog(
            MoGModel::new(
                2,
                0.5,
                GaussianMoment::new(Array1::zeros(2), Array2::eye(2)).unwrap(),
            )
            .unwrap(),
        );

        let mut cfg = RunConfig::<f64>::for_algorithm(Algorithm::LatentSep);
        cfg.passes = 1;
        assert!(matches!(
            run(&cfg, &ModelSpec::Probit { gamma: 1.0 }, &probit, &EvalContext::default()),
            Err(Error::ConfigInvalid(_))
        ));

        let mut cfg = RunConfig::<f64>::for_algorithm(Algorithm::Sep);
        cfg.alpha = 2.0;
        cfg.passes = 1;
        assert!(matches!(
            run(&cfg, &mog_model, &mog_data, &EvalContext::default()),
            Err(Error::ConfigInvalid(_))
        ));

        let cfg = RunConfig::<f64>::for_algorithm(Algorithm::Sep);
        assert!(matches!(
            run(&cfg, &ModelSpec::Probit { gamma: 1.0 }, &mog_data, &EvalContext::default()),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn reference_and_test_columns_populate() {
        let data = probit_data(60, 2, 9);
        let (train, test) = split(&data, 0.25, 4).unwrap();
        let reference = BlockMoment::single(
            GaussianMoment::new(Array1::zeros(2), Array2::eye(2)).unwrap(),
        );
        let mut cfg = RunConfig::for_algorithm(Algorithm::Sep);
        cfg.passes = 3;
        cfg.stride = 15;
        let eval = EvalContext {
            reference: Some(&reference),
            test: Some(&test),
        };
        let trace = run(&cfg, &ModelSpec::Probit { gamma: 1.0 }, &train, &eval).unwrap();
        let last = trace.rows.last().unwrap();
        let kl = last.kl.expect("reference given, kl expected");
        assert!(kl.is_finite() && kl >= 0.0);
        assert!(last.mean_fnorm.unwrap() >= 0.0);
        assert!(last.cov_fnorm.unwrap() >= 0.0);
        let ll = last.test_ll.expect("test set given, log-lik expected");
        assert!(ll < 0.0, "log-likelihood of binary outcomes is negative");
        let err = last.test_err.unwrap();
        assert!((0.0..=1.0).contains(&err));
        // The prior row carries the same columns.
        let first = trace.rows.first().unwrap();
        assert!(first.kl.unwrap().is_finite());
        assert!(first.test_ll.unwrap().is_finite());
    }

    #[test]
    fn mixture_run_shrinks_posterior_uncertainty() {
        let data = gen_mog(&MogGenConfig {
            n: 40,
            d: 2,
            components: 2,
            sigma: 0.5,
            center: vec![0.0, 0.0],
            seed: 21,
        })
        .unwrap();
        let model = MoGModel::new(
            2,
            0.5,
            GaussianMoment::new(Array1::zeros(2), Array2::eye(2) * 4.0).unwrap(),
        )
        .unwrap();
        let mut cfg = RunConfig::for_algorithm(Algorithm::LatentSep);
        cfg.passes = 20;
        let trace = run(&cfg, &ModelSpec::Mog(model), &data, &EvalContext::default()).unwrap();
        let first = trace.rows.first().unwrap().trace_cov.unwrap();
        let last = trace.rows.last().unwrap().trace_cov.unwrap();
        assert!(
            last < first / 2.0,
            "posterior variance should shrink substantially: {first} -> {last}"
        );
        let q = trace.final_state.q_moments().unwrap();
        assert_eq!(q.n_blocks(), 2);
    }

    #[test]
    fn minibatch_pass_covers_all_sites() {
        let data = probit_data(10, 2, 5);
        let mut cfg = RunConfig::for_algorithm(Algorithm::ParallelSep);
        cfg.minibatch = 3;
        cfg.passes = 2;
        cfg.tol = 1e-300;
        let trace = run(&cfg, &ModelSpec::Probit { gamma: 1.0 }, &data, &EvalContext::default())
            .unwrap();
        // ceil(10 / 3) = 4 minibatch updates per pass.
        assert_eq!(trace.updates, 8);
        assert_eq!(trace.skipped, 0);
    }

    #[test]
    fn partitioned_run_completes_with_partition_damping() {
        let data = probit_data(30, 2, 13);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Dsep);
        cfg.partitions = 3;
        cfg.passes = 10;
        let trace = run(&cfg, &ModelSpec::Probit { gamma: 1.0 }, &data, &EvalContext::default())
            .unwrap();
        assert_eq!(trace.updates, trace.applied);
        assert!(trace.final_state.q_moments().is_ok());
        match trace.final_state.factors() {
            FactorStore::Partitioned { factors, counts } => {
                assert_eq!(factors.len(), 3);
                assert_eq!(counts.iter().sum::<usize>(), 30);
            }
            other => panic!("expected partitioned factors, got {other:?}"),
        }
    }

    #[test]
    fn wall_time_recording_is_opt_in() {
        let data = probit_data(15, 2, 17);
        let mut cfg = RunConfig::for_algorithm(Algorithm::Sep);
        cfg.passes = 2;
        let model = ModelSpec::Probit { gamma: 1.0 };
        let silent = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        assert!(silent.rows.iter().all(|r| r.wall_ms == 0.0));

        cfg.record_walltime = true;
        let timed = run(&cfg, &model, &data, &EvalContext::default()).unwrap();
        assert!(timed.rows.last().unwrap().wall_ms > 0.0);
        let times: Vec<f64> = timed.rows.iter().map(|r| r.wall_ms).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}
