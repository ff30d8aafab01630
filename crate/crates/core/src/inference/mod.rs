//! The update-rule family and its shared approximation state.
//!
//! Every algorithm here maintains a global Gaussian approximation
//! `q(theta) ~ p0(theta) * (stored factors)` and improves it by cycling
//! through likelihood sites: form a cavity by removing a factor's
//! contribution from `q`, moment-match the tilted density (delegated to
//! [`likelihoods`](crate::likelihoods)), and include the refreshed factor
//! back. The algorithms differ only in what they store:
//!
//! - [`ep_update`]: one factor per site (memory linear in the data size);
//! - [`adf_update`]: no factors at all, each site is absorbed once into `q`
//!   (a single pass is filtering; further passes double-count);
//! - [`sep_update`]: one tied factor representing the average site, so
//!   `q ~ p0 f^N`. The tied factor is never stored: it is recomputed as
//!   `f = (q / p0)^(1/N)` from the current `q`, which keeps the memory
//!   footprint independent of the data size;
//! - [`parallel_sep_update`]: the minibatch form of the tied update, where
//!   `M` site updates are computed against one shared cavity and combined as
//!   `f_new = f^(1 - M eps) * prod_m f_m^eps`;
//! - [`dsep_update`]: `K` stored factors, one per data partition, with
//!   `q ~ p0 * prod_k f_k^(N_k)`. `K = 1` recovers the tied update and
//!   `K = N` recovers full per-site storage;
//! - [`latent_sep_update`]: the tied update against a latent-variable model,
//!   where per-observation latent posteriors (mixture responsibilities) are
//!   recomputed on demand and returned to the caller instead of being
//!   stored.
//!
//! Updates that hit a numerical wall (cavity not normalizable, tilted
//! moments rejected, projection failed) are skipped, leaving the state
//! untouched and reporting [`UpdateOutcome::Skipped`]; genuine misuse
//! (wrong algorithm mode, bad configuration, shape mismatch) is an error.

mod run;

pub use run::{run, EvalContext, ModelSpec, RunTrace, TraceRow};

use serde::{Deserialize, Serialize};

use crate::expfam::{BlockMoment, BlockNatural, CategoricalDist};
use crate::likelihoods::{MogSites, SiteComputation};
use crate::{Error, Real, Result};

/// What the approximation stores besides `q` and the prior.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorStore<F> {
    /// One factor per site.
    Sites(Vec<BlockNatural<F>>),
    /// Nothing: assumed-density filtering.
    Filtering,
    /// One tied factor applied `n_sites` times, kept implicitly inside `q`.
    Tied { n_sites: usize },
    /// One factor per partition, applied `counts[k]` times each.
    Partitioned {
        factors: Vec<BlockNatural<F>>,
        counts: Vec<usize>,
    },
}

impl<F: Real> FactorStore<F> {
    /// Scalar parameters stored by the factorization itself (the integer
    /// bookkeeping of `Tied`/`Partitioned` is not a learned parameter).
    pub fn parameter_count(&self) -> usize {
        match self {
            FactorStore::Sites(v) => v.iter().map(|f| f.parameter_count()).sum(),
            FactorStore::Filtering | FactorStore::Tied { .. } => 0,
            FactorStore::Partitioned { factors, .. } => {
                factors.iter().map(|f| f.parameter_count()).sum()
            }
        }
    }
}

/// Global approximation state: prior, current `q`, and stored factors, all
/// in natural parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxState<F> {
    prior: BlockNatural<F>,
    q: BlockNatural<F>,
    factors: FactorStore<F>,
}

impl<F: Real> ApproxState<F> {
    fn from_prior(prior: &BlockMoment<F>, factors: FactorStore<F>) -> Result<Self> {
        let prior = prior.to_natural()?;
        Ok(Self {
            q: prior.clone(),
            prior,
            factors,
        })
    }

    /// Per-site factors, all initialized to the unit factor, so `q` starts
    /// at the prior.
    pub fn new_ep(prior: &BlockMoment<F>, n_sites: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::ConfigInvalid("need at least one site".into()));
        }
        let dims: Vec<usize> = prior.block_dims();
        let sites = vec![BlockNatural::unit_of(&dims); n_sites];
        Self::from_prior(prior, FactorStore::Sites(sites))
    }

    /// Filtering state: just `q`.
    pub fn new_adf(prior: &BlockMoment<F>) -> Result<Self> {
        Self::from_prior(prior, FactorStore::Filtering)
    }

    /// Tied-factor state for `n_sites` sites.
    pub fn new_sep(prior: &BlockMoment<F>, n_sites: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::ConfigInvalid("need at least one site".into()));
        }
        Self::from_prior(prior, FactorStore::Tied { n_sites })
    }

    /// Partitioned state; `counts[k]` is the number of sites in partition
    /// `k`, and each partition factor starts at the unit factor.
    pub fn new_dsep(prior: &BlockMoment<F>, counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.iter().sum::<usize>() == 0 {
            return Err(Error::ConfigInvalid("partitions cover no sites".into()));
        }
        let dims = prior.block_dims();
        let factors = vec![BlockNatural::unit_of(&dims); counts.len()];
        Self::from_prior(prior, FactorStore::Partitioned { factors, counts })
    }

    pub fn q(&self) -> &BlockNatural<F> {
        &self.q
    }

    pub fn q_moments(&self) -> Result<BlockMoment<F>> {
        self.q.to_moments()
    }

    pub fn prior(&self) -> &BlockNatural<F> {
        &self.prior
    }

    pub fn factors(&self) -> &FactorStore<F> {
        &self.factors
    }

    /// Total stored scalar parameters: prior, `q`, and factors.
    pub fn parameter_count(&self) -> usize {
        self.prior.parameter_count() + self.q.parameter_count() + self.factors.parameter_count()
    }

    /// The implicit tied site factor `f = (q / p0)^(1/N)`.
    pub fn tied_factor(&self) -> Result<BlockNatural<F>> {
        let FactorStore::Tied { n_sites } = &self.factors else {
            return Err(Error::ConfigInvalid(
                "tied factor requested from a non-tied state".into(),
            ));
        };
        Ok(self
            .q
            .divide(&self.prior)?
            .power(F::one() / F::of(*n_sites as f64)))
    }

    /// Largest absolute difference between `q` and the product of prior and
    /// stored factors; `None` when the factorization is implicit. Used as a
    /// consistency assertion by the sweep driver.
    pub fn reconstruction_gap(&self) -> Result<Option<F>> {
        let product = match &self.factors {
            FactorStore::Sites(sites) => {
                let mut acc = self.prior.clone();
                for s in sites {
                    acc = acc.multiply(s)?;
                }
                acc
            }
            FactorStore::Partitioned { factors, counts } => {
                let mut acc = self.prior.clone();
                for (f, &c) in factors.iter().zip(counts) {
                    acc = acc.multiply(&f.power(F::of(c as f64)))?;
                }
                acc
            }
            FactorStore::Filtering | FactorStore::Tied { .. } => return Ok(None),
        };
        Ok(Some(product.max_abs_diff(&self.q)))
    }

    /// Largest absolute natural parameter of `q`, the scale used for
    /// relative consistency thresholds.
    pub fn q_scale(&self) -> F {
        let dims = self.q.block_dims();
        self.q.max_abs_diff(&BlockNatural::unit_of(&dims))
    }
}

/// Why an update left the state untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    /// Removing the factor left a cavity that is not a distribution.
    CavityNotNormalizable,
    /// The tilted-moment computation failed numerically.
    TiltedFailed,
    /// The matched moments could not be converted back to natural form.
    ProjectionFailed,
}

/// Result of one update operation.
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome<F> {
    Applied {
        /// Largest absolute natural-parameter change of the updated factor
        /// (of `q` itself for filtering).
        factor_delta: F,
        /// Sites of a minibatch that failed and were excluded; always zero
        /// for single-site updates.
        skipped_sites: usize,
        /// Latent responsibilities of the visited site, when the model has
        /// them. Recomputed per visit, never stored.
        responsibilities: Option<CategoricalDist<F>>,
    },
    Skipped(SkipReason),
}

impl<F> UpdateOutcome<F> {
    pub fn is_applied(&self) -> bool {
        matches!(self, UpdateOutcome::Applied { .. })
    }
}

fn check_eps<F: Real>(eps: F) -> Result<()> {
    if !(eps > F::zero()) || eps > F::one() {
        return Err(Error::ConfigInvalid(format!(
            "update weight eps must be in (0, 1], got {eps}"
        )));
    }
    Ok(())
}

/// Converts numerical failures into skips while letting misuse errors
/// (bad config, shape mismatch) propagate.
macro_rules! attempt {
    ($expr:expr, $reason:expr) => {
        match $expr {
            Ok(v) => v,
            Err(e @ Error::ConfigInvalid(_)) => return Err(e),
            Err(e @ Error::DimensionMismatch(_)) => return Err(e),
            Err(_) => return Ok(UpdateOutcome::Skipped($reason)),
        }
    };
}

/// Full per-site update: remove site `n`'s stored factor, moment-match the
/// tilted density, and include the damped refreshed factor.
pub fn ep_update<F: Real, S: SiteComputation<F>>(
    state: &mut ApproxState<F>,
    n: usize,
    sites: &S,
    eps: F,
) -> Result<UpdateOutcome<F>> {
    check_eps(eps)?;
    let old_site = match &state.factors {
        FactorStore::Sites(stored) => {
            if n >= stored.len() {
                return Err(Error::DimensionMismatch(format!(
                    "site index {n} out of range for {} stored factors",
                    stored.len()
                )));
            }
            stored[n].clone()
        }
        _ => {
            return Err(Error::ConfigInvalid(
                "per-site update requires per-site factor storage".into(),
            ))
        }
    };
    let cavity = state.q.divide(&old_site)?;
    let cavity_m = attempt!(cavity.to_moments(), SkipReason::CavityNotNormalizable);
    let tilt = attempt!(sites.tilted(&cavity_m, n), SkipReason::TiltedFailed);
    let tilt_nat = attempt!(tilt.moments.to_natural(), SkipReason::ProjectionFailed);
    let refreshed = tilt_nat.divide(&cavity)?;
    let new_site = old_site.blend(&refreshed, eps)?;
    let q_new = cavity.multiply(&new_site)?;

    let factor_delta = new_site.max_abs_diff(&old_site);
    match &mut state.factors {
        FactorStore::Sites(stored) => stored[n] = new_site,
        _ => unreachable!("mode checked above"),
    }
    state.q = q_new;
    Ok(UpdateOutcome::Applied {
        factor_delta,
        skipped_sites: 0,
        responsibilities: tilt.responsibilities,
    })
}

/// Filtering update: absorb site `n` into `q` directly (the cavity is `q`
/// itself, nothing is ever removed).
pub fn adf_update<F: Real, S: SiteComputation<F>>(
    state: &mut ApproxState<F>,
    n: usize,
    sites: &S,
) -> Result<UpdateOutcome<F>> {
    if !matches!(state.factors, FactorStore::Filtering) {
        return Err(Error::ConfigInvalid(
            "filtering update requires a filtering state".into(),
        ));
    }
    let cavity_m = attempt!(state.q.to_moments(), SkipReason::CavityNotNormalizable);
    let tilt = attempt!(sites.tilted(&cavity_m, n), SkipReason::TiltedFailed);
    let q_new = attempt!(tilt.moments.to_natural(), SkipReason::ProjectionFailed);
    let factor_delta = q_new.max_abs_diff(&state.q);
    state.q = q_new;
    Ok(UpdateOutcome::Applied {
        factor_delta,
        skipped_sites: 0,
        responsibilities: tilt.responsibilities,
    })
}

/// Tied-factor update: the implicit average-site factor is removed once,
/// refreshed against site `n`, and blended back with weight `eps` (the
/// natural choice being `1/N`).
pub fn sep_update<F: Real, S: SiteComputation<F>>(
    state: &mut ApproxState<F>,
    n: usize,
    sites: &S,
    eps: F,
) -> Result<UpdateOutcome<F>> {
    check_eps(eps)?;
    let n_sites = match &state.factors {
        FactorStore::Tied { n_sites } => *n_sites,
        _ => {
            return Err(Error::ConfigInvalid(
                "tied update requires a tied-factor state".into(),
            ))
        }
    };
    if n >= sites.n_sites() {
        return Err(Error::DimensionMismatch(format!(
            "site index {n} out of range for {} sites",
            sites.n_sites()
        )));
    }
    let f = state.tied_factor()?;
    let cavity = state.q.divide(&f)?;
    let cavity_m = attempt!(cavity.to_moments(), SkipReason::CavityNotNormalizable);
    let tilt = attempt!(sites.tilted(&cavity_m, n), SkipReason::TiltedFailed);
    let tilt_nat = attempt!(tilt.moments.to_natural(), SkipReason::ProjectionFailed);
    let f_n = tilt_nat.divide(&cavity)?;
    let f_new = f.blend(&f_n, eps)?;
    let q_new = state.prior.multiply(&f_new.power(F::of(n_sites as f64)))?;

    // At the natural weight eps = 1/N the inclusion must reproduce the
    // projected tilted distribution itself.
    #[cfg(debug_assertions)]
    {
        let natural = (eps * F::of(n_sites as f64) - F::one()).abs() < F::of(1e-9);
        if natural {
            let gap = q_new.max_abs_diff(&tilt_nat);
            let scale = F::one() + state.q_scale();
            debug_assert!(
                gap <= F::of(1e-10) * scale,
                "tied inclusion at eps = 1/N drifted from the projection: {gap}"
            );
        }
    }

    let factor_delta = f_new.max_abs_diff(&f);
    state.q = q_new;
    Ok(UpdateOutcome::Applied {
        factor_delta,
        skipped_sites: 0,
        responsibilities: tilt.responsibilities,
    })
}

/// Minibatch tied update: all site refreshes in `batch` are computed
/// against the same cavity and combined as
/// `f_new = f^(1 - S eps) * prod_m f_m^eps`, where `S` counts the sites
/// that succeeded (failing sites are excluded and reported).
///
/// Duplicate indices are allowed and simply contribute twice.
pub fn parallel_sep_update<F: Real, S: SiteComputation<F>>(
    state: &mut ApproxState<F>,
    batch: &[usize],
    sites: &S,
    eps: F,
) -> Result<UpdateOutcome<F>> {
    check_eps(eps)?;
    let n_sites = match &state.factors {
        FactorStore::Tied { n_sites } => *n_sites,
        _ => {
            return Err(Error::ConfigInvalid(
                "tied update requires a tied-factor state".into(),
            ))
        }
    };
    if batch.is_empty() {
        return Err(Error::ConfigInvalid("minibatch is empty".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&m| m >= sites.n_sites()) {
        return Err(Error::DimensionMismatch(format!(
            "site index {bad} out of range for {} sites",
            sites.n_sites()
        )));
    }
    let mut ordered = batch.to_vec();
    ordered.sort_unstable();

    let f = state.tied_factor()?;
    let cavity = state.q.divide(&f)?;
    let cavity_m = attempt!(cavity.to_moments(), SkipReason::CavityNotNormalizable);

    let dims = cavity.block_dims();
    let mut product = BlockNatural::unit_of(&dims);
    let mut successes = 0usize;
    let mut skipped_sites = 0usize;
    let mut last_reason = SkipReason::TiltedFailed;
    for &m in &ordered {
        let tilt = match sites.tilted(&cavity_m, m) {
            Ok(t) => t,
            Err(e @ Error::ConfigInvalid(_)) => return Err(e),
            Err(e @ Error::DimensionMismatch(_)) => return Err(e),
            Err(_) => {
                skipped_sites += 1;
                last_reason = SkipReason::TiltedFailed;
                continue;
            }
        };
        let tilt_nat = match tilt.moments.to_natural() {
            Ok(t) => t,
            Err(_) => {
                skipped_sites += 1;
                last_reason = SkipReason::ProjectionFailed;
                continue;
            }
        };
        product = product.multiply(&tilt_nat.divide(&cavity)?)?;
        successes += 1;
    }
    if successes == 0 {
        return Ok(UpdateOutcome::Skipped(last_reason));
    }

    let keep = F::one() - eps * F::of(successes as f64);
    let f_new = f.power(keep).multiply(&product.power(eps))?;
    let q_new = state.prior.multiply(&f_new.power(F::of(n_sites as f64)))?;

    let factor_delta = f_new.max_abs_diff(&f);
    state.q = q_new;
    Ok(UpdateOutcome::Applied {
        factor_delta,
        skipped_sites,
        responsibilities: None,
    })
}

/// Partitioned update: site `n` of partition `k` refreshes that partition's
/// factor, which enters `q` with multiplicity `counts[k]`.
pub fn dsep_update<F: Real, S: SiteComputation<F>>(
    state: &mut ApproxState<F>,
    k: usize,
    n: usize,
    sites: &S,
    eps: F,
) -> Result<UpdateOutcome<F>> {
    check_eps(eps)?;
    let (old_factor, count) = match &state.factors {
        FactorStore::Partitioned { factors, counts } => {
            if k >= factors.len() {
                return Err(Error::DimensionMismatch(format!(
                    "partition index {k} out of range for {} partitions",
                    factors.len()
                )));
            }
            if counts[k] == 0 {
                return Err(Error::ConfigInvalid(format!("partition {k} is empty")));
            }
            (factors[k].clone(), counts[k])
        }
        _ => {
            return Err(Error::ConfigInvalid(
                "partitioned update requires a partitioned state".into(),
            ))
        }
    };
    if n >= sites.n_sites() {
        return Err(Error::DimensionMismatch(format!(
            "site index {n} out of range for {} sites",
            sites.n_sites()
        )));
    }
    let cavity = state.q.divide(&old_factor)?;
    let cavity_m = attempt!(cavity.to_moments(), SkipReason::CavityNotNormalizable);
    let tilt = attempt!(sites.tilted(&cavity_m, n), SkipReason::TiltedFailed);
    let tilt_nat = attempt!(tilt.moments.to_natural(), SkipReason::ProjectionFailed);
    let f_n = tilt_nat.divide(&cavity)?;
    let f_new = old_factor.blend(&f_n, eps)?;
    let count_f = F::of(count as f64);
    let q_new = state
        .q
        .divide(&old_factor.power(count_f))?
        .multiply(&f_new.power(count_f))?;

    let factor_delta = f_new.max_abs_diff(&old_factor);
    match &mut state.factors {
        FactorStore::Partitioned { factors, .. } => factors[k] = f_new,
        _ => unreachable!("mode checked above"),
    }
    state.q = q_new;
    Ok(UpdateOutcome::Applied {
        factor_delta,
        skipped_sites: 0,
        responsibilities: tilt.responsibilities,
    })
}

/// Tied update against a latent-variable (mixture) model.
///
/// Identical factor algebra to [`sep_update`]; the latent posteriors
/// (responsibilities `g_n`) are recomputed inside the tilted step and
/// returned in the outcome rather than stored, so memory stays independent
/// of the number of observations.
pub fn latent_sep_update<F: Real>(
    state: &mut ApproxState<F>,
    n: usize,
    sites: &MogSites<'_, F>,
    eps: F,
) -> Result<UpdateOutcome<F>> {
    sep_update(state, n, sites, eps)
}

/// How the update weight `eps` evolves over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DampingSchedule<F> {
    /// Constant weight.
    Fixed { epsilon0: F },
    /// `1 / N_local`, where `N_local` is the multiplicity of the factor
    /// being updated (data size for tied factors, partition size for
    /// partitioned ones); the natural inclusion weight.
    OneOverN,
    /// `epsilon0 * (tau / (tau + t))^kappa` on the global update counter
    /// `t`, with `kappa` in (1/2, 1] so the steps are square-summable but
    /// not summable.
    RobbinsMonro { epsilon0: F, tau: F, kappa: F },
}

impl<F: Real> DampingSchedule<F> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DampingSchedule::Fixed { epsilon0 } => {
                if !(epsilon0 > F::zero()) || epsilon0 > F::one() {
                    return Err(Error::ConfigInvalid(format!(
                        "fixed damping needs epsilon0 in (0, 1], got {epsilon0}"
                    )));
                }
            }
            DampingSchedule::OneOverN => {}
            DampingSchedule::RobbinsMonro {
                epsilon0,
                tau,
                kappa,
            } => {
                if !(epsilon0 > F::zero()) || epsilon0 > F::one() {
                    return Err(Error::ConfigInvalid(format!(
                        "robbins-monro damping needs epsilon0 in (0, 1], got {epsilon0}"
                    )));
                }
                if !(tau > F::zero()) || !tau.is_finite() {
                    return Err(Error::ConfigInvalid(format!(
                        "robbins-monro damping needs tau > 0, got {tau}"
                    )));
                }
                if !(kappa > F::of(0.5)) || kappa > F::one() {
                    return Err(Error::ConfigInvalid(format!(
                        "robbins-monro damping needs kappa in (1/2, 1], got {kappa}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Weight for global update step `t` on a factor of multiplicity
    /// `n_local`.
    pub fn epsilon_at(&self, t: u64, n_local: usize) -> F {
        match *self {
            DampingSchedule::Fixed { epsilon0 } => epsilon0,
            DampingSchedule::OneOverN => F::one() / F::of(n_local.max(1) as f64),
            DampingSchedule::RobbinsMonro {
                epsilon0,
                tau,
                kappa,
            } => epsilon0 * (tau / (tau + F::of(t as f64))).powf(kappa),
        }
    }
}

/// Which update rule a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ep,
    Adf,
    Sep,
    ParallelSep,
    Dsep,
    LatentSep,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ep => "ep",
            Algorithm::Adf => "adf",
            Algorithm::Sep => "sep",
            Algorithm::ParallelSep => "parallel-sep",
            Algorithm::Dsep => "dsep",
            Algorithm::LatentSep => "latent-sep",
        }
    }
}

/// Order in which sites are visited within a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SweepOrder {
    /// 0, 1, ..., N-1 every pass.
    Sequential,
    /// A fresh deterministic permutation per pass, derived from the seed
    /// and the pass index.
    Shuffled { seed: u64 },
}

/// Full specification of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig<F> {
    pub algorithm: Algorithm,
    /// Minibatch size for the parallel tied update.
    pub minibatch: usize,
    /// Partition count for the partitioned update.
    pub partitions: usize,
    /// Site power in the tilted step (1 selects closed forms).
    pub alpha: F,
    /// Maximum number of sweeps over the data.
    pub passes: usize,
    pub sweep: SweepOrder,
    /// Convergence threshold on the largest factor change over one pass.
    pub tol: F,
    pub damping: DampingSchedule<F>,
    /// Trace rows are recorded every `stride` updates (the initial and
    /// final states are always recorded).
    pub stride: usize,
    /// Record wall-clock milliseconds in the trace. Off by default so that
    /// repeated runs are bit-identical.
    pub record_walltime: bool,
}

impl<F: Real> RunConfig<F> {
    /// Defaults for the given algorithm: full passes budget of 100, tol
    /// 1e-4, sequential sweeps, stride 1, and the algorithm's natural
    /// damping (undamped for per-site storage, `1/N_local` for tied and
    /// partitioned factors).
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let damping = match algorithm {
            Algorithm::Ep | Algorithm::Adf => DampingSchedule::Fixed { epsilon0: F::one() },
            _ => DampingSchedule::OneOverN,
        };
        Self {
            algorithm,
            minibatch: 1,
            partitions: 1,
            alpha: F::one(),
            passes: 100,
            sweep: SweepOrder::Sequential,
            tol: F::of(1e-4),
            damping,
            stride: 1,
            record_walltime: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::ConfigInvalid("no data".into()));
        }
        if self.minibatch == 0 || self.minibatch > n {
            return Err(Error::ConfigInvalid(format!(
                "minibatch must be in 1..={n}, got {}",
                self.minibatch
            )));
        }
        if self.partitions == 0 || self.partitions > n {
            return Err(Error::ConfigInvalid(format!(
                "partitions must be in 1..={n}, got {}",
                self.partitions
            )));
        }
        if !(self.alpha > F::zero()) || !self.alpha.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.tol > F::zero()) {
            return Err(Error::ConfigInvalid(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.stride == 0 {
            return Err(Error::ConfigInvalid("stride must be positive".into()));
        }
        self.damping.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mog, gen_probit, InputDist, MogGenConfig, ProbitGenConfig};
    use crate::expfam::GaussianMoment;
    use crate::likelihoods::{MoGModel, ProbitSites};
    use ndarray::{Array1, Array2};

    fn probit_fixture(n: usize, d: usize) -> (crate::data::Dataset<f64>, BlockMoment<f64>) {
        let data = gen_probit(&ProbitGenConfig {
            n,
            d,
            inputs: InputDist::Gaussian,
            gamma: 1.0,
            seed: 42,
        })
        .unwrap();
        let prior = BlockMoment::single(
            GaussianMoment::new(Array1::zeros(d), Array2::eye(d)).unwrap(),
        );
        (data, prior)
    }

    #[test]
    fn tied_update_at_natural_weight_reproduces_projection() {
        let (data, prior) = probit_fixture(8, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut state = ApproxState::new_sep(&prior, 8).unwrap();

        // Expected projection, computed by hand from the same cavity.
        let f = state.tied_factor().unwrap();
        let cavity = state.q().divide(&f).unwrap();
        let tilt = sites.tilted(&cavity.to_moments().unwrap(), 0).unwrap();
        let expected = tilt.moments.to_natural().unwrap();

        let out = sep_update(&mut state, 0, &sites, 1.0 / 8.0).unwrap();
        assert!(out.is_applied());
        assert!(
            state.q().max_abs_diff(&expected) < 1e-12,
            "gap {}",
            state.q().max_abs_diff(&expected)
        );
    }

    #[test]
    fn minibatch_of_one_matches_tied_update_exactly() {
        let (data, prior) = probit_fixture(10, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut a = ApproxState::new_sep(&prior, 10).unwrap();
        let mut b = a.clone();
        for n in 0..10 {
            sep_update(&mut a, n, &sites, 0.1).unwrap();
            parallel_sep_update(&mut b, &[n], &sites, 0.1).unwrap();
        }
        assert_eq!(a.q(), b.q(), "single-site minibatch must match step for step");
    }

    #[test]
    fn minibatch_duplicates_count_twice() {
        let (data, prior) = probit_fixture(6, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut state = ApproxState::new_sep(&prior, 6).unwrap();
        let eps = 1.0 / 6.0;

        // Expected: f_new = f^(1 - 2 eps) * f_3^(2 eps) with f_3 computed once.
        let f = state.tied_factor().unwrap();
        let cavity = state.q().divide(&f).unwrap();
        let tilt = sites.tilted(&cavity.to_moments().unwrap(), 3).unwrap();
        let f3 = tilt.moments.to_natural().unwrap().divide(&cavity).unwrap();
        let f_new = f
            .power(1.0 - 2.0 * eps)
            .multiply(&f3.multiply(&f3).unwrap().power(eps))
            .unwrap();
        let expected = state
            .prior()
            .multiply(&f_new.power(6.0))
            .unwrap();

        parallel_sep_update(&mut state, &[3, 3], &sites, eps).unwrap();
        assert!(state.q().max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn one_partition_matches_tied_update() {
        let (data, prior) = probit_fixture(9, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut tied = ApproxState::new_sep(&prior, 9).unwrap();
        let mut part = ApproxState::new_dsep(&prior, vec![9]).unwrap();
        for n in 0..9 {
            sep_update(&mut tied, n, &sites, 1.0 / 9.0).unwrap();
            dsep_update(&mut part, 0, n, &sites, 1.0 / 9.0).unwrap();
        }
        assert!(
            tied.q().max_abs_diff(part.q()) < 1e-12,
            "gap {}",
            tied.q().max_abs_diff(part.q())
        );
    }

    #[test]
    fn one_partition_per_site_matches_full_ep() {
        let (data, prior) = probit_fixture(7, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut ep = ApproxState::new_ep(&prior, 7).unwrap();
        let mut part = ApproxState::new_dsep(&prior, vec![1; 7]).unwrap();
        for pass in 0..3 {
            let _ = pass;
            for n in 0..7 {
                ep_update(&mut ep, n, &sites, 1.0).unwrap();
                dsep_update(&mut part, n, n, &sites, 1.0).unwrap();
            }
        }
        assert_eq!(ep.q(), part.q(), "undamped partition-per-site is full EP");
    }

    #[test]
    fn filtering_first_pass_equals_undamped_ep_first_pass() {
        let (data, prior) = probit_fixture(12, 3);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut adf = ApproxState::new_adf(&prior).unwrap();
        let mut ep = ApproxState::new_ep(&prior, 12).unwrap();
        for n in 0..12 {
            adf_update(&mut adf, n, &sites).unwrap();
            ep_update(&mut ep, n, &sites, 1.0).unwrap();
        }
        // EP routes through a divide-then-multiply that the filtering path
        // does not, so agreement is to rounding, not bitwise.
        assert!(
            adf.q().max_abs_diff(ep.q()) < 1e-12,
            "fresh sites make the first passes identical, gap {}",
            adf.q().max_abs_diff(ep.q())
        );
    }

    #[test]
    fn numerical_failure_skips_without_mutating() {
        let (data, prior) = probit_fixture(4, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut state = ApproxState::new_ep(&prior, 4).unwrap();
        // Poison one stored site so removing it leaves an indefinite cavity.
        if let FactorStore::Sites(stored) = &mut state.factors {
            let huge = crate::expfam::GaussianNatural::new(
                Array1::zeros(2),
                Array2::eye(2) * 100.0,
            )
            .unwrap();
            stored[0] = BlockNatural::single(huge);
        }
        let before = state.clone();
        let out = ep_update(&mut state, 0, &sites, 1.0).unwrap();
        assert_eq!(
            out,
            UpdateOutcome::Skipped(SkipReason::CavityNotNormalizable)
        );
        assert_eq!(state, before, "skipped update must leave the state untouched");
    }

    #[test]
    fn mode_mismatch_is_an_error_not_a_skip() {
        let (data, prior) = probit_fixture(4, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut state = ApproxState::new_sep(&prior, 4).unwrap();
        assert!(matches!(
            ep_update(&mut state, 0, &sites, 1.0),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            sep_update(&mut state, 99, &sites, 0.25),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            sep_update(&mut state, 0, &sites, 0.0),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn latent_update_carries_responsibilities() {
        let data = gen_mog(&MogGenConfig {
            n: 20,
            d: 2,
            components: 2,
            sigma: 0.5,
            center: vec![0.0, 0.0],
            seed: 5,
        })
        .unwrap();
        let prior = GaussianMoment::<f64>::new(Array1::zeros(2), Array2::eye(2)).unwrap();
        let model = MoGModel::new(2, 0.5, prior).unwrap();
        let sites = crate::likelihoods::MogSites::new(data.inputs(), &model).unwrap();
        let mut latent = ApproxState::new_sep(&model.prior_blocks(), 20).unwrap();
        let mut tied = latent.clone();

        let out = latent_sep_update(&mut latent, 0, &sites, 1.0 / 20.0).unwrap();
        let UpdateOutcome::Applied {
            responsibilities, ..
        } = out
        else {
            panic!("expected applied update")
        };
        let g = responsibilities.expect("latent model yields responsibilities");
        assert_eq!(g.len(), 2);
        assert!((g.weights().sum() - 1.0).abs() < 1e-12);

        // Identical factor algebra to the plain tied update.
        sep_update(&mut tied, 0, &sites, 1.0 / 20.0).unwrap();
        assert_eq!(latent.q(), tied.q());
    }

    #[test]
    fn parameter_counts_match_storage_contracts() {
        let (_, prior) = probit_fixture(4, 2);
        let per_block = 2 * 2 + 2;
        let ep = ApproxState::new_ep(&prior, 50).unwrap();
        assert_eq!(ep.parameter_count(), (2 + 50) * per_block);
        let sep = ApproxState::new_sep(&prior, 50).unwrap();
        assert_eq!(sep.parameter_count(), 2 * per_block);
        let dsep = ApproxState::new_dsep(&prior, vec![10, 20, 20]).unwrap();
        assert_eq!(dsep.parameter_count(), (2 + 3) * per_block);
        let adf = ApproxState::new_adf(&prior).unwrap();
        assert_eq!(adf.parameter_count(), 2 * per_block);
    }

    #[test]
    fn reconstruction_gap_tracks_stored_factorizations() {
        let (data, prior) = probit_fixture(6, 2);
        let sites = ProbitSites::new(data.inputs(), data.labels().unwrap(), 1.0, 64).unwrap();
        let mut ep = ApproxState::new_ep(&prior, 6).unwrap();
        for n in 0..6 {
            ep_update(&mut ep, n, &sites, 0.7).unwrap();
        }
        let gap = ep.reconstruction_gap().unwrap().unwrap();
        assert!(gap < 1e-10, "factorization drifted: {gap}");

        let sep = ApproxState::new_sep(&prior, 6).unwrap();
        assert!(sep.reconstruction_gap().unwrap().is_none());
    }

    #[test]
    fn damping_schedules() {
        let fixed = DampingSchedule::Fixed { epsilon0: 0.3 };
        assert_eq!(fixed.epsilon_at(10, 99), 0.3);

        let natural = DampingSchedule::<f64>::OneOverN;
        assert_eq!(natural.epsilon_at(0, 20), 0.05);

        let rm = DampingSchedule::RobbinsMonro {
            epsilon0: 0.5,
            tau: 1.0,
            kappa: 1.0,
        };
        assert_eq!(rm.epsilon_at(0, 1), 0.5);
        assert_eq!(rm.epsilon_at(1, 1), 0.25);
        assert_eq!(rm.epsilon_at(3, 1), 0.125);

        // Square-summable but not summable over a long horizon.
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..1_000_000u64 {
            let e: f64 = rm.epsilon_at(t, 1);
            sum += e;
            sum_sq += e * e;
        }
        let bound = 0.25 * std::f64::consts::PI.powi(2) / 6.0;
        assert!(sum_sq < bound * 1.01, "sum of squares {sum_sq} vs {bound}");
        assert!(sum > 5.0, "steps vanished too fast: {sum}");

        for bad in [
            DampingSchedule::Fixed { epsilon0: 0.0 },
            DampingSchedule::Fixed { epsilon0: 1.5 },
            DampingSchedule::RobbinsMonro {
                epsilon0: 0.5,
                tau: 0.0,
                kappa: 1.0,
            },
            DampingSchedule::RobbinsMonro {
                epsilon0: 0.5,
                tau: 1.0,
                kappa: 0.5,
            },
            DampingSchedule::RobbinsMonro {
                epsilon0: 0.5,
                tau: 1.0,
                kappa: 1.2,
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn run_config_validation() {
        let mut cfg = RunConfig::<f64>::for_algorithm(Algorithm::Sep);
        assert!(cfg.validate(100).is_ok());
        cfg.minibatch = 0;
        assert!(cfg.validate(100).is_err());
        cfg.minibatch = 101;
        assert!(cfg.validate(100).is_err());
        cfg.minibatch = 1;
        cfg.partitions = 200;
        assert!(cfg.validate(100).is_err());
        cfg.partitions = 1;
        cfg.alpha = -1.0;
        assert!(cfg.validate(100).is_err());
        cfg.alpha = 1.0;
        cfg.stride = 0;
        assert!(cfg.validate(100).is_err());
    }
}
