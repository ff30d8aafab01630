//! Ground-truth posterior oracles and evaluation metrics.
//!
//! Two independent routes to the exact posterior moments make calibration
//! claims checkable: a random-walk Metropolis sampler (any dimension, slow)
//! and deterministic grid integration (up to two dimensions, exact up to
//! discretization). Both produce [`GaussianMoment`] summaries comparable to
//! an approximation's `q` through [`calibration_kl`] and [`fnorm_errors`].
//! Predictive quality on held-out data goes through [`test_metrics`].

use ndarray::{Array1, Array2};

use crate::data::{Dataset, Truth};
use crate::expfam::{kl_gaussian, BlockMoment, GaussianMoment};
use crate::likelihoods::MoGModel;
use crate::linalg::{symmetrize, Cholesky};
use crate::rng::PortableRng;
use crate::special::{ln_norm_cdf, LN_SQRT_2PI};
use crate::{Error, Real, Result};

/// Chain substream tags start here so they cannot collide with the data
/// generator's tags under a shared seed.
const TAG_CHAIN_BASE: u64 = 0x100;

/// Log of the unnormalized probit posterior over the weight vector:
/// `ln N(theta; 0, gamma I) + sum_n ln Phi(y_n x_n' theta)`.
pub fn probit_log_posterior<'a, F: Real>(
    data: &'a Dataset<F>,
    gamma: F,
) -> Result<impl Fn(&Array1<F>) -> F + 'a> {
    if !(gamma > F::zero()) || !gamma.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "prior variance gamma must be positive and finite, got {gamma}"
        )));
    }
    let labels = data
        .labels()
        .ok_or_else(|| Error::ConfigInvalid("probit posterior needs labeled data".into()))?;
    let d = F::of(data.dim() as f64);
    let half = F::of(0.5);
    let ln_prior_norm = d * (F::of(2.0 * std::f64::consts::PI).ln() + gamma.ln()) * half;
    Ok(move |theta: &Array1<F>| {
        debug_assert_eq!(theta.len(), data.dim());
        let mut lp = -theta.dot(theta) / (F::of(2.0) * gamma) - ln_prior_norm;
        for (row, &y) in data.inputs().rows().into_iter().zip(labels) {
            lp += F::of(ln_norm_cdf((F::of(y as f64) * row.dot(theta)).as_f64()));
        }
        lp
    })
}

/// Log of the unnormalized posterior over stacked mixture means
/// `theta = (theta_1, ..., theta_J)`:
/// `sum_j ln N(theta_j; m_j, V0) + sum_n ln sum_j pi_j N(x_n; theta_j, sigma^2 I)`,
/// with the per-block prior means `m_j` taken from
/// [`MoGModel::prior_blocks`].
pub fn mog_means_log_posterior<'a, F: Real>(
    data: &'a Dataset<F>,
    model: &'a MoGModel<F>,
) -> Result<impl Fn(&Array1<F>) -> F + 'a> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data dimension {} but mixture expects {}",
            data.dim(),
            model.dim()
        )));
    }
    let d = model.dim();
    let j = model.n_components();
    let prior = model.prior_blocks();
    let prior_ch = Cholesky::decompose(model.mean_prior().cov()).ok_or_else(|| {
        Error::NotNormalizable("mixture mean prior covariance is not positive definite".into())
    })?;
    let half = F::of(0.5);
    let ln_prior_norm = F::of(d as f64) * F::of(LN_SQRT_2PI) + half * prior_ch.ln_det();
    let sigma2 = model.sigma() * model.sigma();
    let ln_like_norm = F::of(d as f64) * (F::of(LN_SQRT_2PI) + half * sigma2.ln());
    let log_mix = model.mix().log_weights().clone();
    Ok(move |theta: &Array1<F>| {
        debug_assert_eq!(theta.len(), j * d);
        let mut lp = F::zero();
        for b in 0..j {
            let block = theta.slice(ndarray::s![b * d..(b + 1) * d]).to_owned();
            let diff = &block - prior.block(b).mean();
            lp -= half * diff.dot(&prior_ch.solve(&diff)) + ln_prior_norm;
        }
        for x in data.inputs().rows() {
            let mut best = F::neg_infinity();
            let mut terms = Vec::with_capacity(j);
            for b in 0..j {
                let block = theta.slice(ndarray::s![b * d..(b + 1) * d]);
                let sq = x
                    .iter()
                    .zip(block.iter())
                    .fold(F::zero(), |acc, (&xi, &ti)| acc + (xi - ti) * (xi - ti));
                let t = log_mix[b] - half * sq / sigma2 - ln_like_norm;
                if t > best {
                    best = t;
                }
                terms.push(t);
            }
            let sum = terms
                .iter()
                .fold(F::zero(), |acc, &t| acc + (t - best).exp());
            lp += best + sum.ln();
        }
        lp
    })
}

/// Random-walk Metropolis settings.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct McmcConfig {
    /// Retained draws per chain, after burn-in.
    pub steps: usize,
    /// Discarded adaptation draws per chain.
    pub burn_in: usize,
    /// Initial isotropic proposal standard deviation; adapted during
    /// burn-in toward a 25% acceptance rate.
    pub proposal_scale: f64,
    pub seed: u64,
    pub chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            burn_in: 2000,
            proposal_scale: 0.2,
            seed: 0,
            chains: 4,
        }
    }
}

impl McmcConfig {
    fn validate(&self) -> Result<()> {
        if self.steps < 10 {
            return Err(Error::ConfigInvalid(format!(
                "need at least 10 retained draws per chain, got {}",
                self.steps
            )));
        }
        if self.chains == 0 {
            return Err(Error::ConfigInvalid("need at least one chain".into()));
        }
        if !(self.proposal_scale > 0.0) || !self.proposal_scale.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "proposal scale must be positive and finite, got {}",
                self.proposal_scale
            )));
        }
        Ok(())
    }
}

/// Health summary of a sampling run.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct McmcDiagnostics {
    /// Post burn-in acceptance rate, averaged over chains.
    pub acceptance_rate: f64,
    /// Largest split potential-scale-reduction factor across dimensions;
    /// NaN when fewer than two chains were run.
    pub split_rhat: f64,
    /// Pooled retained draws.
    pub n_samples: usize,
}

struct ChainRun<F> {
    samples: Vec<Array1<F>>,
    acceptance: f64,
}

fn metropolis_chain<F: Real>(
    log_post: &impl Fn(&Array1<F>) -> F,
    init: &Array1<F>,
    cfg: &McmcConfig,
    rng: &mut PortableRng,
) -> Result<ChainRun<F>> {
    let d = init.len();
    let mut current = init.clone();
    let mut lp = log_post(&current);
    if !lp.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "chain initialized at zero posterior density (log density {lp})"
        )));
    }
    let mut scale = cfg.proposal_scale;
    let mut samples = Vec::with_capacity(cfg.steps);
    let mut accepted_after_burn = 0usize;
    let mut window_accepts = 0usize;
    const ADAPT_WINDOW: usize = 50;

    let total = cfg.burn_in + cfg.steps;
    for step in 0..total {
        let mut proposal = current.clone();
        for v in proposal.iter_mut() {
            *v += F::of(scale) * F::of(rng.normal());
        }
        let lp_new = log_post(&proposal);
        let accept = lp_new.is_finite()
            && (lp_new >= lp || F::of(rng.uniform().ln()) < lp_new - lp);
        if accept {
            current = proposal;
            lp = lp_new;
        }
        if step < cfg.burn_in {
            window_accepts += accept as usize;
            if (step + 1) % ADAPT_WINDOW == 0 {
                let rate = window_accepts as f64 / ADAPT_WINDOW as f64;
                scale = (scale * (rate - 0.25).exp()).clamp(1e-6, 1e3);
                window_accepts = 0;
            }
        } else {
            accepted_after_burn += accept as usize;
            samples.push(current.clone());
        }
    }
    let acceptance = accepted_after_burn as f64 / cfg.steps as f64;
    if accepted_after_burn == 0 {
        return Err(Error::ChainDiverged(format!(
            "chain never moved after burn-in (proposal scale {scale}, dim {d})"
        )));
    }
    Ok(ChainRun {
        samples,
        acceptance,
    })
}

/// Largest split potential-scale-reduction factor across dimensions. Each
/// chain is halved, so `2 * chains` sequences enter the standard
/// between/within variance ratio.
fn split_rhat<F: Real>(chains: &[ChainRun<F>], dim: usize) -> f64 {
    if chains.len() < 2 || chains[0].samples.len() < 4 {
        return f64::NAN;
    }
    let half = chains[0].samples.len() / 2;
    let mut worst = f64::NEG_INFINITY;
    for d in 0..dim {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for chain in chains {
            for part in [&chain.samples[..half], &chain.samples[half..2 * half]] {
                let vals: Vec<f64> = part.iter().map(|s| s[d].as_f64()).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                means.push(mean);
                vars.push(var);
            }
        }
        let m = means.len() as f64;
        let n = half as f64;
        let w = vars.iter().sum::<f64>() / m;
        let grand = means.iter().sum::<f64>() / m;
        let b = n * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m - 1.0);
        let var_plus = (n - 1.0) / n * w + b / n;
        let rhat = if w > 0.0 { (var_plus / w).sqrt() } else { f64::NAN };
        if rhat > worst || rhat.is_nan() {
            worst = rhat;
        }
        if worst.is_nan() {
            break;
        }
    }
    worst
}

/// Gaussian fit to posterior samples from several independent chains,
/// pooled after per-chain convergence checks.
///
/// Chains start from `init` (zeros when absent) plus a proposal-scale
/// jitter so that agreement between them is informative. For multimodal
/// posteriors pass an `init` near the mode of interest, otherwise chains
/// may split across modes and the pooled fit is meaningless (a large
/// `split_rhat` flags this).
pub fn mcmc_reference<F: Real>(
    log_post: impl Fn(&Array1<F>) -> F,
    dim: usize,
    init: Option<&Array1<F>>,
    cfg: &McmcConfig,
) -> Result<(GaussianMoment<F>, McmcDiagnostics)> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::ConfigInvalid("dimension must be positive".into()));
    }
    let base = match init {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "init has length {}, expected {dim}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => Array1::zeros(dim),
    };
    let mut chains = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        let mut rng = PortableRng::substream(cfg.seed, TAG_CHAIN_BASE + c as u64);
        let mut start = base.clone();
        for v in start.iter_mut() {
            *v += F::of(cfg.proposal_scale) * F::of(rng.normal());
        }
        // Fall back to the exact init when the jittered start has no density.
        if !log_post(&start).is_finite() {
            start = base.clone();
        }
        chains.push(metropolis_chain(&log_post, &start, cfg, &mut rng)?);
    }

    let rhat = split_rhat(&chains, dim);
    if rhat > 1.1 {
        log::warn!("chains disagree: split R-hat {rhat:.3} > 1.1; treat the reference with suspicion");
    }
    let acceptance_rate =
        chains.iter().map(|c| c.acceptance).sum::<f64>() / cfg.chains as f64;

    let n_samples: usize = chains.iter().map(|c| c.samples.len()).sum();
    let mut pooled = Array2::zeros((n_samples, dim));
    let mut row = 0;
    for chain in &chains {
        for s in &chain.samples {
            pooled.row_mut(row).assign(s);
            row += 1;
        }
    }
    let moments = fit_gaussian(&pooled)?;
    Ok((
        moments,
        McmcDiagnostics {
            acceptance_rate,
            split_rhat: rhat,
            n_samples,
        },
    ))
}

/// Sampling reference for the probit posterior, initialized at the
/// generating weights when the dataset carries them.
pub fn probit_mcmc_reference<F: Real>(
    data: &Dataset<F>,
    gamma: F,
    cfg: &McmcConfig,
) -> Result<(BlockMoment<F>, McmcDiagnostics)> {
    let log_post = probit_log_posterior(data, gamma)?;
    let init = match data.truth() {
        Some(Truth::Probit { theta }) => Some(theta.clone()),
        _ => None,
    };
    let (moments, diag) = mcmc_reference(log_post, data.dim(), init.as_ref(), cfg)?;
    Ok((BlockMoment::single(moments), diag))
}

/// Sampling reference for the mixture-means posterior, one moment block per
/// component. Chains are initialized at `init` means when given, else at
/// the generating means when the dataset carries them; with neither, all
/// chains start at the prior mean and the posterior symmetry makes the
/// result unreliable (watch `split_rhat`).
pub fn mog_mcmc_reference<F: Real>(
    data: &Dataset<F>,
    model: &MoGModel<F>,
    init: Option<&BlockMoment<F>>,
    cfg: &McmcConfig,
) -> Result<(BlockMoment<F>, McmcDiagnostics)> {
    let d = model.dim();
    let j = model.n_components();
    let stacked_init: Option<Array1<F>> = match init {
        Some(blocks) => {
            if blocks.block_dims() != model.block_dims() {
                return Err(Error::DimensionMismatch(
                    "init blocks do not match the mixture's block structure".into(),
                ));
            }
            let mut v = Array1::zeros(j * d);
            for (b, block) in blocks.blocks().iter().enumerate() {
                v.slice_mut(ndarray::s![b * d..(b + 1) * d])
                    .assign(block.mean());
            }
            Some(v)
        }
        None => match data.truth() {
            Some(Truth::Mog { means, .. })
                if means.len() == j && means.iter().all(|m| m.len() == d) =>
            {
                let mut v = Array1::zeros(j * d);
                for (b, m) in means.iter().enumerate() {
                    v.slice_mut(ndarray::s![b * d..(b + 1) * d]).assign(m);
                }
                Some(v)
            }
            _ => None,
        },
    };
    let log_post = mog_means_log_posterior(data, model)?;
    let (stacked, diag) = mcmc_reference(log_post, j * d, stacked_init.as_ref(), cfg)?;
    // The approximating family is block-diagonal over components, so the
    // reference keeps per-component marginals and drops cross-component
    // correlations.
    let blocks = BlockMoment::from_stacked(&stacked, &model.block_dims())?;
    Ok((blocks, diag))
}

/// Mean and unbiased covariance of sample rows as a Gaussian.
pub fn fit_gaussian<F: Real>(samples: &Array2<F>) -> Result<GaussianMoment<F>> {
    let (n, d) = samples.dim();
    if n < d + 2 {
        return Err(Error::DegenerateInput(format!(
            "{n} samples cannot determine a {d}-dimensional Gaussian"
        )));
    }
    let nf = F::of(n as f64);
    let mean = samples.sum_axis(ndarray::Axis(0)) / nf;
    let centered = samples - &mean.clone().insert_axis(ndarray::Axis(0));
    let mut cov = centered.t().dot(&centered) / (nf - F::one());
    symmetrize(&mut cov);
    GaussianMoment::new(mean, cov).map_err(|_| {
        Error::DegenerateInput("sample covariance is singular; samples may be degenerate".into())
    })
}

/// Deterministic integration grid: one inclusive range per dimension.
#[derive(Clone, Debug)]
pub struct GridSpec<F> {
    lo: Vec<F>,
    hi: Vec<F>,
    points: Vec<usize>,
}

impl<F: Real> GridSpec<F> {
    const MAX_TOTAL_POINTS: usize = 10_000_000;

    pub fn new(lo: Vec<F>, hi: Vec<F>, points: Vec<usize>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > 2 {
            return Err(Error::ConfigInvalid(format!(
                "grid integration supports 1 or 2 dimensions, got {d}"
            )));
        }
        if hi.len() != d || points.len() != d {
            return Err(Error::ConfigInvalid(
                "grid lo, hi, and points must have equal lengths".into(),
            ));
        }
        for i in 0..d {
            if !(lo[i] < hi[i]) || !lo[i].is_finite() || !hi[i].is_finite() {
                return Err(Error::ConfigInvalid(format!(
                    "grid range [{}, {}] in dimension {i} is invalid",
                    lo[i], hi[i]
                )));
            }
            if points[i] < 3 {
                return Err(Error::ConfigInvalid(
                    "grids need at least 3 points per dimension".into(),
                ));
            }
        }
        let total: usize = points.iter().product();
        if total > Self::MAX_TOTAL_POINTS {
            return Err(Error::ConfigInvalid(format!(
                "grid has {total} points, limit is {}",
                Self::MAX_TOTAL_POINTS
            )));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn total(&self) -> usize {
        self.points.iter().product()
    }

    fn coord(&self, flat: usize, theta: &mut Array1<F>) -> (F, bool) {
        let mut rest = flat;
        let mut weight = F::one();
        let mut boundary = false;
        for i in (0..self.dim()).rev() {
            let p = self.points[i];
            let t = rest % p;
            rest /= p;
            let h = (self.hi[i] - self.lo[i]) / F::of((p - 1) as f64);
            theta[i] = self.lo[i] + h * F::of(t as f64);
            let edge = t == 0 || t == p - 1;
            boundary |= edge;
            weight *= if edge { h * F::of(0.5) } else { h };
        }
        (weight, boundary)
    }
}

/// Grid-integrated posterior summary.
#[derive(Clone, Debug)]
pub struct GridResult<F> {
    pub moments: GaussianMoment<F>,
    /// Log normalizing constant of the unnormalized density.
    pub log_z: F,
    /// Probability mass sitting on the outermost grid shell; small values
    /// certify that the domain captured the posterior.
    pub boundary_mass: F,
}

/// Trapezoid-rule posterior moments over a tensor grid. Errors with
/// `GridTooCoarse` when more than 1e-6 of the mass touches the boundary,
/// meaning the stated domain clipped the posterior.
pub fn grid_posterior_moments<F: Real>(
    log_post: impl Fn(&Array1<F>) -> F,
    grid: &GridSpec<F>,
) -> Result<GridResult<F>> {
    const BOUNDARY_TOL: f64 = 1e-6;
    let d = grid.dim();
    let total = grid.total();
    let mut theta = Array1::zeros(d);

    let mut log_terms = Vec::with_capacity(total);
    let mut max_term = F::neg_infinity();
    for flat in 0..total {
        let (w, _) = grid.coord(flat, &mut theta);
        let t = log_post(&theta) + w.ln();
        if t > max_term {
            max_term = t;
        }
        log_terms.push(t);
    }
    if !max_term.is_finite() {
        return Err(Error::GridTooCoarse(
            "posterior density vanishes on the entire grid".into(),
        ));
    }

    let mut z = F::zero();
    let mut boundary = F::zero();
    let mut mean = Array1::<F>::zeros(d);
    for flat in 0..total {
        let m = (log_terms[flat] - max_term).exp();
        let (_, edge) = grid.coord(flat, &mut theta);
        z += m;
        if edge {
            boundary += m;
        }
        mean.scaled_add(m, &theta);
    }
    mean /= z;
    let boundary_mass = boundary / z;
    if boundary_mass > F::of(BOUNDARY_TOL) {
        return Err(Error::GridTooCoarse(format!(
            "{} of the posterior mass lies on the grid boundary; widen the domain or refine it",
            boundary_mass
        )));
    }

    let mut cov = Array2::<F>::zeros((d, d));
    for flat in 0..total {
        let m = (log_terms[flat] - max_term).exp();
        grid.coord(flat, &mut theta);
        let diff = &theta - &mean;
        for a in 0..d {
            for b in 0..d {
                cov[[a, b]] += m * diff[a] * diff[b];
            }
        }
    }
    cov /= z;
    symmetrize(&mut cov);

    let moments = GaussianMoment::new(mean, cov)
        .map_err(|_| Error::GridTooCoarse("grid covariance is not positive definite".into()))?;
    Ok(GridResult {
        moments,
        log_z: max_term + z.ln(),
        boundary_mass,
    })
}

/// Calibration divergence `KL(reference || q)` summed over blocks. The
/// inclusive direction punishes approximations that underestimate posterior
/// spread, which is exactly the failure mode filtering exhibits.
pub fn calibration_kl<F: Real>(reference: &BlockMoment<F>, q: &BlockMoment<F>) -> Result<F> {
    if reference.block_dims() != q.block_dims() {
        return Err(Error::DimensionMismatch(format!(
            "reference blocks {:?} but approximation blocks {:?}",
            reference.block_dims(),
            q.block_dims()
        )));
    }
    let mut total = F::zero();
    for (r, a) in reference.blocks().iter().zip(q.blocks()) {
        total += kl_gaussian(r, a)?;
    }
    Ok(total)
}

/// Parameter-space errors: Euclidean distance between means and Frobenius
/// distance between covariances, each averaged over blocks.
pub fn fnorm_errors<F: Real>(
    reference: &BlockMoment<F>,
    q: &BlockMoment<F>,
) -> Result<(F, F)> {
    if reference.block_dims() != q.block_dims() {
        return Err(Error::DimensionMismatch(format!(
            "reference blocks {:?} but approximation blocks {:?}",
            reference.block_dims(),
            q.block_dims()
        )));
    }
    let mut mean_err = F::zero();
    let mut cov_err = F::zero();
    for (r, a) in reference.blocks().iter().zip(q.blocks()) {
        let dm = r.mean() - a.mean();
        mean_err += dm.dot(&dm).sqrt();
        let dc = r.cov() - a.cov();
        cov_err += dc.iter().fold(F::zero(), |s, &v| s + v * v).sqrt();
    }
    let nb = F::of(reference.n_blocks() as f64);
    Ok((mean_err / nb, cov_err / nb))
}

/// Held-out predictive quality of a probit posterior approximation.
#[derive(Clone, Copy, Debug)]
pub struct TestMetrics<F> {
    /// Mean log predictive probability of the true labels.
    pub mean_log_lik: F,
    /// Fraction of points whose most probable label is wrong.
    pub error_rate: F,
}

/// Probit predictive metrics under `q`: each point contributes
/// `ln Phi(y x' mu / sqrt(x' Sigma x + 1))`, and the prediction is the
/// label with predictive probability at least one half.
pub fn test_metrics<F: Real>(q: &GaussianMoment<F>, test: &Dataset<F>) -> Result<TestMetrics<F>> {
    if test.n() == 0 {
        return Err(Error::EmptyTestSet);
    }
    let labels = test
        .labels()
        .ok_or_else(|| Error::ConfigInvalid("test metrics need labeled data".into()))?;
    if test.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "test inputs have dimension {}, approximation has {}",
            test.dim(),
            q.dim()
        )));
    }
    let mut ll = F::zero();
    let mut errors = 0usize;
    for (x, &y) in test.inputs().rows().into_iter().zip(labels) {
        let sx = q.cov().dot(&x);
        let s = (x.dot(&sx) + F::one()).sqrt();
        let z = x.dot(q.mean()) / s;
        ll += F::of(ln_norm_cdf((F::of(y as f64) * z).as_f64()));
        let predicted: i8 = if z >= F::zero() { 1 } else { -1 };
        errors += (predicted != y) as usize;
    }
    let n = F::of(test.n() as f64);
    Ok(TestMetrics {
        mean_log_lik: ll / n,
        error_rate: F::of(errors as f64) / n,
    })
}

/// Greedy alignment of same-shaped blocks: `perm[i]` is the index of the
/// `q` block assigned to reference block `i`, chosen by smallest mean
/// distance among the still-unassigned blocks. Use before block-wise
/// comparisons when component identities may have permuted (mixture label
/// switching).
pub fn match_blocks_greedy<F: Real>(
    reference: &BlockMoment<F>,
    q: &BlockMoment<F>,
) -> Result<Vec<usize>> {
    let dims = reference.block_dims();
    if q.block_dims() != dims {
        return Err(Error::DimensionMismatch(
            "block structures differ, nothing to match".into(),
        ));
    }
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::ConfigInvalid(
            "block matching needs same-dimensional blocks".into(),
        ));
    }
    let nb = dims.len();
    let mut perm = vec![usize::MAX; nb];
    let mut taken = vec![false; nb];
    for i in 0..nb {
        let r = reference.block(i);
        let mut best = usize::MAX;
        let mut best_dist = F::infinity();
        for (j, candidate) in q.blocks().iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dm = r.mean() - candidate.mean();
            let dist = dm.dot(&dm);
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        perm[i] = best;
        taken[best] = true;
    }
    Ok(perm)
}

/// Reorders blocks so that block `i` of the result is block `perm[i]` of
/// the input.
pub fn permute_blocks<F: Real>(q: &BlockMoment<F>, perm: &[usize]) -> Result<BlockMoment<F>> {
    if perm.len() != q.n_blocks() {
        return Err(Error::DimensionMismatch(format!(
            "permutation has length {}, expected {}",
            perm.len(),
            q.n_blocks()
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::ConfigInvalid(format!(
                "{perm:?} is not a permutation"
            )));
        }
        seen[p] = true;
    }
    BlockMoment::from_blocks(perm.iter().map(|&p| q.block(p).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_probit, InputDist, ProbitGenConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn gaussian_fit_of_coordinate_cross() {
        let samples = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let fit = fit_gaussian(&samples).unwrap();
        assert_abs_diff_eq!(fit.mean()[0], 0.0);
        assert_abs_diff_eq!(fit.mean()[1], 0.0);
        let two_thirds = 2.0 / 3.0;
        assert_abs_diff_eq!(fit.cov()[[0, 0]], two_thirds, epsilon = 1e-15);
        assert_abs_diff_eq!(fit.cov()[[1, 1]], two_thirds, epsilon = 1e-15);
        assert_abs_diff_eq!(fit.cov()[[0, 1]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_fit_rejects_degenerate_samples() {
        let few = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            fit_gaussian(&few),
            Err(Error::DegenerateInput(_))
        ));
        let flat = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(matches!(
            fit_gaussian(&flat),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn probit_log_posterior_at_origin() {
        let data = Dataset::new(
            array![[1.0], [-1.0]],
            Some(vec![1, -1]),
            None,
            None,
        )
        .unwrap();
        let lp = probit_log_posterior(&data, 1.0).unwrap();
        // Prior normalizer plus two factors of ln(1/2).
        assert_abs_diff_eq!(
            lp(&array![0.0]),
            -2.3052328943245634,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mog_log_posterior_matches_hand_computation() {
        let data = Dataset::new(array![[0.5], [-0.8]], None, None, None).unwrap();
        let prior = GaussianMoment::new(array![0.0], array![[1.0]]).unwrap();
        let model = MoGModel::new(2, 0.5, prior).unwrap();
        let lp = mog_means_log_posterior(&data, &model).unwrap();
        // Hand evaluation of the two prior terms (with the per-block prior
        // means from MoGModel::prior_blocks) plus the two mixture terms.
        assert_abs_diff_eq!(
            lp(&array![-1.0, 1.0]),
            -5.198814271920459,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampler_recovers_a_standard_gaussian() {
        let cfg = McmcConfig {
            steps: 8000,
            burn_in: 2000,
            proposal_scale: 0.5,
            seed: 7,
            chains: 4,
        };
        let (fit, diag) =
            mcmc_reference(|t: &Array1<f64>| -0.5 * t.dot(t), 2, None, &cfg).unwrap();
        assert_eq!(diag.n_samples, 32000);
        assert!(
            diag.acceptance_rate > 0.1 && diag.acceptance_rate < 0.6,
            "adaptation missed: {}",
            diag.acceptance_rate
        );
        assert!(diag.split_rhat < 1.1, "chains disagree: {}", diag.split_rhat);
        for d in 0..2 {
            assert!(fit.mean()[d].abs() < 0.1, "mean {:?}", fit.mean());
            assert!((fit.cov()[[d, d]] - 1.0).abs() < 0.15, "cov {:?}", fit.cov());
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let cfg = McmcConfig {
            steps: 500,
            burn_in: 100,
            proposal_scale: 0.5,
            seed: 3,
            chains: 2,
        };
        let f = |t: &Array1<f64>| -0.5 * t.dot(t);
        let (a, _) = mcmc_reference(f, 2, None, &cfg).unwrap();
        let (b, _) = mcmc_reference(f, 2, None, &cfg).unwrap();
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.cov(), b.cov());
    }

    #[test]
    fn sampler_failure_modes() {
        let cfg = McmcConfig {
            steps: 100,
            burn_in: 50,
            proposal_scale: 0.5,
            seed: 1,
            chains: 1,
        };
        // No density anywhere: the chain cannot start.
        assert!(matches!(
            mcmc_reference(|_: &Array1<f64>| f64::NEG_INFINITY, 2, None, &cfg),
            Err(Error::DegenerateInput(_))
        ));
        // Density only at the exact starting point: the chain cannot move.
        let spike = |t: &Array1<f64>| {
            if t.iter().all(|&v| v == 0.0) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        };
        assert!(matches!(
            mcmc_reference(spike, 2, None, &cfg),
            Err(Error::ChainDiverged(_))
        ));
    }

    #[test]
    fn probit_reference_lands_near_the_grid_answer() {
        let data = gen_probit::<f64>(&ProbitGenConfig {
            n: 50,
            d: 1,
            inputs: InputDist::Gaussian,
            gamma: 1.0,
            seed: 19,
        })
        .unwrap();
        let cfg = McmcConfig {
            steps: 6000,
            burn_in: 2000,
            proposal_scale: 0.4,
            seed: 11,
            chains: 4,
        };
        let (mcmc, diag) = probit_mcmc_reference(&data, 1.0, &cfg).unwrap();
        assert!(diag.split_rhat < 1.05);

        let lp = probit_log_posterior(&data, 1.0).unwrap();
        let grid = GridSpec::new(vec![-4.0], vec![4.0], vec![1201]).unwrap();
        let exact = grid_posterior_moments(lp, &grid).unwrap();

        let m = mcmc.block(0);
        let sd = exact.moments.cov()[[0, 0]].sqrt();
        assert!(
            (m.mean()[0] - exact.moments.mean()[0]).abs() < 0.1 * sd,
            "sampler mean {} vs grid {}",
            m.mean()[0],
            exact.moments.mean()[0]
        );
        assert!(
            (m.cov()[[0, 0]] - exact.moments.cov()[[0, 0]]).abs()
                < 0.1 * exact.moments.cov()[[0, 0]],
            "sampler var {} vs grid {}",
            m.cov()[[0, 0]],
            exact.moments.cov()[[0, 0]]
        );
    }

    #[test]
    fn grid_integrates_a_standard_gaussian_exactly() {
        let lp = |t: &Array1<f64>| -0.5 * t.dot(t) - LN_SQRT_2PI;
        let grid = GridSpec::new(vec![-8.0], vec![8.0], vec![401]).unwrap();
        let r = grid_posterior_moments(lp, &grid).unwrap();
        assert!(r.moments.mean()[0].abs() < 1e-10);
        assert_abs_diff_eq!(r.moments.cov()[[0, 0]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.log_z, 0.0, epsilon = 1e-8);
        assert!(r.boundary_mass < 1e-10);
    }

    #[test]
    fn grid_integrates_a_correlated_gaussian() {
        // Precision [[2, -1], [-1, 2]], so covariance (1/3) [[2, 1], [1, 2]].
        let lp = |t: &Array1<f64>| {
            -0.5 * (2.0 * t[0] * t[0] - 2.0 * t[0] * t[1] + 2.0 * t[1] * t[1])
        };
        let grid = GridSpec::new(vec![-6.0, -6.0], vec![6.0, 6.0], vec![241, 241]).unwrap();
        let r = grid_posterior_moments(lp, &grid).unwrap();
        assert!(r.moments.mean()[0].abs() < 1e-9);
        assert_abs_diff_eq!(r.moments.cov()[[0, 0]], 2.0 / 3.0, epsilon = 1e-5);
        assert_abs_diff_eq!(r.moments.cov()[[0, 1]], 1.0 / 3.0, epsilon = 1e-5);
        // Normalizer of the unnormalized density: 2 pi / sqrt(det Lambda).
        assert_abs_diff_eq!(r.log_z, 1.2885709220752906, epsilon = 1e-6);
    }

    #[test]
    fn grid_rejects_clipped_domains() {
        let lp = |t: &Array1<f64>| -0.5 * t.dot(t);
        let grid = GridSpec::new(vec![-1.0], vec![1.0], vec![101]).unwrap();
        assert!(matches!(
            grid_posterior_moments(lp, &grid),
            Err(Error::GridTooCoarse(_))
        ));
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::new(vec![-1.0; 3], vec![1.0; 3], vec![10; 3]).is_err());
        assert!(GridSpec::new(vec![1.0], vec![-1.0], vec![10]).is_err());
        assert!(GridSpec::new(vec![-1.0], vec![1.0], vec![2]).is_err());
        assert!(GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![4000, 4000]).is_err());
        assert!(GridSpec::new(vec![-1.0], vec![1.0, 2.0], vec![10]).is_err());
    }

    #[test]
    fn calibration_metrics_agree_with_block_structure() {
        let a = BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![0.0], array![[1.0]]).unwrap(),
            GaussianMoment::new(array![1.0], array![[2.0]]).unwrap(),
        ])
        .unwrap();
        assert_abs_diff_eq!(calibration_kl(&a, &a).unwrap(), 0.0);
        let (me, ce) = fnorm_errors(&a, &a).unwrap();
        assert_abs_diff_eq!(me, 0.0);
        assert_abs_diff_eq!(ce, 0.0);

        let b = BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![3.0], array![[1.0]]).unwrap(),
            GaussianMoment::new(array![1.0], array![[2.0]]).unwrap(),
        ])
        .unwrap();
        // Only the first block differs: mean error 3, averaged over 2 blocks.
        let (me, ce) = fnorm_errors(&a, &b).unwrap();
        assert_abs_diff_eq!(me, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ce, 0.0, epsilon = 1e-15);
        // KL(N(0,1) || N(3,1)) = 4.5.
        assert_abs_diff_eq!(calibration_kl(&a, &b).unwrap(), 4.5, epsilon = 1e-12);

        let single = BlockMoment::single(GaussianMoment::new(array![0.0], array![[1.0]]).unwrap());
        assert!(calibration_kl(&a, &single).is_err());
    }

    #[test]
    fn predictive_metrics_on_a_hand_case() {
        let test = Dataset::new(array![[1.0], [-1.0]], Some(vec![1, -1]), None, None).unwrap();
        let q = GaussianMoment::new(array![1.0], array![[1.0]]).unwrap();
        let m = test_metrics(&q, &test).unwrap();
        // Both points contribute ln Phi(1/sqrt(2)) and both are classified
        // correctly.
        assert_abs_diff_eq!(m.mean_log_lik, -0.27410803278438573, epsilon = 1e-12);
        assert_abs_diff_eq!(m.error_rate, 0.0);

        let unlabeled = Dataset::new(array![[1.0]], None, None, None).unwrap();
        assert!(test_metrics(&q, &unlabeled).is_err());
    }

    #[test]
    fn block_matching_undoes_a_swap() {
        let reference = BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![0.0, 0.0], Array2::eye(2)).unwrap(),
            GaussianMoment::new(array![4.0, 4.0], Array2::eye(2)).unwrap(),
        ])
        .unwrap();
        let swapped = BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![3.9, 4.1], Array2::eye(2)).unwrap(),
            GaussianMoment::new(array![0.1, -0.1], Array2::eye(2)).unwrap(),
        ])
        .unwrap();
        let perm = match_blocks_greedy(&reference, &swapped).unwrap();
        assert_eq!(perm, vec![1, 0]);
        let aligned = permute_blocks(&swapped, &perm).unwrap();
        assert!(aligned.block(0).mean()[0] < 1.0);
        assert!(aligned.block(1).mean()[0] > 3.0);

        assert!(permute_blocks(&swapped, &[0, 0]).is_err());
        assert!(permute_blocks(&swapped, &[0]).is_err());
    }
}
