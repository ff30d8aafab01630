//! Tilted-moment computations for the supported observation models.
//!
//! Every update rule in [`inference`](crate::inference) reduces to the same
//! step: given a cavity Gaussian `q_cav` and one likelihood term `l_n`, find
//! the mean and covariance of the tilted density
//! `p_tilt(theta) ~ q_cav(theta) * l_n(theta)^alpha` together with its log
//! normalizer. Matching those moments is exactly the KL projection of the
//! tilted density onto the Gaussian family, so this module is where all
//! model-specific mathematics lives; the update rules only do factor algebra
//! around it.
//!
//! Two site families are provided:
//!
//! - **Probit**: `l_n(theta) = Phi(y_n x_n^T theta)`. At `alpha = 1` the
//!   moments are closed-form. For general `alpha > 0` the tilt only depends
//!   on `theta` through the scalar `u = x_n^T theta`, so the moments follow
//!   from one-dimensional Gauss-Hermite quadrature on `u` plus the exact
//!   linear-Gaussian reconstitution of the full-dimensional moments.
//! - **Mixture of Gaussians**: the likelihood of one observation under an
//!   isotropic mixture with unknown component means. With a block-diagonal
//!   cavity over the per-component mean blocks, the tilted density is a
//!   mixture of products of Gaussians and its block moments are matched in
//!   closed form; the mixture responsibilities fall out as a byproduct.

use ndarray::{Array1, Array2};

use crate::expfam::{BlockMoment, CategoricalDist, GaussianMoment};
use crate::linalg::{self, Cholesky};
use crate::quadrature::GaussHermite;
use crate::rng::PortableRng;
use crate::special::{ln_norm_cdf, ln_norm_pdf, LN_SQRT_2PI};
use crate::{Error, Real, Result};

/// Cavity directions with less than this much variance are treated as
/// deterministic: the site cannot move them, so the tilt returns the cavity.
const DEGENERATE_DIRECTION_VAR: f64 = 1e-14;

/// Responsibilities are floored at this value (then renormalized) so that a
/// component is never frozen out by one extreme observation.
const RESPONSIBILITY_FLOOR: f64 = 1e-12;

/// One probit observation: feature vector `x` and label `y` in `{-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbitSite<F> {
    x: Array1<F>,
    y: i8,
}

impl<F: Real> ProbitSite<F> {
    pub fn new(x: Array1<F>, y: i8) -> Result<Self> {
        if y != 1 && y != -1 {
            return Err(Error::DegenerateInput(format!(
                "probit label must be -1 or +1, got {y}"
            )));
        }
        if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "probit features must be non-empty and finite".into(),
            ));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Array1<F> {
        &self.x
    }

    pub fn y(&self) -> i8 {
        self.y
    }
}

/// Moments and log normalizer of a tilted density.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedResult<F> {
    pub moments: GaussianMoment<F>,
    pub log_z: F,
}

fn check_probit_dims<F: Real>(cavity: &GaussianMoment<F>, site: &ProbitSite<F>) -> Result<()> {
    if cavity.dim() != site.x.len() {
        return Err(Error::DimensionMismatch(format!(
            "cavity has dimension {}, site has {}",
            cavity.dim(),
            site.x.len()
        )));
    }
    Ok(())
}

/// Closed-form tilted moments for a unit-power probit site.
///
/// With `s^2 = x^T Sigma x + 1` and `z = y x^T mu / s`,
/// the normalizer is `Phi(z)`, and with `rho = phi(z)/Phi(z)`:
///
/// ```text
/// mu'    = mu + (y rho / s) Sigma x
/// Sigma' = Sigma - (rho (z + rho) / s^2) (Sigma x)(Sigma x)^T
/// ```
///
/// Evaluated through the log-CDF so the result stays finite and accurate
/// far into the tail (|z| of 30 and beyond).
pub fn probit_tilted_moments<F: Real>(
    cavity: &GaussianMoment<F>,
    site: &ProbitSite<F>,
) -> Result<TiltedResult<F>> {
    check_probit_dims(cavity, site)?;
    let y = F::of(site.y as f64);
    let sx = cavity.cov().dot(&site.x);
    let s2 = site.x.dot(&sx) + F::one();
    let s = s2.sqrt();
    let z = (y * site.x.dot(cavity.mean()) / s).as_f64();

    let log_z = ln_norm_cdf(z);
    let rho = (ln_norm_pdf(z) - log_z).exp();
    let shrink = rho * (z + rho);

    let mean = cavity.mean() + &sx.mapv(|v| v * y * F::of(rho) / s);
    let coef = F::of(shrink) / s2;
    let mut cov = cavity.cov().clone();
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..d {
            let delta = coef * sx[i] * sx[j];
            cov[[i, j]] -= delta;
        }
    }
    linalg::symmetrize(&mut cov);
    Ok(TiltedResult {
        moments: GaussianMoment::new(mean, cov)?,
        log_z: F::of(log_z),
    })
}

/// Tilted moments for a probit site raised to a fractional power `alpha`,
/// via Gauss-Hermite quadrature on the projection `u = x^T theta`.
///
/// The tilt affects the cavity only along `x`: writing `m_u = x^T mu` and
/// `s_u^2 = x^T Sigma x`, the one-dimensional tilted marginal of `u` is
/// integrated numerically, and the full moments are reconstituted exactly:
///
/// ```text
/// mu'    = mu + (Sigma x) (E[u] - m_u) / s_u^2
/// Sigma' = Sigma + (Sigma x)(Sigma x)^T (Var[u] - s_u^2) / s_u^4
/// ```
///
/// When `s_u^2` is numerically zero the site has nothing to act on and the
/// cavity is returned unchanged with `log_z = alpha log Phi(y m_u)`.
pub fn tilted_moments_quadrature<F: Real>(
    cavity: &GaussianMoment<F>,
    site: &ProbitSite<F>,
    alpha: F,
    rule: &GaussHermite<F>,
) -> Result<TiltedResult<F>> {
    check_probit_dims(cavity, site)?;
    if !(alpha > F::zero()) || !alpha.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "site power alpha must be positive and finite, got {alpha}"
        )));
    }
    let yf = site.y as f64;
    let alpha64 = alpha.as_f64();
    let sx = cavity.cov().dot(&site.x);
    let m_u = site.x.dot(cavity.mean()).as_f64();
    let s2u = site.x.dot(&sx).as_f64();
    if s2u < DEGENERATE_DIRECTION_VAR {
        let log_z = alpha64 * ln_norm_cdf(yf * m_u);
        return Ok(TiltedResult {
            moments: cavity.clone(),
            log_z: F::of(log_z),
        });
    }

    // Nodes of integral over u ~ N(m_u, s2u) against exp(-t^2).
    let scale = (2.0 * s2u).sqrt();
    let n = rule.order();
    let mut us = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    let mut g_max = f64::NEG_INFINITY;
    for i in 0..n {
        let u = m_u + scale * rule.nodes()[i].as_f64();
        let g = alpha64 * ln_norm_cdf(yf * u);
        g_max = g_max.max(g);
        us.push(u);
        logs.push(g);
    }
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for i in 0..n {
        let we = rule.weights()[i].as_f64() * (logs[i] - g_max).exp();
        s0 += we;
        s1 += we * us[i];
    }
    let e_u = s1 / s0;
    // Second pass around the mean avoids the cancellation of E[u^2] - E[u]^2.
    let mut s2 = 0.0;
    for i in 0..n {
        let we = rule.weights()[i].as_f64() * (logs[i] - g_max).exp();
        let c = us[i] - e_u;
        s2 += we * c * c;
    }
    let var_u = s2 / s0;
    let log_z = g_max + (s0 / std::f64::consts::PI.sqrt()).ln();

    let mean_shift = F::of((e_u - m_u) / s2u);
    let cov_coef = F::of((var_u - s2u) / (s2u * s2u));
    let mean = cavity.mean() + &sx.mapv(|v| v * mean_shift);
    let mut cov = cavity.cov().clone();
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..d {
            let delta = cov_coef * sx[i] * sx[j];
            cov[[i, j]] += delta;
        }
    }
    linalg::symmetrize(&mut cov);
    Ok(TiltedResult {
        moments: GaussianMoment::new(mean, cov)?,
        log_z: F::of(log_z),
    })
}

/// Symmetry-breaking offset applied to each component's prior mean in
/// [`MoGModel::prior_blocks`], as a fraction of the prior standard deviation
/// per coordinate.
const PRIOR_JITTER: f64 = 0.05;
/// Fixed stream for the offsets, so every caller derives the same prior.
const PRIOR_JITTER_SEED: u64 = 1729;

/// Isotropic Gaussian mixture with unknown component means.
///
/// The observation density is
/// `p(x | mu_1..mu_J) = sum_j mix_j N(x; mu_j, sigma^2 I)`, with independent
/// Gaussian priors `N(prior_mean, prior_cov)` on each component mean.
#[derive(Clone, Debug)]
pub struct MoGModel<F> {
    n_components: usize,
    sigma: F,
    mean_prior: GaussianMoment<F>,
    mix: CategoricalDist<F>,
}

impl<F: Real> MoGModel<F> {
    /// Mixture with uniform component weights.
    pub fn new(n_components: usize, sigma: F, mean_prior: GaussianMoment<F>) -> Result<Self> {
        let uniform = CategoricalDist::new(Array1::zeros(n_components.max(1)))?.normalize()?;
        Self::with_mix(n_components, sigma, mean_prior, uniform)
    }

    pub fn with_mix(
        n_components: usize,
        sigma: F,
        mean_prior: GaussianMoment<F>,
        mix: CategoricalDist<F>,
    ) -> Result<Self> {
        if n_components < 2 {
            return Err(Error::ConfigInvalid(format!(
                "mixture needs at least 2 components, got {n_components}"
            )));
        }
        if !(sigma > F::zero()) || !sigma.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "mixture sigma must be positive and finite, got {sigma}"
            )));
        }
        if mix.len() != n_components {
            return Err(Error::DimensionMismatch(format!(
                "mixture has {n_components} components but {} weights",
                mix.len()
            )));
        }
        Ok(Self {
            n_components,
            sigma,
            mean_prior,
            mix: mix.normalize()?,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn sigma(&self) -> F {
        self.sigma
    }

    pub fn mean_prior(&self) -> &GaussianMoment<F> {
        &self.mean_prior
    }

    pub fn mix(&self) -> &CategoricalDist<F> {
        &self.mix
    }

    /// Ambient dimension of the observations and of each mean block.
    pub fn dim(&self) -> usize {
        self.mean_prior.dim()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        vec![self.dim(); self.n_components]
    }

    /// Prior over the stacked component means: one block per component.
    ///
    /// The block means carry small deterministic offsets. With
    /// bitwise-identical blocks, every update treats the components
    /// interchangeably and no run can ever tell them apart, so the labels
    /// never lock onto distinct clusters; the offsets give the updates an
    /// asymmetry to amplify. The offsets are a fixed function of the model,
    /// so inference and the reference posteriors see the same prior.
    pub fn prior_blocks(&self) -> BlockMoment<F> {
        let mut rng = PortableRng::new(PRIOR_JITTER_SEED);
        let blocks = (0..self.n_components)
            .map(|_| {
                let mut mean = self.mean_prior.mean().clone();
                for k in 0..mean.len() {
                    let sd = self.mean_prior.cov()[[k, k]].sqrt();
                    mean[k] = mean[k] + F::of(PRIOR_JITTER * rng.normal()) * sd;
                }
                GaussianMoment::new(mean, self.mean_prior.cov().clone())
                    .expect("covariance is unchanged")
            })
            .collect();
        BlockMoment::from_blocks(blocks).expect("n_components >= 2")
    }
}

/// Tilted update for one mixture observation against a block-diagonal cavity.
///
/// Returns the matched block moments, the log normalizer, and the (floored,
/// normalized) responsibilities. Writing `(m_j, V_j)` for the cavity block
/// of component `j`:
///
/// - responsibilities: `g_j ~ mix_j N(x; m_j, sigma^2 I + V_j)`;
/// - conditional blocks: precision `V_j^-1 + I/sigma^2`, precision-mean
///   `V_j^-1 m_j + x/sigma^2` (the conjugate single-observation update);
/// - matched block `l`: the mixture of "updated" (weight `g_l`) and
///   "untouched" (weight `1 - g_l`) moments, including the mean-spread term
///   in the covariance.
pub fn mog_tilted_blocks<F: Real>(
    cavity: &BlockMoment<F>,
    x: &Array1<F>,
    model: &MoGModel<F>,
) -> Result<(BlockMoment<F>, F, CategoricalDist<F>)> {
    let j_comp = model.n_components();
    let d = model.dim();
    if cavity.n_blocks() != j_comp || cavity.block_dims().iter().any(|&bd| bd != d) {
        return Err(Error::DimensionMismatch(format!(
            "cavity blocks {:?} do not match mixture with {j_comp} components of dimension {d}",
            cavity.block_dims()
        )));
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "observation has dimension {}, mixture expects {d}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("observation is not finite".into()));
    }

    let sigma2 = model.sigma() * model.sigma();
    let ln_2pi_d = F::of(2.0 * LN_SQRT_2PI) * F::from_usize(d).unwrap();
    let half = F::of(0.5);

    // Per-component marginal evidence ln N(x; m_j, sigma^2 I + V_j).
    let mut log_w = Array1::zeros(j_comp);
    for j in 0..j_comp {
        let block = cavity.block(j);
        let mut s = block.cov().clone();
        for i in 0..d {
            s[[i, i]] += sigma2;
        }
        let ch = Cholesky::decompose(&s).ok_or_else(|| {
            Error::NotNormalizable(format!("component {j} marginal covariance not PD"))
        })?;
        let diff = x - block.mean();
        let maha = diff.dot(&ch.solve(&diff));
        log_w[j] = model.mix().log_weights()[j] - half * (ln_2pi_d + ch.ln_det() + maha);
    }
    if log_w.iter().any(|v: &F| v.is_nan()) {
        return Err(Error::DegenerateInput(
            "responsibility computation produced NaN".into(),
        ));
    }
    let log_z = {
        let max = log_w.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum: F = log_w.iter().map(|&v| (v - max).exp()).sum();
        max + sum.ln()
    };

    // Floor and renormalize the responsibilities.
    let normalized = CategoricalDist::new(log_w)?.normalize()?;
    let floored = normalized
        .weights()
        .mapv(|w| w.max(F::of(RESPONSIBILITY_FLOOR)).ln());
    let resp = CategoricalDist::new(floored)?.normalize()?;
    let g = resp.weights();

    // Conditional (component active) block moments via the conjugate update.
    let mut matched = Vec::with_capacity(j_comp);
    for j in 0..j_comp {
        let block = cavity.block(j);
        let nat = block.to_natural()?;
        let mut lam = nat.lam().clone();
        for i in 0..d {
            lam[[i, i]] += F::one() / sigma2;
        }
        let r = nat.r() + &x.mapv(|v| v / sigma2);
        let cond = crate::expfam::GaussianNatural::new(r, lam)?.to_moments()?;

        let gj = g[j];
        let keep = F::one() - gj;
        let mean = cond.mean().mapv(|v| v * gj) + block.mean().mapv(|v| v * keep);
        let d_upd = cond.mean() - &mean;
        let d_old = block.mean() - &mean;
        let mut cov = Array2::zeros((d, d));
        for a in 0..d {
            for b in 0..d {
                cov[[a, b]] = gj * (cond.cov()[[a, b]] + d_upd[a] * d_upd[b])
                    + keep * (block.cov()[[a, b]] + d_old[a] * d_old[b]);
            }
        }
        linalg::symmetrize(&mut cov);
        matched.push(GaussianMoment::new(mean, cov)?);
    }
    Ok((BlockMoment::from_blocks(matched)?, log_z, resp))
}

/// Stacked-interface wrapper over [`mog_tilted_blocks`]: accepts and returns
/// one block-diagonal Gaussian over all component means.
pub fn mog_tilted_update<F: Real>(
    cavity: &GaussianMoment<F>,
    x: &Array1<F>,
    model: &MoGModel<F>,
) -> Result<(TiltedResult<F>, CategoricalDist<F>)> {
    let blocks = BlockMoment::from_stacked(cavity, &model.block_dims())?;
    let (matched, log_z, resp) = mog_tilted_blocks(&blocks, x, model)?;
    Ok((
        TiltedResult {
            moments: matched.stacked(),
            log_z,
        },
        resp,
    ))
}

/// Tilted moments plus per-site extras, as consumed by the update rules.
#[derive(Clone, Debug)]
pub struct SiteTilted<F> {
    pub moments: BlockMoment<F>,
    pub log_z: F,
    /// Mixture responsibilities, for models that have them.
    pub responsibilities: Option<CategoricalDist<F>>,
}

/// A dataset's worth of likelihood sites, abstracted over the model so the
/// update rules are model-agnostic.
pub trait SiteComputation<F: Real> {
    /// Number of sites (data points).
    fn n_sites(&self) -> usize;

    /// Block structure of the parameter the sites act on.
    fn block_dims(&self) -> Vec<usize>;

    /// Tilted moments of site `n` against the given cavity.
    fn tilted(&self, cavity: &BlockMoment<F>, n: usize) -> Result<SiteTilted<F>>;
}

/// Probit sites over rows of a feature matrix.
pub struct ProbitSites<'a, F> {
    inputs: &'a Array2<F>,
    labels: &'a [i8],
    alpha: F,
    rule: Option<GaussHermite<F>>,
}

impl<'a, F: Real> ProbitSites<'a, F> {
    /// `alpha` is the site power; 1 selects the closed form, anything else
    /// routes through quadrature with the given rule order.
    pub fn new(
        inputs: &'a Array2<F>,
        labels: &'a [i8],
        alpha: F,
        quadrature_order: usize,
    ) -> Result<Self> {
        if labels.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if !(alpha > F::zero()) || !alpha.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "site power alpha must be positive and finite, got {alpha}"
            )));
        }
        let rule = if alpha == F::one() {
            None
        } else {
            Some(GaussHermite::new(quadrature_order))
        };
        Ok(Self {
            inputs,
            labels,
            alpha,
            rule,
        })
    }
}

impl<F: Real> SiteComputation<F> for ProbitSites<'_, F> {
    fn n_sites(&self) -> usize {
        self.inputs.nrows()
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![self.inputs.ncols()]
    }

    fn tilted(&self, cavity: &BlockMoment<F>, n: usize) -> Result<SiteTilted<F>> {
        debug_assert_eq!(cavity.n_blocks(), 1, "probit parameter is a single block");
        let site = ProbitSite::new(self.inputs.row(n).to_owned(), self.labels[n])?;
        let result = match &self.rule {
            None => probit_tilted_moments(cavity.block(0), &site)?,
            Some(rule) => tilted_moments_quadrature(cavity.block(0), &site, self.alpha, rule)?,
        };
        Ok(SiteTilted {
            moments: BlockMoment::single(result.moments),
            log_z: result.log_z,
            responsibilities: None,
        })
    }
}

/// Mixture sites over rows of an observation matrix.
pub struct MogSites<'a, F> {
    inputs: &'a Array2<F>,
    model: &'a MoGModel<F>,
}

impl<'a, F: Real> MogSites<'a, F> {
    pub fn new(inputs: &'a Array2<F>, model: &'a MoGModel<F>) -> Result<Self> {
        if inputs.ncols() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "observations have dimension {}, mixture expects {}",
                inputs.ncols(),
                model.dim()
            )));
        }
        Ok(Self { inputs, model })
    }
}

impl<F: Real> SiteComputation<F> for MogSites<'_, F> {
    fn n_sites(&self) -> usize {
        self.inputs.nrows()
    }

    fn block_dims(&self) -> Vec<usize> {
        self.model.block_dims()
    }

    fn tilted(&self, cavity: &BlockMoment<F>, n: usize) -> Result<SiteTilted<F>> {
        let x = self.inputs.row(n).to_owned();
        let (moments, log_z, resp) = mog_tilted_blocks(cavity, &x, self.model)?;
        Ok(SiteTilted {
            moments,
            log_z,
            responsibilities: Some(resp),
        })
    }
}
