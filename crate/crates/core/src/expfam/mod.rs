//! Gaussian and categorical exponential-family primitives.
//!
//! The Gaussian family is carried in two parameterizations. Natural form
//! (`r = Lambda mu`, `lam = Lambda`) is where factor algebra happens:
//! products, quotients, and fractional powers of factors are componentwise
//! `+`, `-`, and scaling on `(r, lam)`, with no matrix factorization and no
//! positive-definiteness requirement on individual factors (site factors are
//! routinely non-normalizable on their own). Moment form (`mean`, `cov`) is
//! where expectations happen: tilted-moment computations, reporting, and
//! divergences. The conversions [`GaussianNatural::to_moments`] and
//! [`GaussianMoment::to_natural`] are the only places a matrix is factored,
//! and they are where positive definiteness is enforced.
//!
//! Numerical hygiene: precision and covariance matrices are symmetrized at
//! construction, and the componentwise factor operations preserve symmetry
//! bit-for-bit, so drift cannot accumulate. The conversions tolerate
//! marginally indefinite input by escalating a diagonal jitter (0, then
//! 1e-9, then 1e-7) before giving up with
//! [`Error::NotNormalizable`](crate::Error::NotNormalizable).

mod block;

pub use block::{BlockMoment, BlockNatural};

use ndarray::{Array1, Array2};

use crate::linalg::{self, Cholesky};
use crate::{Error, Real, Result};

const SYMMETRY_REL_TOL: f64 = 1e-12;

/// Cholesky with diagonal-jitter escalation for matrices that are positive
/// definite in exact arithmetic but marginal in floating point. The jitter
/// is relative to the diagonal scale, so zero and genuinely indefinite
/// matrices stay rejected.
pub(crate) fn cholesky_escalated<F: Real>(a: &Array2<F>) -> Option<Cholesky<F>> {
    if let Some(ch) = Cholesky::decompose(a) {
        return Some(ch);
    }
    let scale = (0..a.nrows()).fold(F::zero(), |m, i| m.max(a[[i, i]].abs()));
    if !(scale > F::zero()) {
        return None;
    }
    for jitter in [1e-9, 1e-7] {
        let mut bumped = a.clone();
        let j = F::of(jitter) * scale;
        for i in 0..bumped.nrows() {
            bumped[[i, i]] += j;
        }
        if let Some(ch) = Cholesky::decompose(&bumped) {
            return Some(ch);
        }
    }
    None
}

fn check_square_symmetric<F: Real>(m: &Array2<F>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(format!("{what} has non-finite entries")));
    }
    if !linalg::is_symmetric(m, F::of(SYMMETRY_REL_TOL)) {
        return Err(Error::DegenerateInput(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Gaussian factor in natural parameters: `r = Lambda mu`, `lam = Lambda`.
///
/// A factor need not be normalizable (its `lam` may be indefinite or zero);
/// only conversion to moments requires positive definiteness.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNatural<F> {
    r: Array1<F>,
    lam: Array2<F>,
}

impl<F: Real> GaussianNatural<F> {
    /// Validates dimensions, finiteness, and symmetry (relative 1e-12), then
    /// stores an exactly symmetrized `lam`.
    pub fn new(r: Array1<F>, lam: Array2<F>) -> Result<Self> {
        check_square_symmetric(&lam, "precision")?;
        if r.len() != lam.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "precision-mean has length {}, precision is {}x{}",
                r.len(),
                lam.nrows(),
                lam.ncols()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "precision-mean has non-finite entries".into(),
            ));
        }
        let mut lam = lam;
        linalg::symmetrize(&mut lam);
        Ok(Self { r, lam })
    }

    /// The multiplicative unit: all-zero natural parameters.
    pub fn unit(dim: usize) -> Self {
        Self {
            r: Array1::zeros(dim),
            lam: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &Array1<F> {
        &self.r
    }

    pub fn lam(&self) -> &Array2<F> {
        &self.lam
    }

    /// Number of stored scalar parameters, `d^2 + d`.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim();
        d * d + d
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor dimensions differ: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    /// Product of factors: natural parameters add.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            r: &self.r + &other.r,
            lam: &self.lam + &other.lam,
        })
    }

    /// Quotient of factors: natural parameters subtract. The result is often
    /// not normalizable (cavity precisions can be indefinite); that is only
    /// diagnosed at [`to_moments`](Self::to_moments) time.
    pub fn divide(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            r: &self.r - &other.r,
            lam: &self.lam - &other.lam,
        })
    }

    /// Fractional power: natural parameters scale by `beta` (any sign).
    pub fn power(&self, beta: F) -> Self {
        Self {
            r: self.r.mapv(|v| v * beta),
            lam: self.lam.mapv(|v| v * beta),
        }
    }

    /// Convex combination in natural space, `(1 - eps) * self + eps * other`,
    /// the damped-update primitive.
    pub fn blend(&self, other: &Self, eps: F) -> Result<Self> {
        self.check_same_dim(other)?;
        let keep = F::one() - eps;
        Ok(Self {
            r: self.r.mapv(|v| v * keep) + other.r.mapv(|v| v * eps),
            lam: self.lam.mapv(|v| v * keep) + other.lam.mapv(|v| v * eps),
        })
    }

    /// Largest absolute difference across all natural parameters, the
    /// convergence metric for factor updates.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        debug_assert_eq!(self.dim(), other.dim());
        let dr = self
            .r
            .iter()
            .zip(other.r.iter())
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        dr.max(linalg::max_abs_diff(&self.lam, &other.lam))
    }

    /// Converts to moment form. Errors with `NotNormalizable` when `lam` is
    /// not positive definite even after jitter escalation.
    pub fn to_moments(&self) -> Result<GaussianMoment<F>> {
        let ch = cholesky_escalated(&self.lam).ok_or_else(|| {
            Error::NotNormalizable("precision matrix is not positive definite".into())
        })?;
        let mean = ch.solve(&self.r);
        let cov = ch.inverse();
        Ok(GaussianMoment { mean, cov })
    }
}

/// Gaussian distribution in moment parameters.
///
/// Unlike factors, a moment-form Gaussian is always a proper distribution:
/// construction validates that the covariance is symmetric positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoment<F> {
    mean: Array1<F>,
    cov: Array2<F>,
}

impl<F: Real> GaussianMoment<F> {
    /// Validates shape, symmetry, and strict positive definiteness (no
    /// jitter: a singular sample covariance must be rejected, not repaired).
    pub fn new(mean: Array1<F>, cov: Array2<F>) -> Result<Self> {
        check_square_symmetric(&cov, "covariance")?;
        if mean.len() != cov.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("mean has non-finite entries".into()));
        }
        let mut cov = cov;
        linalg::symmetrize(&mut cov);
        if Cholesky::decompose(&cov).is_none() {
            return Err(Error::NotNormalizable(
                "covariance is not positive definite".into(),
            ));
        }
        Ok(Self { mean, cov })
    }

    /// Construction without the positive-definiteness check, for values
    /// produced by operations that guarantee it.
    pub(crate) fn new_unchecked(mean: Array1<F>, cov: Array2<F>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<F> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<F> {
        &self.cov
    }

    /// Number of stored scalar parameters, `d^2 + d`.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim();
        d * d + d
    }

    /// Converts to natural form. Errors with `NotNormalizable` when the
    /// covariance cannot be factored even after jitter escalation.
    pub fn to_natural(&self) -> Result<GaussianNatural<F>> {
        let ch = cholesky_escalated(&self.cov).ok_or_else(|| {
            Error::NotNormalizable("covariance matrix is not positive definite".into())
        })?;
        let r = ch.solve(&self.mean);
        let lam = ch.inverse();
        Ok(GaussianNatural { r, lam })
    }
}

/// `KL(p || q)` between Gaussians in moment form, in nats.
pub fn kl_gaussian<F: Real>(p: &GaussianMoment<F>, q: &GaussianMoment<F>) -> Result<F> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL operands have dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let d = p.dim();
    let chp = Cholesky::decompose(&p.cov)
        .ok_or_else(|| Error::NotNormalizable("KL: first covariance not PD".into()))?;
    let chq = Cholesky::decompose(&q.cov)
        .ok_or_else(|| Error::NotNormalizable("KL: second covariance not PD".into()))?;
    let mut trace = F::zero();
    for j in 0..d {
        let col = p.cov.column(j).to_owned();
        trace += chq.solve(&col)[j];
    }
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&chq.solve(&diff));
    let half = F::of(0.5);
    Ok(half * (trace + maha - F::from_usize(d).unwrap() + chq.ln_det() - chp.ln_det()))
}

/// Categorical distribution in log-weight form.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDist<F> {
    log_weights: Array1<F>,
}

impl<F: Real> CategoricalDist<F> {
    /// Wraps raw (possibly unnormalized) log weights. Entries may be
    /// `-inf` (impossible outcomes) but not NaN or `+inf`.
    pub fn new(log_weights: Array1<F>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::DegenerateInput("categorical has no outcomes".into()));
        }
        if log_weights
            .iter()
            .any(|v| v.is_nan() || *v == F::infinity())
        {
            return Err(Error::DegenerateInput(
                "categorical log-weights must be finite or -inf".into(),
            ));
        }
        Ok(Self { log_weights })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &Array1<F> {
        &self.log_weights
    }

    /// Log-sum-exp normalization. Errors with `NotNormalizable` when every
    /// weight has underflowed to zero.
    pub fn normalize(&self) -> Result<Self> {
        let max = self
            .log_weights
            .iter()
            .fold(F::neg_infinity(), |m, &v| m.max(v));
        if max == F::neg_infinity() {
            return Err(Error::NotNormalizable(
                "all categorical weights are zero".into(),
            ));
        }
        let sum_exp: F = self.log_weights.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        Ok(Self {
            log_weights: self.log_weights.mapv(|v| v - lse),
        })
    }

    /// Probabilities; exact only after [`normalize`](Self::normalize).
    pub fn weights(&self) -> Array1<F> {
        self.log_weights.mapv(|v| v.exp())
    }
}
