//! Block-diagonal products of independent Gaussians.
//!
//! Latent-variable models keep one Gaussian block per mixture component (or
//! more generally per independent parameter group), and the approximation
//! factorizes across blocks. Representing that structure explicitly, rather
//! than as one big matrix, keeps every factorization at the block dimension
//! and makes the stored-parameter accounting exact.

use ndarray::{Array1, Array2};

use super::{GaussianMoment, GaussianNatural};
use crate::{Error, Real, Result};

/// Product of independent Gaussian factors in natural form.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockNatural<F> {
    blocks: Vec<GaussianNatural<F>>,
}

/// Product of independent Gaussian distributions in moment form.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMoment<F> {
    blocks: Vec<GaussianMoment<F>>,
}

fn check_block_counts(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "block counts differ: {a} vs {b}"
        )));
    }
    Ok(())
}

impl<F: Real> BlockNatural<F> {
    pub fn from_blocks(blocks: Vec<GaussianNatural<F>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::DegenerateInput("no blocks".into()));
        }
        Ok(Self { blocks })
    }

    pub fn single(block: GaussianNatural<F>) -> Self {
        Self {
            blocks: vec![block],
        }
    }

    /// Unit factor with the given per-block dimensions.
    pub fn unit_of(dims: &[usize]) -> Self {
        Self {
            blocks: dims.iter().map(|&d| GaussianNatural::unit(d)).collect(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[GaussianNatural<F>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &GaussianNatural<F> {
        &self.blocks[i]
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.parameter_count()).sum()
    }

    pub fn multiply(&self, other: &Self) -> Result<Self> {
        check_block_counts(self.n_blocks(), other.n_blocks())?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.multiply(b))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn divide(&self, other: &Self) -> Result<Self> {
        check_block_counts(self.n_blocks(), other.n_blocks())?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.divide(b))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn power(&self, beta: F) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.power(beta)).collect(),
        }
    }

    pub fn blend(&self, other: &Self, eps: F) -> Result<Self> {
        check_block_counts(self.n_blocks(), other.n_blocks())?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.blend(b, eps))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Largest absolute parameter difference across all blocks.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        debug_assert_eq!(self.n_blocks(), other.n_blocks());
        self.blocks
            .iter()
            .zip(&other.blocks)
            .fold(F::zero(), |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn to_moments(&self) -> Result<BlockMoment<F>> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.to_moments())
            .collect::<Result<_>>()?;
        Ok(BlockMoment { blocks })
    }
}

impl<F: Real> BlockMoment<F> {
    pub fn from_blocks(blocks: Vec<GaussianMoment<F>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::DegenerateInput("no blocks".into()));
        }
        Ok(Self { blocks })
    }

    pub fn single(block: GaussianMoment<F>) -> Self {
        Self {
            blocks: vec![block],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[GaussianMoment<F>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &GaussianMoment<F> {
        &self.blocks[i]
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }

    pub fn dim_total(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.parameter_count()).sum()
    }

    /// Sum of covariance traces over blocks, the posterior-spread scalar
    /// reported in traces.
    pub fn trace_cov(&self) -> F {
        let mut acc = F::zero();
        for b in &self.blocks {
            for i in 0..b.dim() {
                acc += b.cov()[[i, i]];
            }
        }
        acc
    }

    pub fn to_natural(&self) -> Result<BlockNatural<F>> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.to_natural())
            .collect::<Result<_>>()?;
        Ok(BlockNatural { blocks })
    }

    /// Assembles the blocks into one block-diagonal Gaussian.
    pub fn stacked(&self) -> GaussianMoment<F> {
        let total = self.dim_total();
        let mut mean = Array1::zeros(total);
        let mut cov = Array2::zeros((total, total));
        let mut at = 0;
        for b in &self.blocks {
            let d = b.dim();
            mean.slice_mut(ndarray::s![at..at + d]).assign(b.mean());
            cov.slice_mut(ndarray::s![at..at + d, at..at + d])
                .assign(b.cov());
            at += d;
        }
        GaussianMoment::new_unchecked(mean, cov)
    }

    /// Extracts diagonal blocks of the given dimensions from a stacked
    /// Gaussian, discarding any cross-block covariance.
    pub fn from_stacked(g: &GaussianMoment<F>, dims: &[usize]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if total != g.dim() || dims.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "block dims sum to {total}, stacked dimension is {}",
                g.dim()
            )));
        }
        let mut blocks = Vec::with_capacity(dims.len());
        let mut at = 0;
        for &d in dims {
            let mean = g.mean().slice(ndarray::s![at..at + d]).to_owned();
            let cov = g.cov().slice(ndarray::s![at..at + d, at..at + d]).to_owned();
            blocks.push(GaussianMoment::new(mean, cov)?);
            at += d;
        }
        Ok(Self { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::kl_gaussian;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_blocks() -> BlockMoment<f64> {
        BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![1.0, -0.5], array![[0.8, 0.2], [0.2, 0.5]]).unwrap(),
            GaussianMoment::new(array![2.0], array![[0.25]]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn stacking_round_trips() {
        let bm = two_blocks();
        let stacked = bm.stacked();
        assert_eq!(stacked.dim(), 3);
        assert_eq!(stacked.cov()[[0, 2]], 0.0);
        let back = BlockMoment::from_stacked(&stacked, &[2, 1]).unwrap();
        assert_eq!(back, bm);
        assert!(BlockMoment::from_stacked(&stacked, &[2, 2]).is_err());
    }

    #[test]
    fn algebra_delegates_per_block() {
        let nat = two_blocks().to_natural().unwrap();
        let unit = BlockNatural::unit_of(&[2, 1]);
        assert_eq!(nat.multiply(&unit).unwrap(), nat);
        let round = nat
            .multiply(&nat.power(0.5))
            .unwrap()
            .divide(&nat.power(0.5))
            .unwrap();
        assert!(round.max_abs_diff(&nat) < 1e-12);

        let single = BlockNatural::single(GaussianNatural::unit(3));
        assert!(matches!(
            nat.multiply(&single),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn parameter_count_sums_blocks() {
        let bm = two_blocks();
        // (2^2 + 2) + (1^2 + 1) = 8.
        assert_eq!(bm.parameter_count(), 8);
        assert_eq!(bm.to_natural().unwrap().parameter_count(), 8);
        assert_abs_diff_eq!(bm.trace_cov(), 0.8 + 0.5 + 0.25, epsilon = 1e-15);
    }

    #[test]
    fn kl_is_additive_over_blocks() {
        let p = two_blocks();
        let q = BlockMoment::from_blocks(vec![
            GaussianMoment::new(array![0.0, 0.0], array![[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            GaussianMoment::new(array![1.0], array![[1.0]]).unwrap(),
        ])
        .unwrap();
        let block_sum: f64 = p
            .blocks()
            .iter()
            .zip(q.blocks())
            .map(|(a, b)| kl_gaussian(a, b).unwrap())
            .sum();
        let stacked = kl_gaussian(&p.stacked(), &q.stacked()).unwrap();
        assert_abs_diff_eq!(block_sum, stacked, epsilon = 1e-10);
    }
}
