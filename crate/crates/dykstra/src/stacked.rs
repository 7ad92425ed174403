//! Product-space vectors: one m-dimensional block per graph node.
//!
//! Everything the solver touches lives in X = (R^m)^|V|. A `StackedVector`
//! is that object stored densely, block-major. All arithmetic is plain `f64`
//! with a fixed summation order so that repeated runs agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense element of the product space (R^m)^|V|.
///
/// Invariant: at least one block, all blocks of the same nonzero length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StackedVector {
    blocks: Vec<Vec<f64>>,
}

impl StackedVector {
    /// All-zero vector with `num_blocks` blocks of dimension `block_dim`.
    pub fn zeros(num_blocks: usize, block_dim: usize) -> Self {
        StackedVector {
            blocks: vec![vec![0.0; block_dim]; num_blocks],
        }
    }

    /// Build from explicit blocks, validating the shape invariant.
    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Structural("stacked vector needs >= 1 block".into()));
        }
        let dim = blocks[0].len();
        if dim == 0 {
            return Err(Error::Structural("block dimension must be >= 1".into()));
        }
        if let Some(bad) = blocks.iter().position(|b| b.len() != dim) {
            return Err(Error::Structural(format!(
                "block {bad} has length {} but block 0 has length {dim}",
                blocks[bad].len()
            )));
        }
        Ok(StackedVector { blocks })
    }

    /// Same m-vector copied into every block (e.g. a consensus point).
    pub fn splat(num_blocks: usize, block: &[f64]) -> Self {
        StackedVector {
            blocks: vec![block.to_vec(); num_blocks],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.blocks[i]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.blocks.iter().map(|b| b.as_slice())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_blocks() == other.num_blocks() && self.block_dim() == other.block_dim()
    }

    /// Squared Euclidean norm over all blocks, summed in block order.
    pub fn norm_sq(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// In-place `self -= other`.
    pub fn sub_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x -= y;
            }
        }
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.sub_assign(other);
        out
    }
}

/// `a * u + v`, the only scaled combination the solver needs.
pub fn axpy(a: f64, u: &StackedVector, v: &StackedVector) -> Result<StackedVector> {
    if !u.same_shape(v) {
        return Err(Error::Structural(format!(
            "axpy shape mismatch: {}x{} vs {}x{}",
            u.num_blocks(),
            u.block_dim(),
            v.num_blocks(),
            v.block_dim()
        )));
    }
    let blocks = u
        .blocks
        .iter()
        .zip(&v.blocks)
        .map(|(ub, vb)| ub.iter().zip(vb).map(|(x, y)| a * x + y).collect())
        .collect();
    Ok(StackedVector { blocks })
}

/// Inner product over all blocks.
pub fn dot(u: &StackedVector, v: &StackedVector) -> Result<f64> {
    if !u.same_shape(v) {
        return Err(Error::Structural("dot shape mismatch".into()));
    }
    Ok(u.blocks
        .iter()
        .zip(&v.blocks)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(x, y)| x * y)
        .sum())
}

/// Plain m-vector helpers used by every module; kept free so block slices
/// can be combined without copying into a `StackedVector`.
pub(crate) mod vecmath {
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    pub fn norm(a: &[f64]) -> f64 {
        norm_sq(a).sqrt()
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn scale(a: f64, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| a * x).collect()
    }

    /// `a*u + b*v` for plain vectors.
    pub fn lincomb(a: f64, u: &[f64], b: f64, v: &[f64]) -> Vec<f64> {
        u.iter().zip(v).map(|(x, y)| a * x + b * y).collect()
    }

    #[cfg(test)]
    pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn zeros_shape_and_norm() {
        let v = StackedVector::zeros(3, 2);
        assert_eq!(v.num_blocks(), 3);
        assert_eq!(v.block_dim(), 2);
        assert_eq!(v.norm_sq(), 0.0);
    }

    #[test]
    fn from_blocks_rejects_ragged_and_empty() {
        assert!(StackedVector::from_blocks(vec![]).is_err());
        assert!(StackedVector::from_blocks(vec![vec![]]).is_err());
        assert!(StackedVector::from_blocks(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn norm_sq_three_four_five() {
        let v = StackedVector::from_blocks(vec![vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(v.norm_sq(), 25.0);
    }

    #[test]
    fn axpy_basics() {
        let u = StackedVector::from_blocks(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = StackedVector::zeros(2, 2);
        // a=0 returns v; a=1 with v=0 returns u; a=-1 then add u returns 0.
        assert_eq!(axpy(0.0, &u, &v).unwrap(), v);
        assert_eq!(axpy(1.0, &u, &v).unwrap(), u);
        let neg = axpy(-1.0, &u, &v).unwrap();
        let zero = axpy(1.0, &u, &neg).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);
    }

    #[test]
    fn axpy_shape_mismatch_is_structural() {
        let u = StackedVector::zeros(2, 2);
        let v = StackedVector::zeros(2, 3);
        assert!(matches!(
            axpy(1.0, &u, &v),
            Err(crate::error::Error::Structural(_))
        ));
    }

    #[test]
    fn norm_sq_agrees_with_independent_dot() {
        // Oracle: an index-by-index dot product written out longhand.
        let mut rng = Rng::new(99);
        let blocks: Vec<Vec<f64>> = (0..4).map(|_| rng.uniform_vec(3)).collect();
        let v = StackedVector::from_blocks(blocks.clone()).unwrap();
        let mut oracle = 0.0;
        for b in &blocks {
            for x in b {
                oracle += x * x;
            }
        }
        assert!((v.norm_sq() - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
        assert!((dot(&v, &v).unwrap() - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        ((1usize..5), (1usize..5)).prop_flat_map(|(nb, dim)| {
            let elem = -100.0f64..100.0;
            let block = prop::collection::vec(elem, dim..=dim);
            let blocks = prop::collection::vec(block, nb..=nb);
            (blocks.clone(), blocks)
        })
    }

    proptest! {
        // ||u+v||^2 + ||u-v||^2 = 2||u||^2 + 2||v||^2, within 1e-9 relative.
        #[test]
        fn parallelogram_law((ub, vb) in arb_pair()) {
            let u = StackedVector::from_blocks(ub).unwrap();
            let v = StackedVector::from_blocks(vb).unwrap();
            let sum = axpy(1.0, &u, &v).unwrap();
            let diff = axpy(-1.0, &v, &u).unwrap();
            let lhs = sum.norm_sq() + diff.norm_sq();
            let rhs = 2.0 * u.norm_sq() + 2.0 * v.norm_sq();
            let scale = 1.0f64.max(lhs.abs()).max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * scale);
        }
    }
}
