//! Linear feature maps `Phi(s, a)` for the linear-TD and saddle estimators.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, LdgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    OneHot,
    Custom,
}

/// Column `i` of `table` is `Phi` of pair `i`; `table` is the stacked `Psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    table: DMatrix<f64>,
    kind: FeatureKind,
    sparse: Vec<Vec<(usize, f64)>>,
}

impl FeatureMap {
    pub fn one_hot(num_pairs: usize) -> Self {
        Self::build(DMatrix::identity(num_pairs, num_pairs), FeatureKind::OneHot)
    }

    /// `table` is `d_f x |S||A|`; entries must be finite.
    pub fn custom(table: DMatrix<f64>) -> Result<Self> {
        if table.nrows() == 0 || table.ncols() == 0 {
            return Err(config_err!("feature table must be non-empty"));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("feature table has non-finite entries"));
        }
        Ok(Self::build(table, FeatureKind::Custom))
    }

    fn build(table: DMatrix<f64>, kind: FeatureKind) -> Self {
        let sparse = table
            .column_iter()
            .map(|col| col.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, v)| (k, *v)).collect())
            .collect();
        Self { table, kind, sparse }
    }

    pub fn dim(&self) -> usize {
        self.table.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.table.ncols()
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn phi(&self, pair_index: usize) -> DVector<f64> {
        self.table.column(pair_index).into_owned()
    }

    /// Nonzero entries of `Phi(pair)` as `(feature, value)`.
    pub fn sparse(&self, pair_index: usize) -> &[(usize, f64)] {
        &self.sparse[pair_index]
    }

    /// `|Phi(pair)|^2`.
    pub fn sq_norm(&self, pair_index: usize) -> f64 {
        self.sparse[pair_index].iter().map(|(_, v)| v * v).sum()
    }

    /// `w(pair) = alpha^T Phi(pair)` for every pair, as a `|S||A| x n` table.
    pub fn evaluate(&self, alpha: &DMatrix<f64>) -> DMatrix<f64> {
        self.table.tr_mul(alpha)
    }

    pub(crate) fn check_pairs(&self, num_pairs: usize) -> Result<()> {
        if self.num_pairs() != num_pairs {
            return Err(config_err!(
                "feature map covers {} pairs, the MDP has {num_pairs}",
                self.num_pairs()
            ));
        }
        Ok(())
    }

    /// Errors unless the feature rows are linearly independent, i.e.
    /// `Psi D Psi^T` is nonsingular for any positive `D`.
    pub fn require_full_rank(&self) -> Result<()> {
        if self.kind == FeatureKind::OneHot {
            return Ok(());
        }
        let (df, sa) = self.table.shape();
        if df > sa {
            return Err(LdgError::Assumption(alloc::format!(
                "{df} features over {sa} pairs cannot be linearly independent"
            )));
        }
        let sv = self.table.singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(max > 0.0) || min <= 1e-10 * max {
            return Err(LdgError::Assumption(alloc::format!(
                "feature rows are linearly dependent (singular values {min:.3e}..{max:.3e})"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_columns_are_basis_vectors() {
        let f = FeatureMap::one_hot(4);
        assert_eq!(f.dim(), 4);
        assert_eq!(f.sparse(2), &[(2, 1.0)]);
        assert_eq!(f.phi(1), DVector::from_vec(alloc::vec![0.0, 1.0, 0.0, 0.0]));
        assert!(f.require_full_rank().is_ok());
    }

    #[test]
    fn dependent_rows_violate_assumption() {
        let t = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let f = FeatureMap::custom(t).unwrap();
        assert!(matches!(f.require_full_rank(), Err(LdgError::Assumption(_))));
        let too_many = FeatureMap::custom(DMatrix::from_element(3, 2, 1.0)).unwrap();
        assert!(matches!(too_many.require_full_rank(), Err(LdgError::Assumption(_))));
    }

    #[test]
    fn evaluate_matches_columnwise_products() {
        let f = FeatureMap::custom(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.5, 1.0, -1.0])).unwrap();
        let alpha = DMatrix::from_row_slice(2, 1, &[3.0, -2.0]);
        let w = f.evaluate(&alpha);
        for i in 0..3 {
            assert!((w[(i, 0)] - f.phi(i).dot(&alpha.column(0))).abs() < 1e-15);
        }
        assert_eq!(f.sparse(1), &[(1, 1.0)]);
    }

    #[test]
    fn non_finite_table_rejected() {
        assert!(FeatureMap::custom(DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }
}
