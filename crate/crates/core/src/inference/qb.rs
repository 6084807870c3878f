//! Closed-form update of the Gaussian factor q_b.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chain::ColumnPosterior;
use crate::error::{Error, Result};
use crate::gaussian::{LowRankGaussian, SymmetricOperator};
use crate::shape::ShapeCoupling;

/// Largest dimension for which Σ̄ may be materialized.
pub const DENSE_LIMIT: usize = 4096;
/// `Auto` switches to the matrix-free form above this dimension.
pub const AUTO_DENSE_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    Auto,
    Dense,
    MatrixFree,
}

impl CovarianceMode {
    pub fn resolve(self, dim: usize) -> Result<bool> {
        match self {
            CovarianceMode::Dense if dim > DENSE_LIMIT => Err(Error::InvalidParameter(format!(
                "dense posterior covariance refused for dimension {dim} > {DENSE_LIMIT}; use matrix_free"
            ))),
            CovarianceMode::Dense => Ok(true),
            CovarianceMode::MatrixFree => Ok(false),
            CovarianceMode::Auto => Ok(dim <= AUTO_DENSE_LIMIT),
        }
    }
}

/// Dense Σ̄ with its log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCovariance {
    pub matrix: DMatrix<f64>,
    pub log_det: f64,
}

impl DenseCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::Singular("posterior covariance is not positive definite".into()))?;
        let log_det = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(Self { matrix, log_det })
    }
}

/// `q_b(b) = N(b; μ̄, Σ̄)`. Σ̄ is either stored densely or left implicit as
/// `(K + P̃)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: Option<Arc<DenseCovariance>>,
}

impl GaussianPosterior {
    pub fn dense(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "posterior covariance",
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        Ok(Self {
            mean,
            covariance: Some(Arc::new(DenseCovariance::new(covariance)?)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `P̃` as an operator, applied through the coupling gains.
pub struct AugmentOperator<'a>(pub &'a ShapeCoupling);

impl SymmetricOperator for AugmentOperator<'_> {
    fn dim(&self) -> usize {
        self.0.geometry().dim()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.augment_apply(x)
    }
}

/// The q_c-dependent pieces of the q_b update: `P̃` (fixed by the prior) and
/// `p̃` (from the expected rows under q_c).
pub struct PrecisionAugment<'a> {
    pub coupling: &'a ShapeCoupling,
    pub vector: DVector<f64>,
}

impl PrecisionAugment<'_> {
    pub fn operator(&self) -> AugmentOperator<'_> {
        AugmentOperator(self.coupling)
    }

    pub fn precision_dense(&self) -> DMatrix<f64> {
        self.coupling.augment_dense()
    }
}

/// `E_{q_c}[c]` as an `N_b×M` matrix.
pub fn expected_rows(columns: &[ColumnPosterior]) -> DMatrix<f64> {
    let nb = columns.first().map_or(0, |c| c.boundaries());
    DMatrix::from_fn(nb, columns.len(), |k, j| columns[j].expected(k))
}

pub fn build_augment<'a>(coupling: &'a ShapeCoupling, columns: &[ColumnPosterior]) -> Result<PrecisionAugment<'a>> {
    let geom = coupling.geometry();
    if columns.len() != geom.columns {
        return Err(Error::DimensionMismatch {
            what: "q_c columns",
            expected: geom.columns,
            found: columns.len(),
        });
    }
    Ok(PrecisionAugment {
        coupling,
        vector: coupling.augment_vector(&expected_rows(columns)),
    })
}

/// Dense `(K + P̃)⁻¹` where `K` is the precision of `prior_term`.
pub fn posterior_covariance(prior_term: &LowRankGaussian, coupling: &ShapeCoupling) -> Result<DenseCovariance> {
    let d = prior_term.dim();
    if d > DENSE_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "dense posterior covariance refused for dimension {d} > {DENSE_LIMIT}"
        )));
    }
    let a = prior_term.precision_dense() + coupling.augment_dense();
    let a = (&a + a.transpose()) * 0.5;
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular("K + P̃ is not positive definite".into()))?;
    let log_det = -chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
    let inv = chol.inverse();
    Ok(DenseCovariance {
        matrix: (&inv + inv.transpose()) * 0.5,
        log_det,
    })
}

/// `μ̄ = μ − Σ̄·p̃`, computed by solving `(K + P̃)(μ̄ − μ) = −p̃` with CG.
/// `covariance` is attached as is (Σ̄ does not depend on q_c).
pub fn optimize_qb(
    prior_term: &LowRankGaussian,
    augment: &PrecisionAugment,
    covariance: Option<Arc<DenseCovariance>>,
    cg_tol: f64,
) -> Result<GaussianPosterior> {
    let shift = prior_term.precision_solve(&augment.operator(), &(-&augment.vector), cg_tol)?;
    Ok(GaussianPosterior {
        mean: prior_term.mean() + shift,
        covariance,
    })
}
