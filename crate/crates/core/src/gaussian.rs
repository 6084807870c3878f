//! Gaussian algebra on low-rank-plus-isotropic covariances.
//!
//! A [`LowRankGaussian`] stores `Σ = W·Wᵀ + σ²·I` through its factor `W`
//! (D×q) and `σ²`. Everything that touches `Σ⁻¹` goes through the Woodbury
//! identity
//!
//! ```text
//! K = Σ⁻¹ = (I − W·M⁻¹·Wᵀ) / σ²,     M = Wᵀ·W + σ²·I   (q×q)
//! ```
//!
//! so no D×D matrix is ever formed unless a caller asks for one explicitly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Variances are floored here before any division.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl UnivariateGaussian {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "univariate gaussian needs finite mean and positive variance, got N({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (LN_2PI + self.variance.ln() + d * d / self.variance)
    }

    pub fn product(&self, other: &Self) -> (Self, f64) {
        gaussian_product(self, other)
    }
}

/// Normalized product of two univariate densities.
///
/// Returns `(N(x; m, v), log_scale)` with
/// `N(x; a.mean, a.variance) · N(x; b.mean, b.variance) = exp(log_scale) · N(x; m, v)`.
/// `log_scale` is `log N(a.mean; b.mean, a.variance + b.variance)`.
pub fn gaussian_product(a: &UnivariateGaussian, b: &UnivariateGaussian) -> (UnivariateGaussian, f64) {
    let pa = 1.0 / a.variance;
    let pb = 1.0 / b.variance;
    let variance = 1.0 / (pa + pb);
    let mean = variance * (a.mean * pa + b.mean * pb);
    let total = a.variance + b.variance;
    let d = a.mean - b.mean;
    let log_scale = -0.5 * (LN_2PI + total.ln() + d * d / total);
    (UnivariateGaussian { mean, variance }, log_scale)
}

/// A Gaussian with an explicit (small) covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn marginal(&self, i: usize) -> UnivariateGaussian {
        UnivariateGaussian {
            mean: self.mean[i],
            variance: self.covariance[(i, i)].max(VARIANCE_FLOOR),
        }
    }
}

/// A symmetric linear map, applied matrix-free.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
}

/// The zero operator of a given dimension.
#[derive(Debug, Clone, Copy)]
pub struct ZeroOperator(pub usize);

impl SymmetricOperator for ZeroOperator {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
}

/// `Σᵢ wᵢ · gᵢ·gᵢᵀ` with the `gᵢ` stored as the rows of a matrix.
#[derive(Debug, Clone)]
pub struct RankOneSum {
    pub vectors: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl SymmetricOperator for RankOneSum {
    fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let proj = (&self.vectors * x).component_mul(&self.weights);
        self.vectors.tr_mul(&proj)
    }
}

#[derive(Debug, Clone)]
pub struct LowRankGaussian {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    noise_variance: f64,
    inner: Cholesky<f64, Dyn>,
}

impl PartialEq for LowRankGaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.factor == other.factor
            && self.noise_variance.to_bits() == other.noise_variance.to_bits()
    }
}

impl LowRankGaussian {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        let d = mean.len();
        if factor.nrows() != d {
            return Err(Error::DimensionMismatch {
                what: "factor rows vs mean length",
                expected: d,
                found: factor.nrows(),
            });
        }
        if factor.ncols() > d {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds dimension {d}",
                factor.ncols()
            )));
        }
        if !(noise_variance > 0.0) || !noise_variance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive and finite, got {noise_variance}"
            )));
        }
        if factor.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean or factor entry".into()));
        }
        let q = factor.ncols();
        let m = factor.tr_mul(&factor) + DMatrix::identity(q, q) * noise_variance;
        let inner = Cholesky::new(m)
            .ok_or_else(|| Error::Singular("Wᵀ·W + σ²·I is not positive definite".into()))?;
        Ok(Self {
            mean,
            factor,
            noise_variance,
            inner,
        })
    }

    /// Independent coordinates with common variance.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::zeros(d, 0), variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// `M⁻¹·v` for the q×q inner matrix `M = Wᵀ·W + σ²·I`.
    pub(crate) fn inner_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(v)
    }

    fn check_len(&self, what: &'static str, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.dim(),
                found: n,
            });
        }
        Ok(())
    }

    /// `K·x` without forming `K`.
    pub fn precision_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.inner_solve(&self.factor.tr_mul(x));
        (x - &self.factor * u) / self.noise_variance
    }

    /// `Σ·x` without forming `Σ`.
    pub fn covariance_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.factor * self.factor.tr_mul(x) + x * self.noise_variance
    }

    pub fn covariance_entry(&self, a: usize, b: usize) -> f64 {
        let dot = self.factor.row(a).dot(&self.factor.row(b));
        if a == b {
            dot + self.noise_variance
        } else {
            dot
        }
    }

    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        &self.factor * self.factor.transpose() + DMatrix::identity(d, d) * self.noise_variance
    }

    pub fn precision_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let minv_wt = self.inner.solve(&self.factor.transpose());
        (DMatrix::identity(d, d) - &self.factor * minv_wt) / self.noise_variance
    }

    /// `log|Σ| = (D − q)·log σ² + log|M|`.
    pub fn log_det_covariance(&self) -> f64 {
        let d = self.dim() as f64;
        let q = self.rank() as f64;
        let log_det_m: f64 = self.inner.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        (d - q) * self.noise_variance.ln() + log_det_m
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_len("log_pdf argument", x.len())?;
        let r = x - &self.mean;
        let quad = r.dot(&self.precision_mul(&r));
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det_covariance() + quad))
    }

    /// The precision sub-block `K[idx, idx]`.
    pub fn precision_block(&self, idx: &[usize]) -> DMatrix<f64> {
        let n = idx.len();
        let wq = self.factor.select_rows(idx.iter());
        let minv_wqt = self.inner.solve(&wq.transpose());
        (DMatrix::identity(n, n) - wq * minv_wqt) / self.noise_variance
    }

    /// Conditional distribution of the unobserved coordinates given the
    /// observed ones. The query set is the complement of `observed`, in
    /// increasing index order.
    ///
    /// Uses `cov = (K_QQ)⁻¹` and `mean = μ_Q − cov·K_QO·(x_O − μ_O)`; both
    /// blocks of `K` come from the Woodbury form.
    pub fn conditional(&self, observed: &[usize], values: &DVector<f64>) -> Result<DenseGaussian> {
        let d = self.dim();
        if observed.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "observed values vs observed index set",
                expected: observed.len(),
                found: values.len(),
            });
        }
        let mut is_observed = vec![false; d];
        for &i in observed {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, dim: d });
            }
            if is_observed[i] {
                return Err(Error::InvalidParameter(format!("index {i} observed twice")));
            }
            is_observed[i] = true;
        }
        let query: Vec<usize> = (0..d).filter(|&i| !is_observed[i]).collect();
        if query.is_empty() {
            return Err(Error::InvalidParameter("query set is empty".into()));
        }

        let k_qq = self.precision_block(&query);
        let chol = Cholesky::new(k_qq).ok_or_else(|| {
            Error::Singular(format!(
                "precision block over {} query coordinates is not positive definite",
                query.len()
            ))
        })?;
        let covariance = chol.inverse();

        // K_QO·d_O = −W_Q·M⁻¹·(W_Oᵀ·d_O) / σ²  (Q and O are disjoint)
        let q = self.rank();
        let mut wt_d = DVector::zeros(q);
        for (&i, &v) in observed.iter().zip(values.iter()) {
            let di = v - self.mean[i];
            for c in 0..q {
                wt_d[c] += self.factor[(i, c)] * di;
            }
        }
        let u = self.inner_solve(&wt_d);
        let wq = self.factor.select_rows(query.iter());
        let k_qo_d = -(wq * u) / self.noise_variance;
        let shift = chol.solve(&k_qo_d);
        let mean = DVector::from_iterator(
            query.len(),
            query.iter().zip(shift.iter()).map(|(&i, s)| self.mean[i] - s),
        );
        Ok(DenseGaussian { mean, covariance })
    }

    /// Density of coordinate `target` given coordinate `given = value`,
    /// from the bivariate marginal of the pair.
    pub fn pair_conditional(&self, given: usize, target: usize, value: f64) -> Result<UnivariateGaussian> {
        let d = self.dim();
        for i in [given, target] {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, dim: d });
            }
        }
        let (slope, intercept, variance) = self.pair_regression(given, target)?;
        Ok(UnivariateGaussian {
            mean: intercept + slope * value,
            variance,
        })
    }

    /// `(slope, intercept, variance)` of `target | given` as a linear
    /// regression on the value of `given`.
    pub(crate) fn pair_regression(&self, given: usize, target: usize) -> Result<(f64, f64, f64)> {
        let s_gg = self.covariance_entry(given, given);
        let s_tt = self.covariance_entry(target, target);
        let s_gt = self.covariance_entry(given, target);
        let corr = s_gt / (s_gg * s_tt).sqrt();
        if !(corr.abs() < 1.0 - 1e-12) {
            return Err(Error::Degenerate(format!(
                "bivariate marginal of ({given}, {target}) has correlation {corr}"
            )));
        }
        let slope = s_gt / s_gg;
        let intercept = self.mean[target] - slope * self.mean[given];
        let variance = (s_tt - s_gt * s_gt / s_gg).max(VARIANCE_FLOOR);
        Ok((slope, intercept, variance))
    }

    /// Draws `count` samples `W·s + μ + ε` as the rows of a matrix.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let q = self.rank();
        let sd = self.noise_variance.sqrt();
        let mut out = DMatrix::zeros(count, d);
        let mut s = DVector::zeros(q);
        for r in 0..count {
            for v in s.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let ws = &self.factor * &s;
            for c in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                out[(r, c)] = self.mean[c] + ws[c] + sd * eps;
            }
        }
        out
    }

    /// Solves `(K + extra)·x = rhs` by conjugate gradients with at most
    /// `10·D` iterations.
    pub fn precision_solve(
        &self,
        extra: &dyn SymmetricOperator,
        rhs: &DVector<f64>,
        tol: f64,
    ) -> Result<DVector<f64>> {
        self.check_len("rhs", rhs.len())?;
        self.check_len("extra precision", extra.dim())?;
        conjugate_gradient(
            |x| self.precision_mul(x) + extra.apply(x),
            rhs,
            tol,
            10 * self.dim().max(1),
        )
    }
}

/// Unpreconditioned CG for a symmetric positive definite operator.
/// Returns `x` with `‖A·x − b‖ ≤ tol·‖b‖`.
pub fn conjugate_gradient<F>(apply: F, rhs: &DVector<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = rhs.len();
    let b_norm = rhs.norm();
    let mut x = DVector::zeros(n);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let target = tol * b_norm;
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for _ in 0..max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::Singular(format!(
                "operator is not positive definite along a search direction (pᵀAp = {pap:.3e})"
            )));
        }
        let step = rr / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_next = r.dot(&r);
        if rr_next.sqrt() <= target {
            // recurrence residual can drift; confirm against the true one
            let true_res = (rhs - apply(&x)).norm();
            if true_res <= target {
                return Ok(x);
            }
            r = rhs - apply(&x);
            p = r.clone();
            rr = r.dot(&r);
            continue;
        }
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
    }
    let residual = (rhs - apply(&x)).norm() / b_norm;
    if residual <= tol {
        return Ok(x);
    }
    Err(Error::NonConvergence {
        solver: "conjugate gradient",
        iterations: max_iter,
        residual,
    })
}
