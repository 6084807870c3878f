//! Global Gaussian shape prior over all boundary heights.
//!
//! The boundary heights of a scan form one vector `b` of length
//! `boundaries · columns`. Column `j` occupies the contiguous block
//! `j·boundaries .. (j+1)·boundaries`, boundary `k` of that column sits at
//! `j·boundaries + k`. Multi-B-scan stacks are flattened B-scan-major, so
//! column `j` belongs to B-scan `j / columns_per_bscan`.

use std::ops::Range;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DenseGaussian, LowRankGaussian, VARIANCE_FLOOR};
use crate::io::{self, model_header, read_model_header};

const SHAPE_TAG: &[u8; 4] = b"SHAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeGeometry {
    pub boundaries: usize,
    /// Total number of columns over all B-scans.
    pub columns: usize,
    pub bscans: usize,
}

impl ShapeGeometry {
    pub fn new(boundaries: usize, columns: usize, bscans: usize) -> Result<Self> {
        let g = Self {
            boundaries,
            columns,
            bscans,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries == 0 || self.columns == 0 || self.bscans == 0 {
            return Err(Error::InvalidParameter(format!("empty geometry {self:?}")));
        }
        if self.columns % self.bscans != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} columns do not split evenly into {} B-scans",
                self.columns, self.bscans
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.boundaries * self.columns
    }

    pub fn columns_per_bscan(&self) -> usize {
        self.columns / self.bscans
    }

    pub fn bscan_of(&self, column: usize) -> usize {
        column / self.columns_per_bscan()
    }

    pub fn index(&self, boundary: usize, column: usize) -> usize {
        column * self.boundaries + boundary
    }

    pub fn column_block(&self, column: usize) -> Range<usize> {
        column * self.boundaries..(column + 1) * self.boundaries
    }
}

/// Real-valued boundary heights `b[k, j]` in row units.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField {
    values: DMatrix<f64>,
    geometry: ShapeGeometry,
}

impl BoundaryField {
    pub fn new(values: DMatrix<f64>, bscans: usize) -> Result<Self> {
        let geometry = ShapeGeometry::new(values.nrows(), values.ncols(), bscans)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("boundary field has non-finite entries".into()));
        }
        Ok(Self { values, geometry })
    }

    pub fn from_vector(geometry: ShapeGeometry, v: &DVector<f64>) -> Result<Self> {
        if v.len() != geometry.dim() {
            return Err(Error::DimensionMismatch {
                what: "boundary vector",
                expected: geometry.dim(),
                found: v.len(),
            });
        }
        let values = DMatrix::from_column_slice(geometry.boundaries, geometry.columns, v.as_slice());
        Self::new(values, geometry.bscans)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn geometry(&self) -> ShapeGeometry {
        self.geometry
    }

    pub fn get(&self, boundary: usize, column: usize) -> f64 {
        self.values[(boundary, column)]
    }

    /// Stacked vector in the layout described at module level.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    pub fn is_strictly_ordered(&self) -> bool {
        self.values
            .column_iter()
            .all(|c| c.as_slice().windows(2).all(|w| w[0] < w[1]))
    }
}

/// Joint Gaussian `p(b)` with PPCA covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    gaussian: LowRankGaussian,
    geometry: ShapeGeometry,
    variance_inflation: f64,
}

#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub prior: ShapePrior,
    pub warnings: Vec<String>,
}

impl ShapePrior {
    pub fn new(gaussian: LowRankGaussian, geometry: ShapeGeometry, variance_inflation: f64) -> Result<Self> {
        geometry.validate()?;
        if gaussian.dim() != geometry.dim() {
            return Err(Error::DimensionMismatch {
                what: "shape prior dimension",
                expected: geometry.dim(),
                found: gaussian.dim(),
            });
        }
        if !(variance_inflation > 0.0) || !variance_inflation.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "variance inflation must be positive, got {variance_inflation}"
            )));
        }
        Ok(Self {
            gaussian,
            geometry,
            variance_inflation,
        })
    }

    pub fn gaussian(&self) -> &LowRankGaussian {
        &self.gaussian
    }

    pub fn geometry(&self) -> ShapeGeometry {
        self.geometry
    }

    pub fn q_ppca(&self) -> usize {
        self.gaussian.rank()
    }

    pub fn variance_inflation(&self) -> f64 {
        self.variance_inflation
    }

    pub fn with_variance_inflation(&self, variance_inflation: f64) -> Result<Self> {
        Self::new(self.gaussian.clone(), self.geometry, variance_inflation)
    }

    pub fn mean_field(&self) -> BoundaryField {
        BoundaryField::from_vector(self.geometry, self.gaussian.mean()).expect("prior mean is finite")
    }

    pub fn log_likelihood(&self, field: &BoundaryField) -> Result<f64> {
        if field.geometry() != self.geometry {
            return Err(Error::InvalidData("field geometry differs from prior".into()));
        }
        self.gaussian.log_pdf(&field.to_vector())
    }

    /// `p(b_j | b_∖j)` for column `j`, with its covariance multiplied by the
    /// variance inflation factor. `rest` holds the other columns in stacked
    /// order with column `j` removed.
    pub fn column_conditional(&self, column: usize, rest: &DVector<f64>) -> Result<DenseGaussian> {
        if column >= self.geometry.columns {
            return Err(Error::IndexOutOfRange {
                index: column,
                dim: self.geometry.columns,
            });
        }
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("conditioning values must be finite".into()));
        }
        let block = self.geometry.column_block(column);
        let observed: Vec<usize> = (0..self.geometry.dim()).filter(|i| !block.contains(i)).collect();
        let mut cond = self.gaussian.conditional(&observed, rest)?;
        cond.covariance *= self.variance_inflation;
        Ok(cond)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut w = model_header(SHAPE_TAG);
        w.usize_u32(g.boundaries);
        w.usize_u32(g.columns);
        w.usize_u32(g.bscans);
        w.usize_u32(self.q_ppca());
        w.f64(self.variance_inflation);
        w.f64s(self.gaussian.mean().iter());
        let f = self.gaussian.factor();
        for r in 0..f.nrows() {
            w.f64s(f.row(r).iter());
        }
        w.f64(self.gaussian.noise_variance());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = read_model_header(data, SHAPE_TAG, "shape model")?;
        let boundaries = r.usize()?;
        let columns = r.usize()?;
        let bscans = r.usize()?;
        let q = r.usize()?;
        let inflation = r.f64()?;
        let geometry = ShapeGeometry::new(boundaries, columns, bscans).map_err(|e| Error::Format(e.to_string()))?;
        let d = geometry.dim();
        let mean = DVector::from_vec(r.f64s(d)?);
        let factor = DMatrix::from_row_slice(d, q, &r.f64s(d.checked_mul(q).ok_or_else(|| Error::Format("size overflow".into()))?)?);
        let noise = r.f64()?;
        r.finish()?;
        let gaussian = LowRankGaussian::new(mean, factor, noise).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(gaussian, geometry, inflation).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

/// Maximum-likelihood PPCA fit.
///
/// `W = U_q·(Λ_q − σ²)^½` from the top eigenpairs of the `1/(n−1)` sample
/// covariance and `σ²` = mean of the discarded eigenvalues (floored). When
/// `n − 1 < D` the eigenproblem is solved on the n×n Gram matrix instead.
pub fn fit_ppca(training: &[BoundaryField], q_ppca: usize, variance_inflation: f64) -> Result<PpcaFit> {
    if q_ppca < 1 {
        return Err(Error::InvalidParameter("q_ppca must be at least 1".into()));
    }
    if training.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 training fields, got {}",
            training.len()
        )));
    }
    let geometry = training[0].geometry();
    for (i, f) in training.iter().enumerate() {
        if f.geometry() != geometry {
            return Err(Error::InvalidData(format!(
                "training field {i} has geometry {:?}, expected {geometry:?}",
                f.geometry()
            )));
        }
        if !f.is_strictly_ordered() {
            return Err(Error::InvalidData(format!(
                "training field {i} violates the strict boundary ordering"
            )));
        }
    }
    let d = geometry.dim();
    let n = training.len();
    let mut warnings = Vec::new();

    // canonical order makes the fit bitwise independent of list order
    let mut rows: Vec<DVector<f64>> = training.iter().map(|f| f.to_vector()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let anchor = rows[0].clone();
    let mut mean = DVector::zeros(d);
    for r in &rows {
        mean += r - &anchor;
    }
    let mean = &anchor + mean / n as f64;

    let mut centered = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        centered.set_row(i, &(r - &mean).transpose());
    }
    let denom = (n - 1) as f64;

    // eigenpairs (λ, v) of the covariance, sorted descending
    let (eigenvalues, eigenvectors, trace) = if n - 1 < d {
        let gram = &centered * centered.transpose() / denom;
        let trace = gram.trace();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vecs: Vec<DVector<f64>> = order
            .iter()
            .zip(&vals)
            .map(|(&i, &lam)| {
                let v = centered.tr_mul(&eig.eigenvectors.column(i));
                if lam > 0.0 {
                    v / (denom * lam).sqrt()
                } else {
                    DVector::zeros(d)
                }
            })
            .collect();
        (vals, vecs, trace)
    } else {
        let cov = centered.tr_mul(&centered) / denom;
        let trace = cov.trace();
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vecs = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        (vals, vecs, trace)
    };

    let mut q = q_ppca;
    if q > d - 1 {
        warnings.push(format!("q_ppca {q_ppca} exceeds dimension − 1 = {}; truncated", d - 1));
        q = d - 1;
    }
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let threshold = VARIANCE_FLOOR.max(1e-12 * lambda_max);
    let positive = eigenvalues.iter().take_while(|&&l| l > threshold).count();
    if positive < q {
        warnings.push(format!(
            "only {positive} positive covariance eigenvalues; q_ppca truncated from {q} to {}",
            positive.max(1)
        ));
        q = positive.max(1);
    }
    q = q.min(d.saturating_sub(1)).max(1).min(d);

    let kept: f64 = eigenvalues.iter().take(q).sum();
    let sigma2 = if d > q {
        ((trace - kept) / (d - q) as f64).max(VARIANCE_FLOOR)
    } else {
        VARIANCE_FLOOR
    };
    let mut factor = DMatrix::zeros(d, q);
    for c in 0..q.min(eigenvectors.len()) {
        let scale = (eigenvalues[c] - sigma2).max(0.0).sqrt();
        factor.set_column(c, &(&eigenvectors[c] * scale));
    }

    let gaussian = LowRankGaussian::new(mean, factor, sigma2)?;
    Ok(PpcaFit {
        prior: ShapePrior::new(gaussian, geometry, variance_inflation)?,
        warnings,
    })
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Per-column coupling quantities derived once from a prior.
///
/// For column `j`, `Σ_{j|∖j} = (K_jj)⁻¹` and the gain rows
/// `γ̃_k = (Σ_{j|∖j}·K_{j,:})_k − e_{(k,j)}`, so that the conditional mean is
/// `μ_j − Γ̃_j·(b − μ)`. Nothing here is D×D; the gain is applied
/// through the Woodbury form of `K`.
#[derive(Debug, Clone)]
pub struct ShapeCoupling {
    gaussian: LowRankGaussian,
    geometry: ShapeGeometry,
    conditional_cov: Vec<DMatrix<f64>>,
    /// Inflated, floored conditional variances `v[k, j]`.
    variances: DMatrix<f64>,
    /// `(slope, intercept, variance)` of `b[k, j] | b[k−1, j]`, stored at `k`.
    neighbor: Vec<Vec<(f64, f64, f64)>>,
}

impl ShapeCoupling {
    pub fn new(prior: &ShapePrior) -> Result<Self> {
        let geometry = prior.geometry();
        let g = prior.gaussian();
        let nb = geometry.boundaries;
        let mut conditional_cov = Vec::with_capacity(geometry.columns);
        let mut variances = DMatrix::zeros(nb, geometry.columns);
        let mut neighbor = Vec::with_capacity(geometry.columns);
        for j in 0..geometry.columns {
            let block: Vec<usize> = geometry.column_block(j).collect();
            let k_jj = g.precision_block(&block);
            let cov = Cholesky::new(k_jj)
                .ok_or_else(|| Error::Singular(format!("precision block of column {j} is singular")))?
                .inverse();
            for k in 0..nb {
                variances[(k, j)] = (cov[(k, k)] * prior.variance_inflation()).max(VARIANCE_FLOOR);
            }
            let mut nbr = vec![(0.0, 0.0, 1.0)];
            for k in 1..nb {
                nbr.push(g.pair_regression(geometry.index(k - 1, j), geometry.index(k, j))?);
            }
            conditional_cov.push(cov);
            neighbor.push(nbr);
        }
        Ok(Self {
            gaussian: g.clone(),
            geometry,
            conditional_cov,
            variances,
            neighbor,
        })
    }

    pub fn geometry(&self) -> ShapeGeometry {
        self.geometry
    }

    pub fn gaussian(&self) -> &LowRankGaussian {
        &self.gaussian
    }

    /// Un-inflated `Σ_{j|∖j}`.
    pub fn conditional_covariance(&self, column: usize) -> &DMatrix<f64> {
        &self.conditional_cov[column]
    }

    /// Inflated conditional variance `v[k, j]` used by the regularizer.
    pub fn variance(&self, boundary: usize, column: usize) -> f64 {
        self.variances[(boundary, column)]
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    /// `(slope, intercept, variance)` such that
    /// `b[k, j] | b[k−1, j] = x ~ N(intercept + slope·x, variance)`; `k ≥ 1`.
    pub fn neighbor(&self, boundary: usize, column: usize) -> (f64, f64, f64) {
        debug_assert!(boundary >= 1);
        self.neighbor[column][boundary]
    }

    /// `Γ̃_j·x` for every column, as an Nb×M matrix.
    pub fn gain_apply(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = &self.gaussian;
        let nb = self.geometry.boundaries;
        let u = g.inner_solve(&g.factor().tr_mul(x));
        let wu = g.factor() * u;
        let mut out = DMatrix::zeros(nb, self.geometry.columns);
        for j in 0..self.geometry.columns {
            let blk = self.geometry.column_block(j);
            let t = (x.rows(blk.start, nb) - wu.rows(blk.start, nb)) / g.noise_variance();
            let r = &self.conditional_cov[j] * t - x.rows(blk.start, nb);
            out.set_column(j, &r);
        }
        out
    }

    /// `Σ_j Γ̃_jᵀ·y_j` for an Nb×M coefficient matrix `y`.
    pub fn gain_transpose(&self, y: &DMatrix<f64>) -> DVector<f64> {
        let nb = self.geometry.boundaries;
        let d = self.geometry.dim();
        let mut z = DVector::zeros(d);
        for j in 0..self.geometry.columns {
            let zj = &self.conditional_cov[j] * y.column(j);
            z.rows_mut(j * nb, nb).copy_from(&zj);
        }
        self.gaussian.precision_mul(&z) - DVector::from_column_slice(y.as_slice())
    }

    /// Conditional means `(μ_{j|∖j})_k` evaluated at `b`, as an Nb×M matrix.
    pub fn conditional_means(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let mu = self.gaussian.mean();
        let shift = self.gain_apply(&(b - mu));
        DMatrix::from_column_slice(self.geometry.boundaries, self.geometry.columns, mu.as_slice()) - shift
    }

    /// `P̃·x` with `P̃ = Σ_{k,j} γ̃_kᵀ·γ̃_k / v[k, j]`.
    pub fn augment_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let y = self.gain_apply(x).component_div(&self.variances);
        self.gain_transpose(&y)
    }

    /// `p̃ = Σ_{k,j} (E[c_{k,j}] − μ_{k,j})·γ̃_kᵀ / v[k, j]`.
    pub fn augment_vector(&self, expected_rows: &DMatrix<f64>) -> DVector<f64> {
        let mu = DMatrix::from_column_slice(
            self.geometry.boundaries,
            self.geometry.columns,
            self.gaussian.mean().as_slice(),
        );
        let y = (expected_rows - mu).component_div(&self.variances);
        self.gain_transpose(&y)
    }

    /// Dense `P̃`, assembled by applying it to the unit vectors.
    pub fn augment_dense(&self) -> DMatrix<f64> {
        let d = self.geometry.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut e = DVector::zeros(d);
        for i in 0..d {
            e[i] = 1.0;
            out.set_column(i, &self.augment_apply(&e));
            e[i] = 0.0;
        }
        (&out + out.transpose()) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ordered_field(rng: &mut ChaCha8Rng, nb: usize, m: usize) -> BoundaryField {
        let mut v = DMatrix::zeros(nb, m);
        for j in 0..m {
            let mut h = 10.0 + rng.gen_range(-2.0..2.0);
            for k in 0..nb {
                v[(k, j)] = h;
                h += 5.0 + rng.gen_range(0.0..3.0);
            }
        }
        BoundaryField::new(v, 1).unwrap()
    }

    fn random_prior(nb: usize, m: usize, seed: u64) -> ShapePrior {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields: Vec<_> = (0..30).map(|_| ordered_field(&mut rng, nb, m)).collect();
        fit_ppca(&fields, 3, 10.0).unwrap().prior
    }

    #[test]
    fn exact_low_rank_training_is_reproduced() {
        // fields = base + a·u + c·v, so the empirical covariance has rank 2
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (nb, m) = (2, 4);
        let base = DVector::from_vec(vec![5.0, 20.0, 6.0, 21.0, 7.0, 22.0, 8.0, 23.0]);
        let u = DVector::from_fn(8, |_, _| rng.gen_range(-0.5..0.5));
        let v = DVector::from_fn(8, |_, _| rng.gen_range(-0.5..0.5));
        let geom = ShapeGeometry::new(nb, m, 1).unwrap();
        let fields: Vec<_> = (0..12)
            .map(|_| {
                let x = &base + &u * rng.gen_range(-2.0..2.0) + &v * rng.gen_range(-2.0..2.0);
                BoundaryField::from_vector(geom, &x).unwrap()
            })
            .collect();
        let fit = fit_ppca(&fields, 2, 10.0).unwrap();
        // dense eigen-free oracle: the plain 1/(n−1) covariance
        let n = fields.len() as f64;
        let mean = fields.iter().fold(DVector::zeros(8), |a, f| a + f.to_vector()) / n;
        let mut cov = DMatrix::zeros(8, 8);
        for f in &fields {
            let d = f.to_vector() - &mean;
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        assert!((fit.prior.gaussian().covariance_dense() - cov).norm() < 1e-8);
        assert!((fit.prior.gaussian().mean() - mean).amax() < 1e-12);
    }

    #[test]
    fn identical_training_fields_degenerate() {
        let f = BoundaryField::new(DMatrix::from_row_slice(2, 2, &[1.1, 2.3, 4.7, 5.9]), 1).unwrap();
        let fit = fit_ppca(&[f.clone(), f.clone(), f.clone()], 2, 10.0).unwrap();
        let g = fit.prior.gaussian();
        assert_eq!(g.noise_variance(), VARIANCE_FLOOR);
        assert!(g.factor().iter().all(|&v| v == 0.0));
        assert_eq!(g.mean(), &f.to_vector());
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn heldout_loglik_matches_dense_gaussian() {
        let prior = random_prior(3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = ordered_field(&mut rng, 3, 5);
        let cov = prior.gaussian().covariance_dense();
        let r = x.to_vector() - prior.gaussian().mean();
        let dense = -0.5
            * (15.0 * crate::gaussian::LN_2PI
                + cov.determinant().ln()
                + r.dot(&(cov.try_inverse().unwrap() * &r)));
        assert!((prior.log_likelihood(&x).unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ordered_field(&mut rng, 2, 3);
        let b = ordered_field(&mut rng, 2, 4);
        assert!(fit_ppca(&[a.clone(), a.clone()], 0, 10.0).is_err());
        assert!(fit_ppca(&[a.clone(), b], 1, 10.0).is_err());
        assert!(fit_ppca(&[a.clone()], 1, 10.0).is_err());
        let unordered = BoundaryField::new(DMatrix::from_row_slice(2, 1, &[5.0, 3.0]), 1).unwrap();
        assert!(fit_ppca(&[unordered.clone(), unordered], 1, 10.0).is_err());
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fields: Vec<_> = (0..9).map(|_| ordered_field(&mut rng, 2, 3)).collect();
        let a = fit_ppca(&fields, 2, 10.0).unwrap().prior;
        fields.reverse();
        fields.swap(0, 4);
        let b = fit_ppca(&fields, 2, 10.0).unwrap().prior;
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn single_column_conditional_is_marginal() {
        let prior = random_prior(3, 1, 5);
        let c = prior.column_conditional(0, &DVector::zeros(0)).unwrap();
        assert!((&c.mean - prior.gaussian().mean()).amax() < 1e-12);
        let cov = prior.gaussian().covariance_dense() * 10.0;
        assert!((c.covariance - cov).amax() < 1e-9);
    }

    #[test]
    fn column_conditional_matches_gaussian_conditional_and_scales() {
        let prior = random_prior(2, 4, 6);
        let rest = DVector::from_vec(vec![9.0, 16.0, 11.0, 18.0, 10.0, 17.5]);
        let observed = [0usize, 1, 4, 5, 6, 7];
        let direct = prior.gaussian().conditional(&observed, &rest).unwrap();
        let inflated = prior.column_conditional(1, &rest).unwrap();
        assert_eq!(inflated.mean, direct.mean);
        assert!((&inflated.covariance - &direct.covariance * 10.0).amax() < 1e-12);
        let plain = prior.with_variance_inflation(1.0).unwrap().column_conditional(1, &rest).unwrap();
        assert_eq!(plain.mean, inflated.mean);
        assert!((plain.covariance * 10.0 - inflated.covariance).amax() < 1e-12);
    }

    #[test]
    fn conditional_covariance_ignores_conditioning_values() {
        let prior = random_prior(2, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = prior.column_conditional(2, &DVector::zeros(4)).unwrap().covariance;
        for _ in 0..5 {
            let rest = DVector::from_fn(4, |_, _| rng.gen_range(-50.0..50.0));
            let c = prior.column_conditional(2, &rest).unwrap();
            assert!((&c.covariance - &base).amax() < 1e-12);
        }
    }

    #[test]
    fn coupling_gain_matches_dense_conditional() {
        let prior = random_prior(2, 4, 9);
        let coupling = ShapeCoupling::new(&prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = DVector::from_fn(8, |_, _| rng.gen_range(0.0..30.0));
        let means = coupling.conditional_means(&b);
        for j in 0..4 {
            let observed: Vec<usize> = (0..8).filter(|i| i / 2 != j).collect();
            let vals = DVector::from_iterator(6, observed.iter().map(|&i| b[i]));
            let c = prior.gaussian().conditional(&observed, &vals).unwrap();
            for k in 0..2 {
                assert!((means[(k, j)] - c.mean[k]).abs() < 1e-9);
                assert!((coupling.variance(k, j) - 10.0 * c.covariance[(k, k)]).abs() < 1e-9);
            }
        }
        // P̃ is symmetric and gain_transpose is the adjoint of gain_apply
        let x = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let lhs = coupling.gain_apply(&x).dot(&y);
        let rhs = x.dot(&coupling.gain_transpose(&y));
        assert!((lhs - rhs).abs() < 1e-9);
        let p = coupling.augment_dense();
        assert!((&p - p.transpose()).amax() < 1e-9);
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let prior = random_prior(2, 3, 10);
        let bytes = prior.to_bytes();
        let back = ShapePrior::from_bytes(&bytes).unwrap();
        assert_eq!(back, prior);
        assert_eq!(back.to_bytes(), bytes);

        let err = ShapePrior::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")));

        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = ShapePrior::from_bytes(&wrong).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
        assert!(err.to_string().contains('7') && err.to_string().contains('1'));
    }
}
