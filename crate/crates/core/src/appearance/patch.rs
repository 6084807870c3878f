//! Mean-subtracted image patches and their PCA projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::Scan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub rows: usize,
    pub cols: usize,
}

impl PatchSize {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows % 2 == 0 || cols % 2 == 0 {
            return Err(Error::InvalidParameter(format!("patch size {rows}×{cols} must be odd in both directions")));
        }
        Ok(Self { rows, cols })
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Mirror an index into `0..len` without repeating the edge sample
/// (`-1 → 1`, `len → len − 2`).
pub(crate) fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = idx.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Fills `out` (row-major, `size.pixels()` long) with the patch centered on
/// `(row, column)`, reflected at the image border and at the borders of the
/// B-scan that owns `column`, then subtracts the patch mean.
pub fn raw_patch(scan: &Scan, row: usize, column: usize, size: PatchSize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), size.pixels());
    let cpb = scan.columns_per_bscan();
    let first = column / cpb * cpb;
    let local = (column - first) as isize;
    let hr = (size.rows / 2) as isize;
    let hc = (size.cols / 2) as isize;
    let mut sum = 0.0;
    let mut p = 0;
    for dr in -hr..=hr {
        let r = reflect(row as isize + dr, scan.rows());
        for dc in -hc..=hc {
            let c = first + reflect(local + dc, cpb);
            let v = scan.pixel(r, c);
            out[p] = v;
            sum += v;
            p += 1;
        }
    }
    let mean = sum / out.len() as f64;
    for v in out.iter_mut() {
        *v -= mean;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchProjector {
    size: PatchSize,
    /// `pixels × q_pca`, orthonormal columns in decreasing-eigenvalue order.
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl PatchProjector {
    pub fn new(size: PatchSize, basis: DMatrix<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        if basis.nrows() != size.pixels() {
            return Err(Error::DimensionMismatch {
                what: "projection basis rows",
                expected: size.pixels(),
                found: basis.nrows(),
            });
        }
        if eigenvalues.len() != basis.ncols() {
            return Err(Error::DimensionMismatch {
                what: "projector eigenvalues",
                expected: basis.ncols(),
                found: eigenvalues.len(),
            });
        }
        Ok(Self {
            size,
            basis,
            eigenvalues,
        })
    }

    pub fn size(&self) -> PatchSize {
        self.size
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn q_pca(&self) -> usize {
        self.basis.ncols()
    }

    /// Patch-covariance eigenvalues of the retained components.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, raw: &[f64]) -> DVector<f64> {
        let q = self.basis.ncols();
        let mut y = DVector::zeros(q);
        for c in 0..q {
            let col = self.basis.column(c);
            y[c] = col.iter().zip(raw).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn extract(&self, scan: &Scan, row: usize, column: usize) -> DVector<f64> {
        let mut buf = vec![0.0; self.size.pixels()];
        raw_patch(scan, row, column, self.size, &mut buf);
        self.project(&buf)
    }
}

/// PCA basis from a matrix whose rows are (mean-subtracted) patches.
pub fn fit_projector_from_patches(patches: &DMatrix<f64>, size: PatchSize, q_pca: usize) -> Result<PatchProjector> {
    let n = patches.nrows();
    let p = size.pixels();
    if patches.ncols() != p {
        return Err(Error::DimensionMismatch {
            what: "patch length",
            expected: p,
            found: patches.ncols(),
        });
    }
    if q_pca == 0 || q_pca > p {
        return Err(Error::InvalidParameter(format!("q_pca must lie in 1..={p}, got {q_pca}")));
    }
    if n < q_pca.max(2) {
        return Err(Error::InvalidData(format!("{n} patches are too few for q_pca = {q_pca}")));
    }
    let mean = patches.row_mean();
    let mut centered = patches.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(p, q_pca);
    let mut eigenvalues = Vec::with_capacity(q_pca);
    for (c, &i) in order.iter().take(q_pca).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // fix the sign so the basis is reproducible: largest entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        basis.set_column(c, &v);
        eigenvalues.push(eig.eigenvalues[i]);
    }
    Ok(PatchProjector { size, basis, eigenvalues })
}

/// Draws `n_samples` patch positions uniformly over the training scans and
/// fits the projection basis to them.
pub fn fit_projector(scans: &[&Scan], n_samples: usize, size: PatchSize, q_pca: usize, seed: u64) -> Result<PatchProjector> {
    if scans.is_empty() {
        return Err(Error::InvalidData("no scans to draw patches from".into()));
    }
    if n_samples < q_pca {
        return Err(Error::InvalidData(format!("{n_samples} samples are fewer than q_pca = {q_pca}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = DMatrix::zeros(n_samples, size.pixels());
    let mut buf = vec![0.0; size.pixels()];
    for s in 0..n_samples {
        let scan = scans[rng.gen_range(0..scans.len())];
        let i = rng.gen_range(0..scan.rows());
        let j = rng.gen_range(0..scan.columns());
        raw_patch(scan, i, j, size, &mut buf);
        patches.row_mut(s).copy_from_slice(&buf);
    }
    fit_projector_from_patches(&patches, size, q_pca)
}
