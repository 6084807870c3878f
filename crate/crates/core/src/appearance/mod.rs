//! Per-class Gaussian appearance models on projected patches.
//!
//! With `N_b` boundaries there are `N_b + 1` layer classes and `N_b`
//! transition classes. Class tables put the layers first
//! (`0..=N_b`) followed by the transitions (`N_b+1 .. 2·N_b+1`).

mod glasso;
mod patch;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use glasso::{glasso_objective, graphical_lasso, kkt_residual, GlassoFit, SparsePrecision};
pub use patch::{fit_projector, fit_projector_from_patches, raw_patch, PatchProjector, PatchSize};

use crate::error::{Error, Result};
use crate::gaussian::LN_2PI;
use crate::io::{self, model_header, read_model_header};
use crate::scan::Scan;
use crate::shape::BoundaryField;

const APPEARANCE_TAG: &[u8; 4] = b"APPR";

/// Relative ridge added to class covariances before the graphical lasso.
const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    /// Tissue layer `k` in `0..=N_b`; layer `k` lies above boundary `k`.
    Layer(usize),
    /// The row of boundary `k` in `0..N_b`.
    Transition(usize),
}

impl ClassLabel {
    pub fn index(self, boundaries: usize) -> usize {
        match self {
            ClassLabel::Layer(k) => k,
            ClassLabel::Transition(k) => boundaries + 1 + k,
        }
    }

    pub fn from_index(index: usize, boundaries: usize) -> Self {
        if index <= boundaries {
            ClassLabel::Layer(index)
        } else {
            ClassLabel::Transition(index - boundaries - 1)
        }
    }

    pub fn count(boundaries: usize) -> usize {
        2 * boundaries + 1
    }

    /// Label of `row` in a column with integer boundary rows `cuts`
    /// (strictly increasing).
    pub fn of_row(row: usize, cuts: &[usize]) -> Self {
        let mut layer = 0;
        for (k, &c) in cuts.iter().enumerate() {
            if row == c {
                return ClassLabel::Transition(k);
            }
            if row > c {
                layer = k + 1;
            }
        }
        ClassLabel::Layer(layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppearanceMode {
    Generative,
    Discriminative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceOptions {
    pub alpha_glasso: f64,
    pub q_pca: usize,
    pub patch_size: PatchSize,
    pub patches_per_class: usize,
    pub projector_samples: usize,
    pub glasso_tol: f64,
    pub glasso_max_iter: usize,
    pub beta_layer: bool,
    pub beta_transition: bool,
    pub mode: AppearanceMode,
    pub shared_across_bscans: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub mean: DVector<f64>,
    pub precision: SparsePrecision,
}

impl ClassModel {
    pub fn log_likelihood(&self, y: &DVector<f64>) -> f64 {
        let d = y - &self.mean;
        -0.5 * (y.len() as f64 * LN_2PI - self.precision.log_det() + self.precision.quad_form(&d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub projector: PatchProjector,
    pub boundaries: usize,
    pub classes: Vec<ClassModel>,
    pub alpha_glasso: f64,
    pub beta_layer: bool,
    pub beta_transition: bool,
    pub mode: AppearanceMode,
}

impl AppearanceModel {
    pub fn class(&self, label: ClassLabel) -> &ClassModel {
        &self.classes[label.index(self.boundaries)]
    }

    pub fn class_loglik(&self, scan: &Scan, row: usize, column: usize, label: ClassLabel) -> f64 {
        let y = self.projector.extract(scan, row, column);
        self.class(label).log_likelihood(&y)
    }

    /// `rows × classes` table of per-pixel class log-probabilities for one
    /// column. Generative mode gives raw log-likelihoods; discriminative mode
    /// renormalizes every row over all classes under a uniform class prior.
    /// The β switches are not applied here.
    pub fn column_class_table(&self, scan: &Scan, column: usize) -> DMatrix<f64> {
        let n = scan.rows();
        let c = self.classes.len();
        let size = self.projector.size();
        let mut table = DMatrix::zeros(n, c);
        let mut buf = vec![0.0; size.pixels()];
        for i in 0..n {
            raw_patch(scan, i, column, size, &mut buf);
            let y = self.projector.project(&buf);
            for (x, class) in self.classes.iter().enumerate() {
                table[(i, x)] = class.log_likelihood(&y);
            }
        }
        if self.mode == AppearanceMode::Discriminative {
            normalize_rows(&mut table);
        }
        table
    }
}

/// Per-row log-softmax (uniform class prior).
pub fn normalize_rows(table: &mut DMatrix<f64>) {
    for i in 0..table.nrows() {
        let mut row = table.row_mut(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Appearance models keyed by B-scan position, or a single shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceSet {
    models: Vec<AppearanceModel>,
    shared: bool,
}

impl AppearanceSet {
    pub fn shared(model: AppearanceModel) -> Self {
        Self {
            models: vec![model],
            shared: true,
        }
    }

    pub fn per_bscan(models: Vec<AppearanceModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidParameter("empty appearance model set".into()));
        }
        Ok(Self { models, shared: false })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn models(&self) -> &[AppearanceModel] {
        &self.models
    }

    pub fn boundaries(&self) -> usize {
        self.models[0].boundaries
    }

    pub fn model_for_bscan(&self, bscan: usize) -> Result<&AppearanceModel> {
        if self.shared {
            return Ok(&self.models[0]);
        }
        self.models.get(bscan).ok_or(Error::IndexOutOfRange {
            index: bscan,
            dim: self.models.len(),
        })
    }

    pub fn model_for_column(&self, scan: &Scan, column: usize) -> Result<&AppearanceModel> {
        self.model_for_bscan(column / scan.columns_per_bscan())
    }

    fn check_scan(&self, scan: &Scan) -> Result<()> {
        if scan.boundaries() != self.boundaries() {
            return Err(Error::DimensionMismatch {
                what: "scan boundaries vs appearance model",
                expected: self.boundaries(),
                found: scan.boundaries(),
            });
        }
        if !self.shared && self.models.len() != scan.bscans() {
            return Err(Error::DimensionMismatch {
                what: "per-B-scan appearance models vs scan B-scans",
                expected: self.models.len(),
                found: scan.bscans(),
            });
        }
        Ok(())
    }

    pub fn column_class_table(&self, scan: &Scan, column: usize) -> Result<DMatrix<f64>> {
        self.check_scan(scan)?;
        Ok(self.model_for_column(scan, column)?.column_class_table(scan, column))
    }

    /// Class tables of every column, computed in parallel.
    pub fn class_tables(&self, scan: &Scan) -> Result<Vec<DMatrix<f64>>> {
        self.check_scan(scan)?;
        (0..scan.columns())
            .into_par_iter()
            .map(|j| Ok(self.model_for_column(scan, j)?.column_class_table(scan, j)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = model_header(APPEARANCE_TAG);
        w.usize_u32(self.models.len());
        w.u8(self.shared as u8);
        w.bytes(&[0, 0, 0]);
        for m in &self.models {
            let size = m.projector.size();
            w.usize_u32(m.boundaries);
            w.usize_u32(size.rows);
            w.usize_u32(size.cols);
            w.usize_u32(m.projector.q_pca());
            w.f64(m.alpha_glasso);
            w.u8(m.beta_layer as u8);
            w.u8(m.beta_transition as u8);
            w.u8(match m.mode {
                AppearanceMode::Generative => 0,
                AppearanceMode::Discriminative => 1,
            });
            w.u8(0);
            w.f64s(m.projector.eigenvalues());
            let basis = m.projector.basis();
            for r in 0..basis.nrows() {
                w.f64s(basis.row(r).iter());
            }
            for class in &m.classes {
                w.f64s(class.mean.iter());
                w.f64(class.precision.log_det());
                w.usize_u32(class.precision.entries().len());
                for &(i, j, v) in class.precision.entries() {
                    w.u32(i);
                    w.u32(j);
                    w.f64(v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = read_model_header(data, APPEARANCE_TAG, "appearance model")?;
        let count = r.usize()?;
        let shared = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad shared flag {v}"))),
        };
        r.take(3)?;
        if count == 0 || (shared && count != 1) {
            return Err(Error::Format(format!("bad model count {count}")));
        }
        let mut models = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let boundaries = r.usize()?;
            let size = PatchSize::new(r.usize()?, r.usize()?).map_err(|e| Error::Format(e.to_string()))?;
            let q = r.usize()?;
            let alpha_glasso = r.f64()?;
            let flag = |v: u8| match v {
                0 => Ok(false),
                1 => Ok(true),
                v => Err(Error::Format(format!("bad switch value {v}"))),
            };
            let beta_layer = flag(r.u8()?)?;
            let beta_transition = flag(r.u8()?)?;
            let mode = match r.u8()? {
                0 => AppearanceMode::Generative,
                1 => AppearanceMode::Discriminative,
                v => return Err(Error::Format(format!("bad appearance mode {v}"))),
            };
            r.u8()?;
            let eigenvalues = r.f64s(q)?;
            let basis = DMatrix::from_row_slice(size.pixels(), q, &r.f64s(size.pixels() * q)?);
            let projector = PatchProjector::new(size, basis, eigenvalues).map_err(|e| Error::Format(e.to_string()))?;
            let mut classes = Vec::new();
            for _ in 0..ClassLabel::count(boundaries) {
                let mean = DVector::from_vec(r.f64s(q)?);
                let log_det = r.f64()?;
                let nnz = r.usize()?;
                let mut entries = Vec::with_capacity(nnz.min(q * q));
                for _ in 0..nnz {
                    entries.push((r.u32()?, r.u32()?, r.f64()?));
                }
                classes.push(ClassModel {
                    mean,
                    precision: SparsePrecision::from_parts(q, entries, log_det)?,
                });
            }
            models.push(AppearanceModel {
                projector,
                boundaries,
                classes,
                alpha_glasso,
                beta_layer,
                beta_transition,
                mode,
            });
        }
        r.finish()?;
        Ok(Self { models, shared })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

/// Integer boundary rows of one column: rounded, clamped into the image.
pub fn rounded_rows(truth: &BoundaryField, column: usize, rows: usize) -> Vec<usize> {
    (0..truth.geometry().boundaries)
        .map(|k| truth.get(k, column).round().clamp(0.0, (rows - 1) as f64) as usize)
        .collect()
}

/// Fits the appearance model of the given training scans, restricted to the
/// columns in `columns` (local to each scan).
fn fit_model(
    training: &[(&Scan, &BoundaryField)],
    columns: &[usize],
    opts: &AppearanceOptions,
    seed: u64,
) -> Result<AppearanceModel> {
    let boundaries = training[0].0.boundaries();
    let scans: Vec<&Scan> = training.iter().map(|(s, _)| *s).collect();

    // projector from patches drawn over the selected columns only
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = DMatrix::zeros(opts.projector_samples, opts.patch_size.pixels());
    let mut buf = vec![0.0; opts.patch_size.pixels()];
    if opts.projector_samples < opts.q_pca {
        return Err(Error::InvalidData(format!(
            "{} projector samples are fewer than q_pca = {}",
            opts.projector_samples, opts.q_pca
        )));
    }
    for s in 0..opts.projector_samples {
        use rand::Rng;
        let scan = scans[rng.gen_range(0..scans.len())];
        let i = rng.gen_range(0..scan.rows());
        let j = columns[rng.gen_range(0..columns.len())];
        raw_patch(scan, i, j, opts.patch_size, &mut buf);
        raw.row_mut(s).copy_from_slice(&buf);
    }
    let projector = fit_projector_from_patches(&raw, opts.patch_size, opts.q_pca)?;

    // candidate pixels per class
    let n_classes = ClassLabel::count(boundaries);
    let mut candidates: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n_classes];
    for (t, (scan, truth)) in training.iter().enumerate() {
        for &j in columns {
            let cuts = rounded_rows(truth, j, scan.rows());
            for i in 0..scan.rows() {
                let label = ClassLabel::of_row(i, &cuts);
                candidates[label.index(boundaries)].push((t, i, j));
            }
        }
    }

    let mut classes = Vec::with_capacity(n_classes);
    for (x, cands) in candidates.iter().enumerate() {
        if cands.len() < 2 {
            return Err(Error::InvalidData(format!(
                "class {:?} has {} training pixels",
                ClassLabel::from_index(x, boundaries),
                cands.len()
            )));
        }
        let chosen: Vec<usize> = if cands.len() <= opts.patches_per_class {
            (0..cands.len()).collect()
        } else {
            let mut idx = sample(&mut rng, cands.len(), opts.patches_per_class).into_vec();
            idx.sort_unstable();
            idx
        };
        let q = opts.q_pca;
        let mut ys = DMatrix::zeros(chosen.len(), q);
        for (r, &c) in chosen.iter().enumerate() {
            let (t, i, j) = cands[c];
            raw_patch(scans[t], i, j, opts.patch_size, &mut buf);
            ys.set_row(r, &projector.project(&buf).transpose());
        }
        let n = ys.nrows() as f64;
        let mean = ys.row_mean().transpose();
        let mut centered = ys.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.tr_mul(&centered) / (n - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        let ridge = COVARIANCE_RIDGE * (cov.trace() / q as f64).max(1e-12);
        for d in 0..q {
            cov[(d, d)] += ridge;
        }
        let fit = graphical_lasso(&cov, opts.alpha_glasso, opts.glasso_tol, opts.glasso_max_iter)?;
        classes.push(ClassModel {
            mean,
            precision: SparsePrecision::from_dense(&fit.precision)?,
        });
    }

    Ok(AppearanceModel {
        projector,
        boundaries,
        classes,
        alpha_glasso: opts.alpha_glasso,
        beta_layer: opts.beta_layer,
        beta_transition: opts.beta_transition,
        mode: opts.mode,
    })
}

/// Learns the projector and one Gaussian per class from labeled scans.
/// Transition patches are centered on the rounded ground-truth rows; layer
/// patches come from the rows strictly between adjacent boundaries.
pub fn fit_appearance(training: &[(&Scan, &BoundaryField)], opts: &AppearanceOptions) -> Result<AppearanceSet> {
    if training.is_empty() {
        return Err(Error::InvalidData("no training scans".into()));
    }
    let first = training[0].0;
    for (s, t) in training {
        if s.rows() != first.rows() || s.columns() != first.columns() || s.bscans() != first.bscans() || s.boundaries() != first.boundaries() {
            return Err(Error::InvalidData("training scans have different geometries".into()));
        }
        if t.geometry() != s.shape_geometry() {
            return Err(Error::InvalidData("ground truth geometry does not match its scan".into()));
        }
    }
    if opts.shared_across_bscans || first.bscans() == 1 {
        let columns: Vec<usize> = (0..first.columns()).collect();
        let model = fit_model(training, &columns, opts, opts.seed)?;
        return Ok(if first.bscans() == 1 && !opts.shared_across_bscans {
            AppearanceSet::per_bscan(vec![model])?
        } else {
            AppearanceSet::shared(model)
        });
    }
    let cpb = first.columns_per_bscan();
    let models = (0..first.bscans())
        .into_par_iter()
        .map(|b| {
            let columns: Vec<usize> = (b * cpb..(b + 1) * cpb).collect();
            fit_model(training, &columns, opts, opts.seed.wrapping_add(b as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    AppearanceSet::per_bscan(models)
}
