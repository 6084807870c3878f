//! Unsigned boundary error and the cross-validation harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{segment_file, train};
use crate::scan::ScanFile;
use crate::shape::BoundaryField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub scans: usize,
    pub pixel_pitch_um: f64,
    /// `E^k = M⁻¹ Σ_j |ĉ_{k,j} − c̃_{k,j}|`, averaged over scans.
    pub per_boundary_px: Vec<f64>,
    pub per_boundary_um: Vec<f64>,
    /// Mean over boundaries.
    pub mean_px: f64,
    pub mean_um: f64,
    /// Standard deviation of the per-scan `mean_um` (0 for a single scan).
    pub sd_um: f64,
    /// Mean error (μm) over uniform column regions.
    pub regions_um: Vec<f64>,
}

impl ErrorReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10}", "boundary", "px", "um");
        for (k, (p, u)) in self.per_boundary_px.iter().zip(&self.per_boundary_um).enumerate() {
            let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", k, p, u);
        }
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", "mean", self.mean_px, self.mean_um);
        let _ = writeln!(s, "{:<10} {:>10} {:>10.4}", "sd", "", self.sd_um);
        if self.regions_um.len() > 1 {
            for (r, u) in self.regions_um.iter().enumerate() {
                let _ = writeln!(s, "{:<10} {:>10} {:>10.4}", format!("region {r}"), "", u);
            }
        }
        let _ = writeln!(s, "scans {}  pitch {} um/px", self.scans, self.pixel_pitch_um);
        s
    }
}

pub fn unsigned_error(estimate: &BoundaryField, truth: &BoundaryField, pixel_pitch_um: f64, regions: usize) -> Result<ErrorReport> {
    if estimate.geometry() != truth.geometry() {
        return Err(Error::InvalidData(format!(
            "estimate geometry {:?} differs from truth {:?}",
            estimate.geometry(),
            truth.geometry()
        )));
    }
    if !(pixel_pitch_um > 0.0) {
        return Err(Error::InvalidParameter(format!("pixel pitch must be positive, got {pixel_pitch_um}")));
    }
    let g = truth.geometry();
    if regions == 0 || regions > g.columns {
        return Err(Error::InvalidParameter(format!("{regions} regions for {} columns", g.columns)));
    }
    let diff = (estimate.values() - truth.values()).abs();
    let per_boundary_px: Vec<f64> = (0..g.boundaries).map(|k| diff.row(k).sum() / g.columns as f64).collect();
    let mean_px = per_boundary_px.iter().sum::<f64>() / g.boundaries as f64;
    let regions_um = (0..regions)
        .map(|r| {
            let (lo, hi) = (r * g.columns / regions, (r + 1) * g.columns / regions);
            let cols = diff.columns(lo, hi - lo);
            cols.sum() / (cols.len() as f64) * pixel_pitch_um
        })
        .collect();
    Ok(ErrorReport {
        scans: 1,
        pixel_pitch_um,
        per_boundary_um: per_boundary_px.iter().map(|v| v * pixel_pitch_um).collect(),
        per_boundary_px,
        mean_px,
        mean_um: mean_px * pixel_pitch_um,
        sd_um: 0.0,
        regions_um,
    })
}

/// Combines reports with every scan weighted equally.
pub fn aggregate(reports: &[ErrorReport]) -> Result<ErrorReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidData("no reports to aggregate".into()))?;
    if reports.iter().any(|r| {
        r.pixel_pitch_um != first.pixel_pitch_um
            || r.per_boundary_px.len() != first.per_boundary_px.len()
            || r.regions_um.len() != first.regions_um.len()
    }) {
        return Err(Error::InvalidData("reports differ in pitch, boundaries or regions".into()));
    }
    let total: usize = reports.iter().map(|r| r.scans).sum();
    let wmean = |f: &dyn Fn(&ErrorReport) -> f64| reports.iter().map(|r| f(r) * r.scans as f64).sum::<f64>() / total as f64;
    let per_boundary_px: Vec<f64> = (0..first.per_boundary_px.len()).map(|k| wmean(&|r| r.per_boundary_px[k])).collect();
    let mean_px = per_boundary_px.iter().sum::<f64>() / per_boundary_px.len() as f64;
    let mean_um = mean_px * first.pixel_pitch_um;
    // pooled second moment of per-scan means
    let second = wmean(&|r| r.sd_um.powi(2) * (r.scans.max(2) - 1) as f64 / r.scans as f64 + r.mean_um.powi(2));
    let var_pop = (second - mean_um.powi(2)).max(0.0);
    let sd_um = if total > 1 { (var_pop * total as f64 / (total - 1) as f64).sqrt() } else { 0.0 };
    Ok(ErrorReport {
        scans: total,
        pixel_pitch_um: first.pixel_pitch_um,
        per_boundary_um: per_boundary_px.iter().map(|v| v * first.pixel_pitch_um).collect(),
        per_boundary_px,
        mean_px,
        mean_um,
        sd_um,
        regions_um: (0..first.regions_um.len()).map(|r| wmean(&|x| x.regions_um[r])).collect(),
    })
}

/// Fold index of every scan: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidParameter(format!("{folds} folds for {n} scans")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub held_out: Vec<usize>,
    pub report: ErrorReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub index: usize,
    pub report: ErrorReport,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub scans: Vec<ScanResult>,
    pub report: ErrorReport,
}

/// k-fold cross-validation: train on the other folds, segment the held-out
/// scans, and report the unsigned error. Folds run in parallel.
pub fn cross_validate(dataset: &[ScanFile], config: &RunConfig) -> Result<CrossValidation> {
    let n = dataset.len();
    let assignment = fold_assignment(n, config.eval.folds, config.seed)?;
    if let Some(i) = dataset.iter().position(|f| f.truth.is_none()) {
        return Err(Error::InvalidData(format!("scan {i} has no ground truth")));
    }
    let fold_runs: Vec<Result<(FoldResult, Vec<ScanResult>)>> = (0..config.eval.folds)
        .into_par_iter()
        .map(|fold| {
            let held_out: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
            let training: Vec<ScanFile> = (0..n).filter(|&i| assignment[i] != fold).map(|i| dataset[i].clone()).collect();
            let models = train(&training, config)?;
            let mut scans = Vec::with_capacity(held_out.len());
            for &i in &held_out {
                let file = &dataset[i];
                let seg = segment_file(&models, file, config)?;
                let truth = file.truth.as_ref().expect("checked above");
                let report = unsigned_error(&seg.estimate, truth, file.scan.pixel_pitch_um(), config.eval.regions)?;
                scans.push(ScanResult {
                    index: i,
                    report,
                    iterations: seg.diagnostics.iterations,
                    converged: seg.diagnostics.converged,
                });
            }
            let reports: Vec<ErrorReport> = scans.iter().map(|s| s.report.clone()).collect();
            Ok((
                FoldResult {
                    fold,
                    held_out,
                    report: aggregate(&reports)?,
                    warnings: models.warnings,
                },
                scans,
            ))
        })
        .collect();
    let mut folds = Vec::new();
    let mut scans = Vec::new();
    for r in fold_runs {
        let (f, s) = r?;
        folds.push(f);
        scans.extend(s);
    }
    scans.sort_by_key(|s| s.index);
    let per_scan: Vec<ErrorReport> = scans.iter().map(|s| s.report.clone()).collect();
    Ok(CrossValidation {
        folds,
        report: aggregate(&per_scan)?,
        scans,
    })
}
