//! Training and segmentation driven by a [`RunConfig`].

use crate::appearance::{fit_appearance, AppearanceSet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{segment, Segmentation};
use crate::scan::ScanFile;
use crate::shape::{fit_ppca, BoundaryField, PpcaFit, ShapePrior};

fn truths(files: &[ScanFile]) -> Result<Vec<&BoundaryField>> {
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.truth
                .as_ref()
                .ok_or_else(|| Error::InvalidData(format!("training scan {i} has no ground truth")))
        })
        .collect()
}

pub fn train_shape(files: &[ScanFile], config: &RunConfig) -> Result<PpcaFit> {
    let fields: Vec<BoundaryField> = truths(files)?.into_iter().cloned().collect();
    fit_ppca(&fields, config.shape.q_ppca, config.shape.variance_inflation)
}

pub fn train_appearance(files: &[ScanFile], config: &RunConfig) -> Result<AppearanceSet> {
    let t = truths(files)?;
    let pairs: Vec<_> = files.iter().zip(t).map(|(f, t)| (&f.scan, t)).collect();
    fit_appearance(&pairs, &config.appearance_options()?)
}

/// Shape prior and appearance models learned from labeled scans.
pub struct TrainedModels {
    pub prior: ShapePrior,
    pub appearance: AppearanceSet,
    pub warnings: Vec<String>,
}

pub fn train(files: &[ScanFile], config: &RunConfig) -> Result<TrainedModels> {
    let fit = train_shape(files, config)?;
    let appearance = train_appearance(files, config)?;
    Ok(TrainedModels {
        prior: fit.prior,
        appearance,
        warnings: fit.warnings,
    })
}

pub fn segment_file(models: &TrainedModels, file: &ScanFile, config: &RunConfig) -> Result<Segmentation> {
    segment(&models.prior, &models.appearance, &file.scan, &config.inference)
}
