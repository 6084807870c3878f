//! Alternating variational inference over q_c (discrete boundary rows per
//! column) and q_b (Gaussian over all boundary heights).

mod chain;
mod objective;
mod qb;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use chain::{chain_marginals, ColumnPosterior};
pub use objective::{evaluate_objective, expected_potential, Objective, ObjectiveTerms};
pub use qb::{
    build_augment, expected_rows, optimize_qb, posterior_covariance, AugmentOperator, CovarianceMode,
    DenseCovariance, GaussianPosterior, PrecisionAugment, AUTO_DENSE_LIMIT, DENSE_LIMIT,
};

use crate::appearance::AppearanceSet;
use crate::error::{Error, Result};
use crate::gaussian::LowRankGaussian;
use crate::regularizer::{build_shape_tables, build_uniform_shape_tables, combine, ColumnShape, DataTables};
use crate::scan::Scan;
use crate::shape::{BoundaryField, ShapeCoupling, ShapePrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub cg_tol: f64,
    pub covariance: CovarianceMode,
    /// Also scale the prior covariance in the `log p(b)` term by the
    /// variance inflation.
    pub inflate_prior_term: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iters: 50,
            cg_tol: 1e-8,
            covariance: CovarianceMode::Auto,
            inflate_prior_term: false,
        }
    }
}

/// Per-column q_c.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosterior {
    pub columns: Vec<ColumnPosterior>,
}

impl DiscretePosterior {
    /// `E[c_{k,j}]` as an `N_b×M` matrix.
    pub fn expected(&self) -> DMatrix<f64> {
        expected_rows(&self.columns)
    }

    pub fn std(&self) -> DMatrix<f64> {
        let nb = self.columns[0].boundaries();
        DMatrix::from_fn(nb, self.columns.len(), |k, j| self.columns[j].variance(k).sqrt())
    }

    pub fn marginalization_error(&self) -> f64 {
        self.columns.iter().map(|c| c.marginalization_error()).fold(0.0, f64::max)
    }

    pub fn normalization_error(&self) -> f64 {
        self.columns.iter().map(|c| c.normalization_error()).fold(0.0, f64::max)
    }
}

/// Exact chain marginals of every column for the given tables.
pub fn optimize_qc(data: &[DataTables], shapes: &[ColumnShape]) -> Result<DiscretePosterior> {
    if data.len() != shapes.len() {
        return Err(Error::DimensionMismatch {
            what: "data vs shape table columns",
            expected: shapes.len(),
            found: data.len(),
        });
    }
    let results: Vec<Result<ColumnPosterior>> = (0..data.len())
        .into_par_iter()
        .map(|j| chain_marginals(&combine(&data[j], &shapes[j])?, j))
        .collect();
    Ok(DiscretePosterior {
        columns: results.into_iter().collect::<Result<_>>()?,
    })
}

/// First q_c pass with uniform column conditionals.
pub fn initialize(coupling: &ShapeCoupling, data: &[DataTables]) -> Result<DiscretePosterior> {
    optimize_qc(data, &build_uniform_shape_tables(coupling))
}

/// Data tables of every column of a scan.
pub fn data_tables(appearance: &AppearanceSet, scan: &Scan) -> Result<Vec<DataTables>> {
    let tables = appearance.class_tables(scan)?;
    tables
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let model = appearance.model_for_column(scan, j)?;
            DataTables::new(t, scan.boundaries(), model.beta_layer, model.beta_transition)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Init,
    Qc,
    Qb,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub step: Step,
    pub objective: f64,
    pub delta: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    /// False when Σ̄ is matrix-free and J omits its constant Σ̄ terms.
    pub objective_exact: bool,
    pub marginalization_error: f64,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub qc: DiscretePosterior,
    pub qb: GaussianPosterior,
    /// `ĉ = E_{q_c}[c]`.
    pub estimate: BoundaryField,
    /// Posterior standard deviation of each boundary row under q_c.
    pub std: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

/// The Gaussian whose precision enters the `log p(b)` term.
pub fn prior_term(prior: &ShapePrior, inflate: bool) -> Result<LowRankGaussian> {
    let g = prior.gaussian();
    if !inflate {
        return Ok(g.clone());
    }
    let s = prior.variance_inflation();
    LowRankGaussian::new(g.mean().clone(), g.factor() * s.sqrt(), g.noise_variance() * s)
}

pub fn segment(prior: &ShapePrior, appearance: &AppearanceSet, scan: &Scan, config: &InferenceConfig) -> Result<Segmentation> {
    if scan.shape_geometry() != prior.geometry() {
        return Err(Error::InvalidData(format!(
            "scan geometry {:?} does not match the shape prior {:?}",
            scan.shape_geometry(),
            prior.geometry()
        )));
    }
    let data = data_tables(appearance, scan)?;
    segment_tables(prior, &data, config)
}

/// Runs the alternation on precomputed data tables (one per column).
pub fn segment_tables(prior: &ShapePrior, data: &[DataTables], config: &InferenceConfig) -> Result<Segmentation> {
    let start = Instant::now();
    let geom = prior.geometry();
    if data.len() != geom.columns {
        return Err(Error::DimensionMismatch {
            what: "data table columns",
            expected: geom.columns,
            found: data.len(),
        });
    }
    if let Some(t) = data.iter().find(|t| t.boundaries() != geom.boundaries) {
        return Err(Error::DimensionMismatch {
            what: "data table boundaries",
            expected: geom.boundaries,
            found: t.boundaries(),
        });
    }
    if !(config.rel_tol >= 0.0) || !(config.cg_tol > 0.0) {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    let dense = config.covariance.resolve(geom.dim())?;
    let coupling = ShapeCoupling::new(prior)?;
    let prior_term = prior_term(prior, config.inflate_prior_term)?;
    let covariance = if dense {
        Some(Arc::new(posterior_covariance(&prior_term, &coupling)?))
    } else {
        None
    };
    let objective = Objective::new(&prior_term, &coupling);

    let mut qc = initialize(&coupling, data)?;
    let mut qb = optimize_qb(&prior_term, &build_augment(&coupling, &qc.columns)?, covariance.clone(), config.cg_tol)?;
    let mut shapes = build_shape_tables(&coupling, &qb.mean)?;
    let mut j_prev = objective.evaluate(data, &shapes, &qc.columns, &qb)?.total;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        step: Step::Init,
        objective: j_prev,
        delta: f64::NAN,
        wall_seconds: start.elapsed().as_secs_f64(),
    }];

    let mut converged = false;
    let mut iterations = 0;
    let mut last = j_prev;
    for it in 1..=config.max_iters {
        iterations = it;
        qc = optimize_qc(data, &shapes)?;
        let j_qc = objective.evaluate(data, &shapes, &qc.columns, &qb)?.total;
        trace.push(TraceEntry {
            iteration: it,
            step: Step::Qc,
            objective: j_qc,
            delta: j_qc - last,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        qb = optimize_qb(&prior_term, &build_augment(&coupling, &qc.columns)?, covariance.clone(), config.cg_tol)?;
        shapes = build_shape_tables(&coupling, &qb.mean)?;
        let j_qb = objective.evaluate(data, &shapes, &qc.columns, &qb)?.total;
        trace.push(TraceEntry {
            iteration: it,
            step: Step::Qb,
            objective: j_qb,
            delta: j_qb - j_qc,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        last = j_qb;
        if (j_qb - j_prev).abs() <= config.rel_tol * j_qb.abs() {
            converged = true;
            break;
        }
        j_prev = j_qb;
    }

    let estimate = BoundaryField::new(qc.expected(), geom.bscans)?;
    let std = qc.std();
    let diagnostics = Diagnostics {
        trace,
        iterations,
        converged,
        objective_exact: dense,
        marginalization_error: qc.marginalization_error(),
    };
    Ok(Segmentation {
        qc,
        qb,
        estimate,
        std,
        diagnostics,
    })
}

/// Posterior mean of `b` as a field.
pub fn posterior_mean_field(prior: &ShapePrior, qb: &GaussianPosterior) -> Result<BoundaryField> {
    BoundaryField::from_vector(prior.geometry(), &DVector::clone(&qb.mean))
}
