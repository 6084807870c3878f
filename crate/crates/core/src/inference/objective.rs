//! The variational free energy `J(q_b, q_c)`.

use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::chain::ColumnPosterior;
use super::qb::{DenseCovariance, GaussianPosterior};
use crate::error::{Error, Result};
use crate::gaussian::{LowRankGaussian, LN_2PI};
use crate::regularizer::{ColumnShape, DataTables};
use crate::shape::ShapeCoupling;

/// The summands of `J`. With a matrix-free Σ̄ the terms that depend on Σ̄
/// alone are left out; they are constant across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveTerms {
    /// `−⟨q_c, θ⟩` with data and shape tables at μ̄.
    pub linear: f64,
    /// `½⟨P̃, Σ̄⟩`.
    pub shape_variance: f64,
    /// `−E_{q_b}[log p(b)]`.
    pub prior: f64,
    /// `−H(q_b)`.
    pub qb_neg_entropy: f64,
    /// `−H(q_c)`.
    pub qc_neg_entropy: f64,
    pub total: f64,
    pub exact: bool,
}

pub struct Objective<'a> {
    prior_term: &'a LowRankGaussian,
    coupling: &'a ShapeCoupling,
    /// `(Σ̄, ½⟨K, Σ̄⟩, ½⟨P̃, Σ̄⟩)` of the last dense covariance seen.
    cache: Mutex<Option<(Arc<DenseCovariance>, f64, f64)>>,
}

impl<'a> Objective<'a> {
    pub fn new(prior_term: &'a LowRankGaussian, coupling: &'a ShapeCoupling) -> Self {
        Self {
            prior_term,
            coupling,
            cache: Mutex::new(None),
        }
    }

    fn trace_terms(&self, cov: &Arc<DenseCovariance>) -> (f64, f64) {
        let mut cache = self.cache.lock().expect("objective cache poisoned");
        if let Some((c, k, p)) = cache.as_ref() {
            if Arc::ptr_eq(c, cov) {
                return (*k, *p);
            }
        }
        let s = &cov.matrix;
        let g = self.prior_term;
        // ⟨K, Σ̄⟩ = (tr Σ̄ − ⟨M⁻¹, WᵀΣ̄W⟩)/σ²
        let w = g.factor();
        let x = w.tr_mul(&(s * w));
        let mut inner = 0.0;
        for c in 0..x.ncols() {
            inner += g.inner_solve(&x.column(c).into_owned())[c];
        }
        let k_term = 0.5 * (s.trace() - inner) / g.noise_variance();
        let p_term = 0.5
            * (0..s.ncols())
                .into_par_iter()
                .map(|i| self.coupling.augment_apply(&s.column(i).into_owned())[i])
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>();
        *cache = Some((cov.clone(), k_term, p_term));
        (k_term, p_term)
    }

    pub fn evaluate(
        &self,
        data: &[DataTables],
        shapes: &[ColumnShape],
        qc: &[ColumnPosterior],
        qb: &GaussianPosterior,
    ) -> Result<ObjectiveTerms> {
        let g = self.prior_term;
        let d = g.dim();
        if qb.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "q_b dimension",
                expected: d,
                found: qb.dim(),
            });
        }
        if data.len() != qc.len() || shapes.len() != qc.len() {
            return Err(Error::DimensionMismatch {
                what: "columns of tables vs q_c",
                expected: qc.len(),
                found: data.len().min(shapes.len()),
            });
        }
        let per_column: Vec<(f64, f64)> = (0..qc.len())
            .into_par_iter()
            .map(|j| (-expected_potential(&data[j], &shapes[j], &qc[j]), qc[j].neg_entropy()))
            .collect();
        let linear: f64 = per_column.iter().map(|p| p.0).sum();
        let qc_neg_entropy: f64 = per_column.iter().map(|p| p.1).sum();

        let diff: DVector<f64> = &qb.mean - g.mean();
        let quad = 0.5 * diff.dot(&g.precision_mul(&diff));
        let constant = 0.5 * g.log_det_covariance() + 0.5 * d as f64 * LN_2PI;
        let entropy_const = -0.5 * d as f64 * (1.0 + LN_2PI);
        let (shape_variance, prior, qb_neg_entropy, exact) = match &qb.covariance {
            Some(cov) => {
                let (k_term, p_term) = self.trace_terms(cov);
                (p_term, k_term + quad + constant, entropy_const - 0.5 * cov.log_det, true)
            }
            None => (0.0, quad + constant, entropy_const, false),
        };
        let total = linear + shape_variance + prior + qb_neg_entropy + qc_neg_entropy;
        Ok(ObjectiveTerms {
            linear,
            shape_variance,
            prior,
            qb_neg_entropy,
            qc_neg_entropy,
            total,
            exact,
        })
    }
}

/// `⟨q, θ⟩` for one column; zero-probability cells contribute nothing.
pub fn expected_potential(data: &DataTables, shape: &ColumnShape, q: &ColumnPosterior) -> f64 {
    let nb = q.boundaries();
    let weighted = |p: f64, v: f64| if p > 0.0 { p * v } else { 0.0 };
    let mut acc = 0.0;
    for (n, &p) in q.singletons[0].iter().enumerate() {
        acc += weighted(p, data.psi_first(n) + shape.omega_first(n));
    }
    for (n, &p) in q.singletons[nb - 1].iter().enumerate() {
        acc += weighted(p, data.psi_last(n));
    }
    for k in 1..nb {
        let pair = &q.pairs[k - 1];
        for m in 0..pair.size() {
            let (start, vals) = pair.row(m);
            for (o, &p) in vals.iter().enumerate() {
                let n = start + o;
                acc += weighted(p, data.psi(k, m, n) + shape.omega(k, m, n));
            }
        }
    }
    acc
}

pub fn evaluate_objective(
    prior_term: &LowRankGaussian,
    coupling: &ShapeCoupling,
    data: &[DataTables],
    shapes: &[ColumnShape],
    qc: &[ColumnPosterior],
    qb: &GaussianPosterior,
) -> Result<ObjectiveTerms> {
    Objective::new(prior_term, coupling).evaluate(data, shapes, qc, qb)
}
