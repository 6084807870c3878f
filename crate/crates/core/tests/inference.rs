mod common;

use common::*;
use layerseg::config::RunConfig;
use layerseg::eval::unsigned_error;
use layerseg::gaussian::{LowRankGaussian, ZeroOperator};
use layerseg::inference::{
    build_augment, evaluate_objective, initialize, optimize_qb, posterior_covariance, segment_tables, ColumnPosterior,
    CovarianceMode, GaussianPosterior, InferenceConfig, PrecisionAugment, Segmentation,
};
use layerseg::pipeline::{segment_file, train};
use layerseg::regularizer::{build_shape_tables, DataTables};
use layerseg::shape::{ShapeCoupling, ShapeGeometry, ShapePrior};
use layerseg::synth::{generate_scans, ShapeSource, SynthConfig, SYNTH_SMALL_CONFIG};
use layerseg::Error;
use nalgebra::{DMatrix, DVector};

fn dense_config() -> InferenceConfig {
    InferenceConfig {
        covariance: CovarianceMode::Dense,
        cg_tol: 1e-13,
        ..InferenceConfig::default()
    }
}

fn tiny_run(seed: u64) -> (ShapePrior, Vec<DataTables>, Segmentation) {
    let (_, prior) = tiny_prior(3, 10.0);
    let geom = prior.geometry();
    let mut rng = rng(seed);
    let tables = random_class_tables(&mut rng, 20, geom.boundaries, geom.columns);
    let data = data_from_tables(&tables, geom.boundaries, false, true);
    let seg = segment_tables(&prior, &data, &dense_config()).unwrap();
    (prior, data, seg)
}

fn objective(prior: &ShapePrior, data: &[DataTables], qc: &[ColumnPosterior], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let coupling = ShapeCoupling::new(prior).unwrap();
    let shapes = build_shape_tables(&coupling, mean).unwrap();
    let qb = GaussianPosterior::dense(mean.clone(), cov.clone()).unwrap();
    evaluate_objective(prior.gaussian(), &coupling, data, &shapes, qc, &qb).unwrap().total
}

#[test]
fn zero_augment_returns_the_prior() {
    let (_, prior) = tiny_prior(3, 10.0);
    let coupling = ShapeCoupling::new(&prior).unwrap();
    let g = prior.gaussian();
    let aug = PrecisionAugment {
        coupling: &coupling,
        vector: DVector::zeros(g.dim()),
    };
    let qb = optimize_qb(g, &aug, None, 1e-10).unwrap();
    assert_eq!(qb.mean, *g.mean());
    // with no extra precision the inverse of K is the prior covariance
    let cov = dense_covariance(g);
    for i in 0..g.dim() {
        let e = DVector::from_fn(g.dim(), |r, _| (r == i) as u8 as f64);
        let col = g.precision_solve(&ZeroOperator(g.dim()), &e, 1e-13).unwrap();
        assert!(rel_err_vec(&col, &cov.column(i).into_owned()) < 1e-9);
    }
}

#[test]
fn point_mass_at_the_prior_mean_gives_zero_vector() {
    let g = LowRankGaussian::new(DVector::from_element(1, 4.0), DMatrix::from_element(1, 1, 0.5), 0.3).unwrap();
    let prior = ShapePrior::new(g, ShapeGeometry::new(1, 1, 1).unwrap(), 10.0).unwrap();
    let coupling = ShapeCoupling::new(&prior).unwrap();
    let mut single = vec![0.0; 8];
    single[4] = 1.0;
    let q = ColumnPosterior {
        singletons: vec![single],
        pairs: vec![],
        log_partition: 0.0,
    };
    let aug = build_augment(&coupling, &[q]).unwrap();
    assert_eq!(aug.vector.norm(), 0.0);
}

#[test]
fn mean_gradient_vanishes_at_the_update() {
    for seed in 0..3 {
        let (prior, data, seg) = tiny_run(seed);
        let qc = &seg.qc.columns;
        let mean = seg.qb.mean.clone();
        let cov = seg.qb.covariance.as_ref().unwrap().matrix.clone();
        let h = 1e-4;
        let grad = DVector::from_fn(mean.len(), |i, _| {
            let (mut p, mut q) = (mean.clone(), mean.clone());
            p[i] += h;
            q[i] -= h;
            (objective(&prior, &data, qc, &p, &cov) - objective(&prior, &data, qc, &q, &cov)) / (2.0 * h)
        });
        assert!(grad.norm() < 1e-5, "‖∇_μ̄ J‖ = {}", grad.norm());

        // the same differences detect a displaced mean
        let shifted = mean.map(|v| v + 0.3);
        let moved = (objective(&prior, &data, qc, &(&shifted + DVector::from_element(mean.len(), h)), &cov)
            - objective(&prior, &data, qc, &(&shifted - DVector::from_element(mean.len(), h)), &cov))
            / (2.0 * h);
        assert!(moved.abs() > 1e-2);
    }
}

#[test]
fn covariance_perturbations_never_decrease_the_objective() {
    let (prior, data, seg) = tiny_run(7);
    let qc = &seg.qc.columns;
    let mean = seg.qb.mean.clone();
    let cov = seg.qb.covariance.as_ref().unwrap().matrix.clone();
    let base = objective(&prior, &data, qc, &mean, &cov);
    let mut rng = rng(8);
    for step in [1e-4, 1e-3, 1e-2] {
        for _ in 0..10 {
            let e = random_spd(&mut rng, cov.nrows(), step);
            assert!(objective(&prior, &data, qc, &mean, &(&cov + &e)) >= base - 1e-12 * base.abs());
            // shrinking along a PSD direction that keeps Σ̄ positive definite
            let smaller = &cov - &e * 0.1 * cov.symmetric_eigenvalues().min() / e.symmetric_eigenvalues().max();
            assert!(objective(&prior, &data, qc, &mean, &smaller) >= base - 1e-12 * base.abs());
        }
    }
}

#[test]
fn objective_by_direct_summation_on_a_toy() {
    // one column, one boundary, q_b equal to the prior, q_c uniform
    let n = 7;
    let g = LowRankGaussian::new(DVector::from_element(1, 3.2), DMatrix::from_element(1, 1, 0.8), 0.4).unwrap();
    let inflation = 10.0;
    let prior = ShapePrior::new(g.clone(), ShapeGeometry::new(1, 1, 1).unwrap(), inflation).unwrap();
    let coupling = ShapeCoupling::new(&prior).unwrap();
    let table = random_class_tables(&mut rng(3), n, 1, 1).remove(0);
    let data = vec![DataTables::new(&table, 1, true, true).unwrap()];
    let q = ColumnPosterior {
        singletons: vec![vec![1.0 / n as f64; n]],
        pairs: vec![],
        log_partition: 0.0,
    };
    let var = 0.8 * 0.8 + 0.4;
    let qb = GaussianPosterior::dense(g.mean().clone(), DMatrix::from_element(1, 1, var)).unwrap();
    let shapes = build_shape_tables(&coupling, g.mean()).unwrap();
    let got = evaluate_objective(&g, &coupling, &data, &shapes, &[q], &qb).unwrap();

    let mut want = 0.0;
    for row in 0..n {
        let energy = data_energy(&table, 1, &[row]) + normal_log_pdf(row as f64, 3.2, var * inflation);
        want += -energy / n as f64;
    }
    want -= (n as f64).ln();
    assert!(got.exact);
    assert!((got.total - want).abs() < 1e-12, "{} vs {want}", got.total);
    assert!(got.prior + got.qb_neg_entropy < 1e-12);
}

#[test]
fn posterior_covariance_is_symmetric_positive_definite() {
    let (_, prior) = tiny_prior(3, 10.0);
    let coupling = ShapeCoupling::new(&prior).unwrap();
    let cov = posterior_covariance(prior.gaussian(), &coupling).unwrap();
    assert!((&cov.matrix - cov.matrix.transpose()).abs().max() < 1e-10);
    assert!(nalgebra::Cholesky::new(cov.matrix.clone()).is_some());
    let p = coupling.augment_dense();
    assert!((&p - p.transpose()).abs().max() < 1e-10);
    let eig = p.symmetric_eigenvalues();
    assert!(eig.min() > -1e-10 * eig.max().max(1.0));
}

#[test]
fn dense_is_refused_above_the_limit() {
    assert!(matches!(CovarianceMode::Dense.resolve(5000), Err(Error::InvalidParameter(_))));
    assert!(!CovarianceMode::Auto.resolve(2000).unwrap());
    assert!(CovarianceMode::Auto.resolve(100).unwrap());
}

#[test]
fn too_few_rows_is_infeasible() {
    let (_, prior) = tiny_prior(3, 10.0);
    let geom = prior.geometry();
    let tables = random_class_tables(&mut rng(1), 2, geom.boundaries, geom.columns);
    let data = data_from_tables(&tables, geom.boundaries, false, true);
    assert!(matches!(
        segment_tables(&prior, &data, &InferenceConfig::default()),
        Err(Error::Infeasible { .. })
    ));
}

#[test]
fn initialization_is_feasible_and_deterministic() {
    let (_, prior) = tiny_prior(3, 10.0);
    let geom = prior.geometry();
    let coupling = ShapeCoupling::new(&prior).unwrap();
    let tables = random_class_tables(&mut rng(4), 20, geom.boundaries, geom.columns);
    let data = data_from_tables(&tables, geom.boundaries, false, true);
    let a = initialize(&coupling, &data).unwrap();
    let b = initialize(&coupling, &data).unwrap();
    assert_eq!(a, b);
    assert!(a.expected().iter().all(|&v| (0.0..=19.0).contains(&v)));
}

#[test]
fn matrix_free_agrees_with_dense() {
    let fixed = |covariance| InferenceConfig {
        covariance,
        cg_tol: 1e-13,
        rel_tol: 0.0,
        max_iters: 15,
        ..InferenceConfig::default()
    };
    for seed in 0..3 {
        let (prior, data, _) = tiny_run(seed);
        let dense = segment_tables(&prior, &data, &fixed(CovarianceMode::Dense)).unwrap();
        let free = segment_tables(&prior, &data, &fixed(CovarianceMode::MatrixFree)).unwrap();
        assert!(dense.diagnostics.objective_exact && !free.diagnostics.objective_exact);
        assert!(rel_err_vec(&free.qb.mean, &dense.qb.mean) < 1e-9);
        assert!((free.estimate.values() - dense.estimate.values()).abs().max() < 1e-9);
        // J differs by a constant only
        let offset = dense.diagnostics.trace[0].objective - free.diagnostics.trace[0].objective;
        for (a, b) in dense.diagnostics.trace.iter().zip(&free.diagnostics.trace) {
            assert!((a.objective - b.objective - offset).abs() < 1e-8 * a.objective.abs().max(1.0));
        }
    }
}

#[test]
fn noiseless_scans_are_recovered_and_outputs_are_ordered() {
    let mut sc = SynthConfig::from_toml_str(SYNTH_SMALL_CONFIG).unwrap();
    sc.appearance.noise_sd = 0.0;
    let training = generate_scans(&sc, ShapeSource::Parametric, 0, 200).unwrap();
    let config = RunConfig::default();
    let models = train(&training, &config).unwrap();
    for f in generate_scans(&sc, ShapeSource::Prior(&models.prior), 500, 5).unwrap() {
        let seg = segment_file(&models, &f, &config).unwrap();
        let report = unsigned_error(&seg.estimate, f.truth.as_ref().unwrap(), 1.0, 1).unwrap();
        assert!(report.mean_px < 0.5, "mean error {} px", report.mean_px);
        assert!(seg.estimate.is_strictly_ordered());
        assert!(seg.qc.normalization_error() < 1e-12);
        assert!(seg.qc.marginalization_error() < 1e-10);
        for w in seg.diagnostics.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-8 * w[0].objective.abs());
        }
        let again = segment_file(&models, &f, &config).unwrap();
        assert_eq!(again.estimate, seg.estimate);
        assert_eq!(
            serde_json::to_string(&again.diagnostics).unwrap(),
            serde_json::to_string(&seg.diagnostics).unwrap()
        );
    }
}
