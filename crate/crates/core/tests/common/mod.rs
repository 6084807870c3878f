//! Builders and dense reference implementations shared by the integration
//! tests. Everything here is computed from definitions with plain dense
//! linear algebra, independently of the library internals.

#![allow(dead_code)]

use layerseg::appearance::{normalize_rows, ClassLabel};
use layerseg::gaussian::LowRankGaussian;
use layerseg::inference::ColumnPosterior;
use layerseg::regularizer::{ChainPotentials, DataTables};
use layerseg::shape::{fit_ppca, ShapeGeometry, ShapePrior};
use layerseg::synth::{generate_fields, ShapeSource, SynthConfig, SYNTH_TINY_CONFIG};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn random_lowrank(rng: &mut ChaCha8Rng, d: usize, q: usize) -> LowRankGaussian {
    let mean = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
    let factor = DMatrix::from_fn(d, q, |_, _| rng.gen_range(-1.5..1.5));
    let noise = rng.gen_range(0.05..1.0);
    LowRankGaussian::new(mean, factor, noise).unwrap()
}

/// `W·Wᵀ + σ²·I`.
pub fn dense_covariance(g: &LowRankGaussian) -> DMatrix<f64> {
    let w = g.factor();
    w * w.transpose() + DMatrix::identity(g.dim(), g.dim()) * g.noise_variance()
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("invertible")
}

pub fn dense_log_pdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let chol = Cholesky::new(cov.clone()).expect("positive definite");
    let d = x - mean;
    let z = chol.solve(&d);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (d.dot(&z) + log_det + mean.len() as f64 * LN_2PI)
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + var.ln() + LN_2PI)
}

/// Dense conditional `x_Q | x_O` from the covariance blocks.
pub fn dense_conditional(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = mean.len();
    let query: Vec<usize> = (0..d).filter(|i| !observed.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| cov[(rows[a], cols[b])]);
    let s_qo = pick(&query, observed);
    let s_oo_inv = dense_inverse(&pick(observed, observed));
    let d_o = DVector::from_fn(observed.len(), |a, _| values[a] - mean[observed[a]]);
    let m = DVector::from_fn(query.len(), |a, _| mean[query[a]]) + &s_qo * &s_oo_inv * d_o;
    let c = pick(&query, &query) - &s_qo * s_oo_inv * s_qo.transpose();
    (m, c)
}

/// Shape prior fitted to tiny synthetic fields (3 boundaries × 4 columns).
pub fn tiny_prior(q_ppca: usize, inflation: f64) -> (SynthConfig, ShapePrior) {
    let cfg = SynthConfig::from_toml_str(SYNTH_TINY_CONFIG).unwrap();
    let fields = generate_fields(&cfg, ShapeSource::Parametric, 60).unwrap();
    let prior = fit_ppca(&fields, q_ppca, inflation).unwrap().prior;
    (cfg, prior)
}

/// Random prior on an `nb × columns` geometry with boundaries spread over
/// `rows` and a sizable spread.
pub fn random_prior(rng: &mut ChaCha8Rng, nb: usize, columns: usize, rows: usize, inflation: f64) -> ShapePrior {
    let geom = ShapeGeometry::new(nb, columns, 1).unwrap();
    let d = geom.dim();
    let q = rng.gen_range(1..=d.min(3));
    let step = rows as f64 / (nb + 1) as f64;
    let mean = DVector::from_fn(d, |i, _| step * ((i % nb) + 1) as f64 + rng.gen_range(-0.5..0.5));
    let factor = DMatrix::from_fn(d, q, |_, _| rng.gen_range(-1.0..1.0));
    let g = LowRankGaussian::new(mean, factor, rng.gen_range(0.2..1.5)).unwrap();
    ShapePrior::new(g, geom, inflation).unwrap()
}

/// Row-normalized random log class tables, one per column.
pub fn random_class_tables(rng: &mut ChaCha8Rng, rows: usize, nb: usize, columns: usize) -> Vec<DMatrix<f64>> {
    (0..columns)
        .map(|_| {
            let mut t = DMatrix::from_fn(rows, ClassLabel::count(nb), |_, _| rng.gen_range(-4.0..0.0));
            normalize_rows(&mut t);
            t
        })
        .collect()
}

pub fn data_from_tables(tables: &[DMatrix<f64>], nb: usize, beta_l: bool, beta_t: bool) -> Vec<DataTables> {
    tables.iter().map(|t| DataTables::new(t, nb, beta_l, beta_t).unwrap()).collect()
}

/// Every strictly increasing `nb`-tuple of rows in `0..n`.
pub fn ordered_configurations(n: usize, nb: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, nb: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == nb {
            out.push(cur.clone());
            return;
        }
        for r in start..n {
            cur.push(r);
            rec(n, nb, r + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, nb, 0, &mut Vec::new(), &mut out);
    out
}

/// Exact marginals of `q(c) ∝ exp(energy(c))` by enumeration.
pub struct BruteForce {
    pub singletons: Vec<Vec<f64>>,
    /// `pairs[k − 1][(m, n)] = q(c_{k−1} = m, c_k = n)`.
    pub pairs: Vec<DMatrix<f64>>,
    pub log_partition: f64,
}

pub fn brute_force(n: usize, nb: usize, energy: impl Fn(&[usize]) -> f64) -> BruteForce {
    let configs = ordered_configurations(n, nb);
    let energies: Vec<f64> = configs.iter().map(|c| energy(c)).collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut singletons = vec![vec![0.0; n]; nb];
    let mut pairs = vec![DMatrix::zeros(n, n); nb.saturating_sub(1)];
    for (c, w) in configs.iter().zip(&weights) {
        let p = w / z;
        for k in 0..nb {
            singletons[k][c[k]] += p;
            if k > 0 {
                pairs[k - 1][(c[k - 1], c[k])] += p;
            }
        }
    }
    BruteForce {
        singletons,
        pairs,
        log_partition: max + z.ln(),
    }
}

impl BruteForce {
    /// Largest absolute deviation from a computed posterior; pair entries
    /// outside the stored band count as zero.
    pub fn max_deviation(&self, post: &ColumnPosterior) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.singletons.iter().zip(&post.singletons) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        for (a, b) in self.pairs.iter().zip(&post.pairs) {
            for m in 0..a.nrows() {
                for n in 0..a.ncols() {
                    let p = b.get(m, n);
                    let p = if p == f64::NEG_INFINITY { 0.0 } else { p };
                    worst = worst.max((a[(m, n)] - p).abs());
                }
            }
        }
        worst
    }
}

/// Energy of a configuration under chain potentials, read from the dense
/// expansion of each banded table.
pub fn chain_energy(pot: &ChainPotentials) -> impl Fn(&[usize]) -> f64 + '_ {
    let dense: Vec<DMatrix<f64>> = pot.pairs.iter().map(|p| p.to_dense()).collect();
    move |c: &[usize]| {
        let nb = c.len();
        let mut e = pot.first[c[0]] + pot.last[c[nb - 1]];
        for k in 1..nb {
            e += dense[k - 1][(c[k - 1], c[k])];
        }
        e
    }
}

/// Random dense chain potentials, with a fraction of extra forbidden
/// transitions. Always feasible.
pub fn random_potentials(rng: &mut ChaCha8Rng, n: usize, nb: usize) -> ChainPotentials {
    loop {
        let first = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let last = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let pairs: Vec<DMatrix<f64>> = (1..nb)
            .map(|_| {
                DMatrix::from_fn(n, n, |m, c| {
                    if c > m && rng.gen_bool(0.85) {
                        rng.gen_range(-5.0..5.0)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
            })
            .collect();
        let pot = ChainPotentials::from_dense(&first, &pairs, &last);
        let feasible = {
            let energy = chain_energy(&pot);
            ordered_configurations(n, nb).iter().any(|c| energy(c).is_finite())
        };
        if feasible {
            return pot;
        }
    }
}

/// Dense reference for the column couplings of a shape prior: conditional
/// gains, inflated conditional variances and neighbor regressions.
pub struct DenseCoupling {
    pub nb: usize,
    pub columns: usize,
    pub mean: DVector<f64>,
    /// Row `j·nb + k` is `γ̃` with `m_{k,j}(b) = μ_{k,j} − γ̃·(b − μ)`.
    pub gain: DMatrix<f64>,
    /// `v[k, j]`.
    pub variance: DMatrix<f64>,
    /// `(slope, intercept, variance)` of `b[k, j] | b[k−1, j]`.
    pub neighbor: Vec<Vec<(f64, f64, f64)>>,
}

impl DenseCoupling {
    pub fn new(prior: &ShapePrior) -> Self {
        let geom = prior.geometry();
        let (nb, columns) = (geom.boundaries, geom.columns);
        let g = prior.gaussian();
        let cov = dense_covariance(g);
        let prec = dense_inverse(&cov);
        let d = g.dim();
        let mut gain = DMatrix::zeros(d, d);
        let mut variance = DMatrix::zeros(nb, columns);
        let mut neighbor = Vec::new();
        for j in 0..columns {
            let blk = j * nb..(j + 1) * nb;
            let k_jj = prec.view((blk.start, blk.start), (nb, nb)).into_owned();
            let c_j = dense_inverse(&k_jj);
            let rows = &c_j * prec.rows(blk.start, nb);
            for k in 0..nb {
                let mut r = rows.row(k).into_owned();
                r[blk.start + k] -= 1.0;
                gain.set_row(blk.start + k, &r);
                variance[(k, j)] = (c_j[(k, k)] * prior.variance_inflation()).max(1e-12);
            }
            let mut nbr = vec![(0.0, 0.0, 1.0)];
            for k in 1..nb {
                let (a, b) = (blk.start + k - 1, blk.start + k);
                let slope = cov[(a, b)] / cov[(a, a)];
                let intercept = g.mean()[b] - slope * g.mean()[a];
                let var = cov[(b, b)] - cov[(a, b)].powi(2) / cov[(a, a)];
                nbr.push((slope, intercept, var));
            }
            neighbor.push(nbr);
        }
        Self {
            nb,
            columns,
            mean: g.mean().clone(),
            gain,
            variance,
            neighbor,
        }
    }

    pub fn conditional_mean(&self, k: usize, j: usize, b: &DVector<f64>) -> f64 {
        let i = j * self.nb + k;
        self.mean[i] - self.gain.row(i).dot(&(b - &self.mean).transpose())
    }

    /// Log-potential of a whole column configuration under the shape terms
    /// evaluated at `mean_bar`: first-boundary conditional plus, for every
    /// `k ≥ 1`, conditional times neighbor regression.
    pub fn shape_energy(&self, j: usize, mean_bar: &DVector<f64>, c: &[usize]) -> f64 {
        let v = |k: usize| self.variance[(k, j)];
        let mut e = normal_log_pdf(c[0] as f64, self.conditional_mean(0, j, mean_bar), v(0));
        for k in 1..self.nb {
            let (slope, intercept, var) = self.neighbor[j][k];
            e += normal_log_pdf(c[k] as f64, self.conditional_mean(k, j, mean_bar), v(k));
            e += normal_log_pdf(c[k] as f64, intercept + slope * c[k - 1] as f64, var);
        }
        e
    }
}

/// Data log-potential of a column configuration: every row scored by the
/// class it falls in.
pub fn data_energy(table: &DMatrix<f64>, nb: usize, c: &[usize]) -> f64 {
    (0..table.nrows()).map(|n| table[(n, ClassLabel::of_row(n, c).index(nb))]).sum()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(d, d) * 0.5) * scale
}
