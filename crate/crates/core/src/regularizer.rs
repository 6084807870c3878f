//! Column-wise discrete potentials for the boundary chain.
//!
//! Rows are 0-based. Boundary `k` of a column sits at row `c_k` with
//! `0 ≤ c_0 < … < c_{N_b−1} ≤ N−1`. Layer `k` occupies the rows strictly
//! between boundaries `k−1` and `k`; the first layer starts at row 0 and the
//! last ends at row `N−1`.
//!
//! Data terms come from appearance class tables, shape terms from the
//! Gaussian coupling of a column to the rest of the field. Pairwise tables are
//! stored as bands: outside a band every entry is −∞.

use nalgebra::{DMatrix, DVector};

use crate::appearance::ClassLabel;
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_product, UnivariateGaussian};
use crate::shape::ShapeCoupling;

/// Pairwise shape entries more than this many nats below their row maximum
/// are structural zeros (a ratio of 1e-12 after exponentiation).
pub const SPARSITY_LOG_THRESHOLD: f64 = 27.631_021_115_928_547;

/// Row-banded `N×N` table. Row `m` holds entries for
/// `n ∈ start(m) .. start(m) + len(m)`; all other entries are −∞.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedTable {
    size: usize,
    starts: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl BandedTable {
    pub fn builder(size: usize) -> BandedBuilder {
        BandedBuilder {
            table: BandedTable {
                size,
                starts: Vec::with_capacity(size),
                offsets: vec![0],
                values: Vec::new(),
            },
        }
    }

    /// Keeps the finite span of every row of a dense table (−∞ inside a span
    /// is stored as is).
    pub fn from_dense(t: &DMatrix<f64>) -> Self {
        let n = t.nrows();
        let mut b = Self::builder(n);
        for m in 0..n {
            let finite: Vec<usize> = (0..t.ncols()).filter(|&c| t[(m, c)] > f64::NEG_INFINITY).collect();
            match (finite.first(), finite.last()) {
                (Some(&lo), Some(&hi)) => b.push_row(lo, (lo..=hi).map(|c| t[(m, c)])),
                _ => b.push_row(0, std::iter::empty()),
            }
        }
        b.finish()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, m: usize) -> (usize, &[f64]) {
        (self.starts[m], &self.values[self.offsets[m]..self.offsets[m + 1]])
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        let (start, vals) = self.row(m);
        if n >= start && n < start + vals.len() {
            vals[n - start]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Number of stored entries.
    pub fn stored(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::from_element(self.size, self.size, f64::NEG_INFINITY);
        for m in 0..self.size {
            let (start, vals) = self.row(m);
            for (o, &v) in vals.iter().enumerate() {
                out[(m, start + o)] = v;
            }
        }
        out
    }

    /// Same band with every entry replaced by `f(m, n, value)`.
    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for m in 0..self.size {
            let start = self.starts[m];
            for (o, v) in out.values[self.offsets[m]..self.offsets[m + 1]].iter_mut().enumerate() {
                *v = f(m, start + o, *v);
            }
        }
        out
    }
}

pub struct BandedBuilder {
    table: BandedTable,
}

impl BandedBuilder {
    pub fn push_row(&mut self, start: usize, values: impl IntoIterator<Item = f64>) {
        let t = &mut self.table;
        t.values.extend(values);
        t.starts.push(start);
        t.offsets.push(t.values.len());
    }

    pub fn finish(self) -> BandedTable {
        assert_eq!(self.table.starts.len(), self.table.size, "banded table needs one row per index");
        self.table
    }
}

/// Appearance evidence of one column, kept as prefix sums so every entry
/// costs O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct DataTables {
    rows: usize,
    boundaries: usize,
    /// `prefix[k][n] = Σ_{i<n} log p(l_k at row i)`, only when layers are on.
    prefix: Option<Vec<Vec<f64>>>,
    /// `transition[k][n] = log p(t_k at row n)`, only when transitions are on.
    transition: Option<Vec<Vec<f64>>>,
}

impl DataTables {
    pub fn new(class_table: &DMatrix<f64>, boundaries: usize, beta_layer: bool, beta_transition: bool) -> Result<Self> {
        let rows = class_table.nrows();
        if class_table.ncols() != ClassLabel::count(boundaries) {
            return Err(Error::DimensionMismatch {
                what: "class table columns",
                expected: ClassLabel::count(boundaries),
                found: class_table.ncols(),
            });
        }
        let prefix = beta_layer.then(|| {
            (0..=boundaries)
                .map(|k| {
                    let col = class_table.column(ClassLabel::Layer(k).index(boundaries));
                    let mut p = Vec::with_capacity(rows + 1);
                    let mut acc = 0.0;
                    p.push(0.0);
                    for &v in col.iter() {
                        acc += v;
                        p.push(acc);
                    }
                    p
                })
                .collect()
        });
        let transition = beta_transition.then(|| {
            (0..boundaries)
                .map(|k| class_table.column(ClassLabel::Transition(k).index(boundaries)).iter().copied().collect())
                .collect()
        });
        Ok(Self {
            rows,
            boundaries,
            prefix,
            transition,
        })
    }

    /// Tables that contribute nothing (shape-only inference).
    pub fn empty(rows: usize, boundaries: usize) -> Self {
        Self {
            rows,
            boundaries,
            prefix: None,
            transition: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn boundaries(&self) -> usize {
        self.boundaries
    }

    fn layer_sum(&self, k: usize, from: usize, to: usize) -> f64 {
        match &self.prefix {
            Some(p) if to > from => p[k][to] - p[k][from],
            _ => 0.0,
        }
    }

    fn transition_at(&self, k: usize, n: usize) -> f64 {
        self.transition.as_ref().map_or(0.0, |t| t[k][n])
    }

    /// `ψ_first(n)`: layer 0 above row `n` plus transition 0 at `n`.
    pub fn psi_first(&self, n: usize) -> f64 {
        self.layer_sum(0, 0, n) + self.transition_at(0, n)
    }

    /// `Ψ_k(m, n)` for `1 ≤ k < N_b`: layer `k` strictly between `m` and `n`
    /// plus transition `k` at `n`; −∞ unless `n > m`.
    pub fn psi(&self, k: usize, m: usize, n: usize) -> f64 {
        if n <= m {
            return f64::NEG_INFINITY;
        }
        self.layer_sum(k, m + 1, n) + self.transition_at(k, n)
    }

    /// `ψ_last(n)`: the last layer below row `n`.
    pub fn psi_last(&self, n: usize) -> f64 {
        self.layer_sum(self.boundaries, n + 1, self.rows)
    }
}

/// Parameters of `log p(c_k = n | c_{k−1} = m, b)` for one boundary pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairShape {
    /// Column conditional of `b_k`; `None` for the uniform initialization.
    pub conditional: Option<UnivariateGaussian>,
    pub slope: f64,
    pub intercept: f64,
    pub neighbor_variance: f64,
}

impl PairShape {
    fn neighbor(&self, m: usize) -> UnivariateGaussian {
        UnivariateGaussian {
            mean: self.intercept + self.slope * m as f64,
            variance: self.neighbor_variance,
        }
    }

    /// Gaussian in `n` proportional to the row `m`, and its log scale.
    fn row_gaussian(&self, m: usize) -> (UnivariateGaussian, f64) {
        let nb = self.neighbor(m);
        match &self.conditional {
            Some(c) => gaussian_product(c, &nb),
            None => (nb, 0.0),
        }
    }

    pub fn omega(&self, m: usize, n: usize) -> f64 {
        if n <= m {
            return f64::NEG_INFINITY;
        }
        let (g, log_scale) = self.row_gaussian(m);
        g.log_pdf(n as f64) + log_scale
    }

    /// Rows `n` of row `m` that survive the sparsity threshold, within
    /// `m+1 .. rows`.
    pub fn band(&self, m: usize, rows: usize) -> std::ops::Range<usize> {
        if m + 1 >= rows {
            return 0..0;
        }
        let (lo_valid, hi_valid) = (m + 1, rows - 1);
        let (g, _) = self.row_gaussian(m);
        let best = g.mean.round().clamp(lo_valid as f64, hi_valid as f64);
        let d = best - g.mean;
        let r = (d * d + 2.0 * g.variance * SPARSITY_LOG_THRESHOLD).sqrt();
        let best = best as usize;
        let lo = (g.mean - r).ceil().max(lo_valid as f64).min(best as f64) as usize;
        let hi = (g.mean + r).floor().min(hi_valid as f64).max(best as f64) as usize;
        lo..hi + 1
    }
}

/// Shape terms of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnShape {
    /// Column conditional of `b_0`; `None` for the uniform initialization.
    pub first: Option<UnivariateGaussian>,
    /// Entry `k − 1` couples boundaries `k − 1` and `k`.
    pub pairs: Vec<PairShape>,
}

impl ColumnShape {
    pub fn omega_first(&self, n: usize) -> f64 {
        self.first.map_or(0.0, |g| g.log_pdf(n as f64))
    }

    /// `Ω_k(m, n)` for `1 ≤ k < N_b`.
    pub fn omega(&self, k: usize, m: usize, n: usize) -> f64 {
        self.pairs[k - 1].omega(m, n)
    }
}

/// Shape tables of every column with the column conditionals evaluated at
/// the posterior mean `mean_bar` (the conditional mean is linear in `b`, so
/// this is its expectation under q_b up to an n-independent constant).
pub fn build_shape_tables(coupling: &ShapeCoupling, mean_bar: &DVector<f64>) -> Result<Vec<ColumnShape>> {
    let geom = coupling.geometry();
    if mean_bar.len() != geom.dim() {
        return Err(Error::DimensionMismatch {
            what: "posterior mean",
            expected: geom.dim(),
            found: mean_bar.len(),
        });
    }
    let means = coupling.conditional_means(mean_bar);
    Ok((0..geom.columns)
        .map(|j| {
            let cond = |k: usize| UnivariateGaussian {
                mean: means[(k, j)],
                variance: coupling.variance(k, j),
            };
            ColumnShape {
                first: Some(cond(0)),
                pairs: (1..geom.boundaries).map(|k| pair_shape(coupling, k, j, Some(cond(k)))).collect(),
            }
        })
        .collect())
}

/// Shape tables with uniform column conditionals: only the neighbor term is
/// active and `ω_first ≡ 0`.
pub fn build_uniform_shape_tables(coupling: &ShapeCoupling) -> Vec<ColumnShape> {
    let geom = coupling.geometry();
    (0..geom.columns)
        .map(|j| ColumnShape {
            first: None,
            pairs: (1..geom.boundaries).map(|k| pair_shape(coupling, k, j, None)).collect(),
        })
        .collect()
}

fn pair_shape(coupling: &ShapeCoupling, k: usize, j: usize, conditional: Option<UnivariateGaussian>) -> PairShape {
    let (slope, intercept, neighbor_variance) = coupling.neighbor(k, j);
    PairShape {
        conditional,
        slope,
        intercept,
        neighbor_variance,
    }
}

/// Dense per-column tables, mainly for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTables {
    pub psi_first: DVector<f64>,
    pub psi: Vec<DMatrix<f64>>,
    pub psi_last: DVector<f64>,
    pub omega_first: DVector<f64>,
    pub omega: Vec<DMatrix<f64>>,
    pub sparsity_threshold: f64,
}

pub fn column_tables(data: &DataTables, shape: &ColumnShape) -> ColumnTables {
    let n = data.rows();
    let nb = data.boundaries();
    let dense = |f: &dyn Fn(usize, usize) -> f64| DMatrix::from_fn(n, n, |m, c| f(m, c));
    ColumnTables {
        psi_first: DVector::from_fn(n, |i, _| data.psi_first(i)),
        psi: (1..nb).map(|k| dense(&|m, c| data.psi(k, m, c))).collect(),
        psi_last: DVector::from_fn(n, |i, _| data.psi_last(i)),
        omega_first: DVector::from_fn(n, |i, _| shape.omega_first(i)),
        omega: (1..nb).map(|k| dense(&|m, c| shape.omega(k, m, c))).collect(),
        sparsity_threshold: SPARSITY_LOG_THRESHOLD,
    }
}

/// Log-potentials of one column chain:
/// `log p̃(c) = first(c_0) + Σ_k pairs[k−1](c_{k−1}, c_k) + last(c_{N_b−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPotentials {
    pub first: Vec<f64>,
    pub pairs: Vec<BandedTable>,
    pub last: Vec<f64>,
}

impl ChainPotentials {
    pub fn rows(&self) -> usize {
        self.first.len()
    }

    pub fn boundaries(&self) -> usize {
        self.pairs.len() + 1
    }

    pub fn from_dense(first: &DVector<f64>, pairs: &[DMatrix<f64>], last: &DVector<f64>) -> Self {
        Self {
            first: first.iter().copied().collect(),
            pairs: pairs.iter().map(BandedTable::from_dense).collect(),
            last: last.iter().copied().collect(),
        }
    }
}

/// `θ = ψ + ω` and `Θ_k = Ψ_k + Ω_k` on the thresholded shape band.
pub fn combine(data: &DataTables, shape: &ColumnShape) -> Result<ChainPotentials> {
    let n = data.rows();
    let nb = data.boundaries();
    if shape.pairs.len() + 1 != nb {
        return Err(Error::DimensionMismatch {
            what: "shape pairs vs boundaries",
            expected: nb - 1,
            found: shape.pairs.len(),
        });
    }
    let first = (0..n).map(|i| data.psi_first(i) + shape.omega_first(i)).collect();
    let last = (0..n).map(|i| data.psi_last(i)).collect();
    let pairs = (1..nb)
        .map(|k| {
            let p = &shape.pairs[k - 1];
            let mut b = BandedTable::builder(n);
            for m in 0..n {
                let band = p.band(m, n);
                let start = band.start;
                b.push_row(start, band.map(|c| data.psi(k, m, c) + p.omega(m, c)));
            }
            b.finish()
        })
        .collect();
    Ok(ChainPotentials { first, pairs, last })
}
