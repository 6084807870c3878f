//! Exact sum-product on a single column chain, in log space.

use crate::error::{Error, Result};
use crate::regularizer::{BandedTable, ChainPotentials};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Marginals of one column chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnPosterior {
    /// `singletons[k][n] = q(c_k = n)`.
    pub singletons: Vec<Vec<f64>>,
    /// `pairs[k − 1]` holds `q(c_{k−1} = m, c_k = n)` on the potential band.
    pub pairs: Vec<BandedTable>,
    pub log_partition: f64,
}

impl ColumnPosterior {
    pub fn boundaries(&self) -> usize {
        self.singletons.len()
    }

    pub fn rows(&self) -> usize {
        self.singletons[0].len()
    }

    pub fn expected(&self, k: usize) -> f64 {
        self.singletons[k].iter().enumerate().map(|(n, q)| n as f64 * q).sum()
    }

    pub fn variance(&self, k: usize) -> f64 {
        let mean = self.expected(k);
        self.singletons[k]
            .iter()
            .enumerate()
            .map(|(n, q)| (n as f64 - mean).powi(2) * q)
            .sum()
    }

    /// Most probable row of boundary `k`; the lowest row wins ties.
    pub fn mode(&self, k: usize) -> usize {
        let mut best = 0;
        for (n, &q) in self.singletons[k].iter().enumerate() {
            if q > self.singletons[k][best] {
                best = n;
            }
        }
        best
    }

    /// `−H(q)`: singleton `Σ q log q` plus the mutual information of every
    /// neighboring pair. Exact for chain-structured `q`.
    pub fn neg_entropy(&self) -> f64 {
        let plogp = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
        let mut acc: f64 = self.singletons.iter().flatten().map(|&q| plogp(q)).sum();
        for (k, pair) in self.pairs.iter().enumerate() {
            let (prev, next) = (&self.singletons[k], &self.singletons[k + 1]);
            for m in 0..pair.size() {
                let (start, vals) = pair.row(m);
                for (o, &q) in vals.iter().enumerate() {
                    let (a, b) = (prev[m], next[start + o]);
                    if q > 0.0 && a > 0.0 && b > 0.0 {
                        acc += q * (q.ln() - a.ln() - b.ln());
                    }
                }
            }
        }
        acc
    }

    /// Largest violation of `Σ_n q(m, n) = q_{k−1}(m)` and
    /// `Σ_m q(m, n) = q_k(n)` over all pairs.
    pub fn marginalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, pair) in self.pairs.iter().enumerate() {
            let n = pair.size();
            let mut col = vec![0.0; n];
            for m in 0..n {
                let (start, vals) = pair.row(m);
                let row: f64 = vals.iter().sum();
                worst = worst.max((row - self.singletons[k][m]).abs());
                for (o, &q) in vals.iter().enumerate() {
                    col[start + o] += q;
                }
            }
            for (c, s) in col.iter().zip(&self.singletons[k + 1]) {
                worst = worst.max((c - s).abs());
            }
        }
        worst
    }

    /// Largest deviation of a singleton total from 1.
    pub fn normalization_error(&self) -> f64 {
        self.singletons
            .iter()
            .map(|s| (s.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Forward-backward on `q(c) ∝ exp(first(c_0) + Σ_k Θ_k(c_{k−1}, c_k) + last(c_{N_b−1}))`.
/// `column` only labels errors.
pub fn chain_marginals(pot: &ChainPotentials, column: usize) -> Result<ColumnPosterior> {
    let n = pot.rows();
    let nb = pot.boundaries();
    let node = |k: usize, i: usize| -> f64 {
        let mut v = 0.0;
        if k == 0 {
            v += pot.first[i];
        }
        if k == nb - 1 {
            v += pot.last[i];
        }
        v
    };
    let infeasible = |k: usize| Error::Infeasible { boundary: k, column };

    let mut alpha = vec![vec![f64::NEG_INFINITY; n]; nb];
    for i in 0..n {
        alpha[0][i] = node(0, i);
    }
    if alpha[0].iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(infeasible(0));
    }
    for k in 1..nb {
        let table = &pot.pairs[k - 1];
        let mut max = vec![f64::NEG_INFINITY; n];
        for m in 0..n {
            let a = alpha[k - 1][m];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let (start, vals) = table.row(m);
            for (o, &t) in vals.iter().enumerate() {
                max[start + o] = max[start + o].max(a + t);
            }
        }
        let mut sum = vec![0.0; n];
        for m in 0..n {
            let a = alpha[k - 1][m];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let (start, vals) = table.row(m);
            for (o, &t) in vals.iter().enumerate() {
                let c = start + o;
                if max[c] > f64::NEG_INFINITY {
                    sum[c] += (a + t - max[c]).exp();
                }
            }
        }
        for c in 0..n {
            alpha[k][c] = if max[c] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                max[c] + sum[c].ln() + node(k, c)
            };
        }
        if alpha[k].iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(infeasible(k));
        }
    }

    let mut beta = vec![vec![0.0; n]; nb];
    for k in (1..nb).rev() {
        let table = &pot.pairs[k - 1];
        for m in 0..n {
            let (start, vals) = table.row(m);
            let next = &beta[k];
            beta[k - 1][m] = log_sum_exp(vals.iter().enumerate().map(|(o, &t)| t + node(k, start + o) + next[start + o]));
        }
    }

    let log_partition = log_sum_exp(alpha[nb - 1].iter().copied());
    if !log_partition.is_finite() {
        return Err(infeasible(nb - 1));
    }
    // pairs as q_{k−1}(m)·q(c_k | c_{k−1} = m) with locally normalized
    // rows; q_k is their column sum
    let mut first: Vec<f64> = (0..n).map(|i| (alpha[0][i] + beta[0][i] - log_partition).exp()).collect();
    let total: f64 = first.iter().sum();
    first.iter_mut().for_each(|q| *q /= total);
    let mut singletons = vec![first];
    let mut pairs = Vec::with_capacity(nb - 1);
    for k in 1..nb {
        let prev = &singletons[k - 1];
        let table = &pot.pairs[k - 1];
        let mut b = BandedTable::builder(n);
        let mut next = vec![0.0; n];
        for m in 0..n {
            let (start, vals) = table.row(m);
            let logits: Vec<f64> = vals.iter().enumerate().map(|(o, &t)| t + node(k, start + o) + beta[k][start + o]).collect();
            let lse = log_sum_exp(logits.iter().copied());
            let row: Vec<f64> = if prev[m] > 0.0 && lse > f64::NEG_INFINITY {
                logits.iter().map(|l| prev[m] * (l - lse).exp()).collect()
            } else {
                vec![0.0; logits.len()]
            };
            for (o, &p) in row.iter().enumerate() {
                next[start + o] += p;
            }
            b.push_row(start, row);
        }
        pairs.push(b.finish());
        singletons.push(next);
    }
    Ok(ColumnPosterior {
        singletons,
        pairs,
        log_partition,
    })
}
