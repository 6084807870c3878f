//! ℓ₁-penalized Gaussian precision estimation.
//!
//! Minimizes `−log det K + ⟨S, K⟩ + α·Σ_{i≠j} |K_ij|` by block coordinate
//! descent over the columns of `W = K⁻¹`, each block being a lasso solved by
//! cyclic coordinate descent. The diagonal is not penalized, so `W_ii = S_ii`
//! throughout.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

pub fn glasso_objective(s: &DMatrix<f64>, k: &DMatrix<f64>, alpha: f64) -> f64 {
    let log_det = match Cholesky::new(k.clone()) {
        Some(c) => c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>(),
        None => return f64::INFINITY,
    };
    let mut l1 = 0.0;
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            if i != j {
                l1 += k[(i, j)].abs();
            }
        }
    }
    -log_det + s.dot(k) + alpha * l1
}

/// Largest violation of the stationarity conditions
/// `S − K⁻¹ + α·Z = 0`, `Z_ij = sign(K_ij)` on the support and `|Z_ij| ≤ 1`
/// off it, `Z_ii = 0`.
pub fn kkt_residual(s: &DMatrix<f64>, k: &DMatrix<f64>, alpha: f64) -> f64 {
    let inv = match Cholesky::new(k.clone()) {
        Some(c) => c.inverse(),
        None => return f64::INFINITY,
    };
    let g = s - inv;
    let mut worst: f64 = 0.0;
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            let r = if i == j {
                g[(i, j)].abs()
            } else if k[(i, j)] != 0.0 {
                (g[(i, j)] + alpha * k[(i, j)].signum()).abs()
            } else {
                (g[(i, j)].abs() - alpha).max(0.0)
            };
            worst = worst.max(r);
        }
    }
    worst
}

pub fn graphical_lasso(s: &DMatrix<f64>, alpha: f64, tol: f64, max_iter: usize) -> Result<GlassoFit> {
    let p = s.nrows();
    if p == 0 || s.ncols() != p {
        return Err(Error::InvalidParameter(format!("covariance must be square and non-empty, got {}×{}", s.nrows(), s.ncols())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {alpha}")));
    }
    if (s - s.transpose()).amax() > 1e-10 * s.amax().max(1.0) {
        return Err(Error::InvalidParameter("covariance is not symmetric".into()));
    }
    if (0..p).any(|i| !(s[(i, i)] > 0.0)) {
        return Err(Error::InvalidParameter("covariance has a non-positive diagonal entry".into()));
    }

    let mut w = s.clone();
    // beta[(.., j)] holds the lasso coefficients of column j (entry j unused)
    let mut beta = DMatrix::<f64>::zeros(p, p);
    let mut precision = DMatrix::zeros(p, p);
    let mut residual = f64::INFINITY;
    let inner_tol = 1e-14 * s.amax().max(1e-300);

    for sweep in 1..=max_iter {
        for j in 0..p {
            for _ in 0..10_000 {
                let mut max_change: f64 = 0.0;
                for a in 0..p {
                    if a == j {
                        continue;
                    }
                    let mut r = s[(a, j)];
                    for b in 0..p {
                        if b != j && b != a {
                            r -= w[(a, b)] * beta[(b, j)];
                        }
                    }
                    let new = soft_threshold(r, alpha) / w[(a, a)];
                    max_change = max_change.max((new - beta[(a, j)]).abs() * w[(a, a)]);
                    beta[(a, j)] = new;
                }
                if max_change <= inner_tol {
                    break;
                }
            }
            for a in 0..p {
                if a == j {
                    continue;
                }
                let mut w12 = 0.0;
                for b in 0..p {
                    if b != j {
                        w12 += w[(a, b)] * beta[(b, j)];
                    }
                }
                w[(a, j)] = w12;
                w[(j, a)] = w12;
            }
        }

        for j in 0..p {
            let mut quad = 0.0;
            for a in 0..p {
                if a != j {
                    quad += w[(a, j)] * beta[(a, j)];
                }
            }
            let kjj = 1.0 / (w[(j, j)] - quad);
            precision[(j, j)] = kjj;
            for a in 0..p {
                if a != j {
                    precision[(a, j)] = -beta[(a, j)] * kjj;
                }
            }
        }
        let sym = (&precision + precision.transpose()) * 0.5;
        residual = kkt_residual(s, &sym, alpha);
        if residual <= tol {
            return Ok(GlassoFit {
                precision: sym,
                covariance: w,
                sweeps: sweep,
                kkt_residual: residual,
            });
        }
    }
    Err(Error::NonConvergence {
        solver: "graphical lasso",
        iterations: max_iter,
        residual,
    })
}

/// Symmetric positive definite precision stored as its upper-triangle
/// nonzeros, with the log-determinant cached.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision {
    dim: usize,
    /// `(row, col, value)` with `row ≤ col`, row-major order.
    entries: Vec<(u32, u32, f64)>,
    log_det: f64,
}

impl SparsePrecision {
    pub fn from_dense(k: &DMatrix<f64>) -> Result<Self> {
        let dim = k.nrows();
        let chol = Cholesky::new(k.clone()).ok_or_else(|| Error::Singular("precision is not positive definite".into()))?;
        let log_det = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let mut entries = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                let v = k[(i, j)];
                if v != 0.0 {
                    entries.push((i as u32, j as u32, v));
                }
            }
        }
        Ok(Self { dim, entries, log_det })
    }

    pub(crate) fn from_parts(dim: usize, entries: Vec<(u32, u32, f64)>, log_det: f64) -> Result<Self> {
        if entries.iter().any(|&(i, j, _)| i > j || j as usize >= dim) {
            return Err(Error::Format("precision entry outside the upper triangle".into()));
        }
        Ok(Self { dim, entries, log_det })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for &(i, j, v) in &self.entries {
            let (i, j) = (i as usize, j as usize);
            if i == j {
                acc += v * x[i] * x[i];
            } else {
                acc += 2.0 * v * x[i] * x[j];
            }
        }
        acc
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, v) in &self.entries {
            k[(i as usize, j as usize)] = v;
            k[(j as usize, i as usize)] = v;
        }
        k
    }
}
