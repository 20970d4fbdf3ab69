//! Per-step ridge regression on polynomial state features, with
//! deterministic accumulation and condition-number tracking.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{QbsdeError, Result};
use crate::paths::PathEnsemble;
use crate::util::{det_sum_vec, REDUCE_CHUNK};

/// Polynomial regression basis in (ln S or S, V) up to a total degree,
/// with a per-step ridge parameter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub ridge: f64,
    pub use_log_price: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3, ridge: 1e-8, use_log_price: true }
    }
}

impl RegressionBasis {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(QbsdeError::Config("basis degree must be >= 1".into()));
        }
        if self.ridge < 0.0 {
            return Err(QbsdeError::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// All monomial exponent tuples over `nvars` variables with total degree
/// at most `degree`, the constant term first.
pub(crate) fn monomial_exponents(nvars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; nvars]];
    for total in 1..=degree {
        let mut stack = vec![(Vec::<usize>::new(), total)];
        while let Some((prefix, left)) = stack.pop() {
            if prefix.len() == nvars {
                if left == 0 {
                    out.push(prefix);
                }
                continue;
            }
            let remaining = nvars - prefix.len();
            for e in (0..=left).rev() {
                if remaining == 1 && e != left {
                    continue;
                }
                let mut next = prefix.clone();
                next.push(e);
                stack.push((next, left - e));
            }
        }
    }
    out
}

const CONDITION_LIMIT: f64 = 1e10;
const STD_FLOOR: f64 = 1e-12;
/// Relative eigenvalue cutoff of the Gram pseudo-inverse.
const EIGEN_CUTOFF: f64 = 1e-12;

/// A fitted per-step design: standardized features plus one factorized
/// Gram reused for every regression target at that step.
///
/// The normal equations are solved through a symmetric eigenvalue
/// cutoff, so collinear state variables (and the resulting redundant
/// monomials) reduce the effective rank instead of breaking the solve.
pub(crate) struct StepRegression {
    /// (local path, feature) standardized design matrix.
    features: Vec<f64>,
    n_local: usize,
    n_feats: usize,
    /// Eigenvectors scaled by inverse eigenvalues (cutoff applied).
    pinv: DMatrix<f64>,
    pub condition: f64,
    /// The raw Gram was ill-conditioned and the rank was reduced.
    pub downgraded: bool,
}

impl StepRegression {
    /// Fit the design at `node` for paths `lo..hi`.
    pub fn fit(
        ensemble: &PathEnsemble,
        node: usize,
        lo: usize,
        hi: usize,
        basis: &RegressionBasis,
    ) -> Result<StepRegression> {
        StepRegression::fit_at_degree(ensemble, node, lo, hi, basis, basis.degree)
    }

    fn fit_at_degree(
        ensemble: &PathEnsemble,
        node: usize,
        lo: usize,
        hi: usize,
        basis: &RegressionBasis,
        degree: usize,
    ) -> Result<StepRegression> {
        let n_local = hi - lo;
        let d = ensemble.asset_dim();
        let nvars = d + usize::from(ensemble.has_factor());
        let exps = monomial_exponents(nvars, degree);

        // Raw state variables per path.
        let raw: Vec<f64> = (0..n_local * nvars)
            .into_par_iter()
            .map(|idx| {
                let local = idx / nvars;
                let k = idx % nvars;
                let p = lo + local;
                if k < d {
                    let s = ensemble.price(p, node, k);
                    if basis.use_log_price {
                        s.ln()
                    } else {
                        s
                    }
                } else {
                    ensemble.factor(p, node)
                }
            })
            .collect();

        // Per-variable mean/std for standardization.
        let sums = det_sum_vec(n_local, 2 * nvars, |i, acc| {
            for k in 0..nvars {
                let x = raw[i * nvars + k];
                acc[k] += x;
                acc[nvars + k] += x * x;
            }
        });
        let nf = n_local as f64;
        let mut mean = vec![0.0; nvars];
        let mut std = vec![0.0; nvars];
        for k in 0..nvars {
            mean[k] = sums[k] / nf;
            std[k] = ((sums[nvars + k] / nf - mean[k] * mean[k]).max(0.0)).sqrt();
        }

        // Keep monomials whose variables all carry signal; the constant
        // term always stays, so a degenerate step reduces to plain means.
        let live: Vec<bool> = (0..nvars)
            .map(|k| std[k] > STD_FLOOR * (1.0 + mean[k].abs()))
            .collect();
        let kept: Vec<&Vec<usize>> = exps
            .iter()
            .filter(|e| e.iter().enumerate().all(|(k, &p)| p == 0 || live[k]))
            .collect();
        let n_feats = kept.len();

        let mut features = vec![0.0f64; n_local * n_feats];
        features
            .par_chunks_mut(n_feats)
            .enumerate()
            .for_each(|(local, row)| {
                let mut zvar = [0.0f64; 8];
                for k in 0..nvars {
                    let x = raw[local * nvars + k];
                    zvar[k] = if live[k] { (x - mean[k]) / std[k] } else { 0.0 };
                }
                for (f, e) in kept.iter().enumerate() {
                    let mut prod = 1.0;
                    for (k, &p) in e.iter().enumerate() {
                        for _ in 0..p {
                            prod *= zvar[k];
                        }
                    }
                    row[f] = prod;
                }
            });

        // Gram matrix, deterministically accumulated.
        let tri = n_feats * (n_feats + 1) / 2;
        let gram_tri = {
            let features = &features;
            det_sum_vec(n_local, tri, move |i, acc| {
                let row = &features[i * n_feats..(i + 1) * n_feats];
                let mut idx = 0;
                for a in 0..n_feats {
                    let ra = row[a];
                    for b in a..n_feats {
                        acc[idx] += ra * row[b];
                        idx += 1;
                    }
                }
            })
        };
        let mut gram = DMatrix::zeros(n_feats, n_feats);
        let mut idx = 0;
        for a in 0..n_feats {
            for b in a..n_feats {
                gram[(a, b)] = gram_tri[idx];
                gram[(b, a)] = gram_tri[idx];
                idx += 1;
            }
        }
        // Ridge on everything but the intercept.
        for j in 1..n_feats {
            gram[(j, j)] += basis.ridge * nf;
        }

        let eig = gram.symmetric_eigen();
        let emax = eig.eigenvalues.max().max(0.0);
        let emin = eig.eigenvalues.min();
        let condition = if emin > 0.0 { emax / emin } else { f64::INFINITY };
        if emax <= 0.0 {
            return Err(QbsdeError::Solver(format!(
                "regression Gram degenerate at node {node}"
            )));
        }

        // Pseudo-inverse with an eigenvalue cutoff: redundant feature
        // directions are dropped instead of polluting the solve.
        let cutoff = EIGEN_CUTOFF * emax;
        let mut pinv = DMatrix::zeros(n_feats, n_feats);
        let mut kept_min = emax;
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > cutoff {
                kept_min = kept_min.min(lam);
                let col = eig.eigenvectors.column(k);
                for a in 0..n_feats {
                    for b in 0..n_feats {
                        pinv[(a, b)] += col[a] * col[b] / lam;
                    }
                }
            }
        }
        let downgraded = condition > CONDITION_LIMIT;

        Ok(StepRegression {
            features,
            n_local,
            n_feats,
            pinv,
            condition: emax / kept_min,
            downgraded,
        })
    }

    pub fn n_local(&self) -> usize {
        self.n_local
    }

    /// Regress `target` on the design; returns coefficients.
    ///
    /// The target is centered first and its mean folded back into the
    /// intercept, so constant targets reproduce exactly.
    pub fn solve<F>(&self, target: F) -> DVector<f64>
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let nf = self.n_feats;
        let features = &self.features;
        let mean = crate::util::det_sum(self.n_local, &target) / self.n_local as f64;
        let rhs = det_sum_vec(self.n_local, nf, |i, acc| {
            let y = target(i) - mean;
            let row = &features[i * nf..(i + 1) * nf];
            for (a, r) in acc.iter_mut().zip(row.iter()) {
                *a += r * y;
            }
        });
        let mut coef = &self.pinv * DVector::from_vec(rhs);
        coef[0] += mean;
        coef
    }

    /// Fitted values for previously solved coefficients.
    pub fn predict_into(&self, coef: &DVector<f64>, out: &mut [f64]) {
        let nf = self.n_feats;
        let features = &self.features;
        out.par_chunks_mut(REDUCE_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                let base = c * REDUCE_CHUNK;
                for (off, o) in chunk.iter_mut().enumerate() {
                    let i = base + off;
                    let row = &features[i * nf..(i + 1) * nf];
                    let mut acc = 0.0;
                    for (r, b) in row.iter().zip(coef.iter()) {
                        acc += r * b;
                    }
                    *o = acc;
                }
            });
    }

}
