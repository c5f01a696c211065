//! Decorrelation vector omega: the population regression of x on z,
//! estimated either by a Dantzig-type linear program or by an l1-penalized
//! Gram regression, with cross-validated tuning of lambda'.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cocolasso::{fold_rows, lasso_gram_solve, log_grid, LassoOptions};
use crate::error::{Error, Result};
use crate::model_data::Dataset;
use crate::simplex::solve_lp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OmegaMethod {
    /// Minimize ||omega||_1 subject to ||Sigma_21 - Sigma_22 omega||_inf <= lambda'.
    Dantzig,
    /// Minimize 0.5 omega' Sigma_22 omega - Sigma_21' omega + lambda' ||omega||_1.
    Lasso,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaEstimate {
    pub omega: Vec<f64>,
    pub lambda_prime: f64,
    pub method: OmegaMethod,
    /// `||Sigma_21 - Sigma_22 omega||_inf - lambda_prime`; nonpositive
    /// means the Dantzig constraint holds at the returned point.
    pub feasibility_gap: f64,
    pub l1_norm: f64,
}

impl OmegaEstimate {
    pub fn omega_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.omega.clone())
    }
}

fn residual_inf_norm(s22: &DMatrix<f64>, s21: &DVector<f64>, omega: &DVector<f64>) -> f64 {
    (s21 - s22 * omega)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

fn check_blocks(s22: &DMatrix<f64>, s21: &DVector<f64>) -> Result<usize> {
    let d = s21.len();
    if s22.nrows() != d || s22.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "Sigma_22 is {:?} but Sigma_21 has {d} entries",
            s22.shape()
        )));
    }
    if d == 0 {
        return Err(Error::ShapeMismatch("Sigma_21 is empty".into()));
    }
    Ok(d)
}

/// Dantzig-type estimate via the split `omega = omega+ - omega-`:
/// `min 1'(omega+, omega-)  s.t.  +-(Sigma_22 omega - Sigma_21) <= lambda'`.
pub fn dantzig_omega(
    s22: &DMatrix<f64>,
    s21: &DVector<f64>,
    lambda_prime: f64,
) -> Result<OmegaEstimate> {
    let d = check_blocks(s22, s21)?;
    if !(lambda_prime > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda' = {lambda_prime} must be > 0"
        )));
    }

    // 2d constraints over x = (omega+, omega-) >= 0:
    //   Sigma_22 (omega+ - omega-) <= Sigma_21 + lambda'
    //  -Sigma_22 (omega+ - omega-) <= lambda' - Sigma_21
    let mut a = DMatrix::<f64>::zeros(2 * d, 2 * d);
    let mut b = vec![0.0f64; 2 * d];
    for i in 0..d {
        for j in 0..d {
            let s = s22[(i, j)];
            a[(i, j)] = s;
            a[(i, d + j)] = -s;
            a[(d + i, j)] = -s;
            a[(d + i, d + j)] = s;
        }
        b[i] = s21[i] + lambda_prime;
        b[d + i] = lambda_prime - s21[i];
    }
    let c = vec![1.0f64; 2 * d];
    let max_iters = 50 * (4 * d + 1).max(100);
    let sol = solve_lp(&c, &a, &b, max_iters)?;

    let omega = DVector::from_fn(d, |j, _| sol.x[j] - sol.x[d + j]);
    let resid = residual_inf_norm(s22, s21, &omega);
    Ok(OmegaEstimate {
        l1_norm: omega.iter().map(|v| v.abs()).sum(),
        omega: omega.iter().cloned().collect(),
        lambda_prime,
        method: OmegaMethod::Dantzig,
        feasibility_gap: resid - lambda_prime,
    })
}

/// l1-penalized estimate on the exact Gram blocks. `Sigma_22 = Z'Z/n` is
/// PSD by construction, so no projection step is involved.
pub fn lasso_omega(
    s22: &DMatrix<f64>,
    s21: &DVector<f64>,
    lambda_prime: f64,
    opts: &LassoOptions,
) -> Result<OmegaEstimate> {
    check_blocks(s22, s21)?;
    let sol = lasso_gram_solve(s22, s21, lambda_prime, opts, None)?;
    let resid = residual_inf_norm(s22, s21, &sol.theta);
    Ok(OmegaEstimate {
        l1_norm: sol.theta.iter().map(|v| v.abs()).sum(),
        omega: sol.theta.iter().cloned().collect(),
        lambda_prime,
        method: OmegaMethod::Lasso,
        feasibility_gap: resid - lambda_prime,
    })
}

pub fn estimate_omega(
    s22: &DMatrix<f64>,
    s21: &DVector<f64>,
    lambda_prime: f64,
    method: OmegaMethod,
    lasso_opts: &LassoOptions,
) -> Result<OmegaEstimate> {
    match method {
        OmegaMethod::Dantzig => dantzig_omega(s22, s21, lambda_prime),
        OmegaMethod::Lasso => lasso_omega(s22, s21, lambda_prime, lasso_opts),
    }
}

/// Default lambda' grid: 30 log-spaced multiples of `sqrt(log p / n)`
/// from 3 down to 0.01, descending.
pub fn default_lambda_prime_grid(p: usize, n: usize) -> Vec<f64> {
    let rate = ((p as f64).ln() / n as f64).sqrt();
    log_grid(3.0 * rate, 0.01 * rate, 30)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaCvPoint {
    pub lambda_prime: f64,
    pub mean_score: f64,
    pub per_fold: Vec<f64>,
}

/// Gram blocks `(Z'Z/n, Z'w/n)` for a row subset; the measurement error
/// correction only touches the (w, w) entry, so these are exact.
fn z_blocks(d: &Dataset, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let q = d.z.ncols();
    let m = rows.len() as f64;
    let mut s22 = DMatrix::<f64>::zeros(q, q);
    let mut s21 = DVector::<f64>::zeros(q);
    for &i in rows {
        let zi = d.z.row(i);
        for a in 0..q {
            s21[a] += zi[a] * d.w[i];
            for b in a..q {
                s22[(a, b)] += zi[a] * zi[b];
            }
        }
    }
    for a in 0..q {
        for b in a..q {
            let v = s22[(a, b)] / m;
            s22[(a, b)] = v;
            s22[(b, a)] = v;
        }
    }
    s21 /= m;
    (s22, s21)
}

/// K-fold CV for lambda'. Each fold fits omega on the training Gram blocks
/// and scores the held-out fold with
/// `||Sigma_21_val - Sigma_22_val omega||_2^2`. Ties break toward the
/// larger lambda'.
pub fn cv_select_lambda_prime(
    d: &Dataset,
    grid: &[f64],
    k_folds: usize,
    method: OmegaMethod,
    lasso_opts: &LassoOptions,
) -> Result<(f64, Vec<OmegaCvPoint>)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if k_folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "k_folds = {k_folds} must be >= 2"
        )));
    }
    let n = d.n();
    let folds = fold_rows(n, k_folds);
    for (f, rows) in folds.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::FoldTooSmall {
                fold: f,
                size: rows.len(),
            });
        }
    }

    let mut scores = vec![vec![0.0f64; k_folds]; grid.len()];
    for (f, val_rows) in folds.iter().enumerate() {
        let train_rows: Vec<usize> = (0..n).filter(|i| i % k_folds != f).collect();
        let (ts22, ts21) = z_blocks(d, &train_rows);
        let (vs22, vs21) = z_blocks(d, val_rows);
        let mut warm: Option<DVector<f64>> = None;
        for (g, &lp) in grid.iter().enumerate() {
            let omega = match method {
                OmegaMethod::Dantzig => Some(dantzig_omega(&ts22, &ts21, lp)?.omega_vector()),
                OmegaMethod::Lasso => {
                    match lasso_gram_solve(&ts22, &ts21, lp, lasso_opts, warm.as_ref()) {
                        Ok(sol) => {
                            warm = Some(sol.theta.clone());
                            Some(sol.theta)
                        }
                        // slow crawl on a rank-deficient training Gram;
                        // rule the grid point out instead of failing the fold
                        Err(Error::LassoNonConvergence(_)) => {
                            warm = None;
                            None
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            scores[g][f] = match omega {
                Some(o) => (&vs21 - &vs22 * o).norm_squared(),
                None => f64::INFINITY,
            };
        }
    }

    let mut table = Vec::with_capacity(grid.len());
    for (g, &lp) in grid.iter().enumerate() {
        let mean = scores[g].iter().sum::<f64>() / k_folds as f64;
        table.push(OmegaCvPoint {
            lambda_prime: lp,
            mean_score: mean,
            per_fold: scores[g].clone(),
        });
    }

    let mut best = &table[0];
    for point in &table[1..] {
        let better = point.mean_score < best.mean_score
            || (point.mean_score == best.mean_score && point.lambda_prime > best.lambda_prime);
        if better {
            best = point;
        }
    }
    if !best.mean_score.is_finite() {
        return Err(Error::LassoNonConvergence(lasso_opts.max_sweeps));
    }
    Ok((best.lambda_prime, table))
}
