//! Corrected moments and the CoCoLasso initial estimator: l1-penalized
//! least squares on the PSD-projected corrected Gram matrix, with
//! cross-validated tuning and support-restricted refitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_data::Dataset;
use crate::psd::{nearest_psd, nearest_psd_lenient, PsdProjectionOptions};

/// Corrected second moments of the observed data:
/// `sigma_hat = (W,Z)'(W,Z)/n - diag(sigma_u2, 0, ..)`, its nearest-PSD
/// projection `sigma_tilde`, and the cross moment `rho_hat = (W,Z)'Y/n`.
#[derive(Debug, Clone)]
pub struct CorrectedMoments {
    pub sigma_hat: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub rho_hat: DVector<f64>,
    pub n: usize,
    /// False when the PSD projection was accepted at its iteration cap.
    pub projection_converged: bool,
}

impl CorrectedMoments {
    pub fn p(&self) -> usize {
        self.rho_hat.len()
    }

    /// Sigma_hat_11 = mean(w^2) - sigma_u2 (scalar block).
    pub fn s11(&self) -> f64 {
        self.sigma_hat[(0, 0)]
    }

    /// Sigma_hat_21 = Z'w/n as a column vector (equals Sigma_hat_12').
    pub fn s21(&self) -> DVector<f64> {
        let p = self.p();
        DVector::from_fn(p - 1, |j, _| self.sigma_hat[(j + 1, 0)])
    }

    /// Sigma_hat_22 = Z'Z/n.
    pub fn s22(&self) -> DMatrix<f64> {
        let p = self.p();
        self.sigma_hat.view((1, 1), (p - 1, p - 1)).into_owned()
    }

    pub fn rho1(&self) -> f64 {
        self.rho_hat[0]
    }

    pub fn rho2(&self) -> DVector<f64> {
        self.rho_hat.rows(1, self.p() - 1).into_owned()
    }
}

/// Raw corrected Gram matrix and cross moment, no PSD projection.
pub fn raw_corrected_gram(d: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let n = d.n();
    let p = d.p();
    let mut q = DMatrix::zeros(n, p);
    q.column_mut(0).copy_from(&d.w);
    q.view_mut((0, 1), (n, p - 1)).copy_from(&d.z);
    let nf = n as f64;
    let mut sigma = q.transpose() * &q / nf;
    sigma[(0, 0)] -= d.sigma_u2;
    let rho = q.transpose() * &d.y / nf;
    (sigma, rho)
}

/// Assemble corrected moments; `sigma_tilde = nearest_psd(sigma_hat)`,
/// with an exact short-circuit when `sigma_hat` is already PSD.
pub fn corrected_moments(d: &Dataset, opts: &PsdProjectionOptions) -> Result<CorrectedMoments> {
    let (sigma_hat, rho_hat) = raw_corrected_gram(d);
    let sigma_tilde = nearest_psd(&sigma_hat, opts)?;
    Ok(CorrectedMoments {
        sigma_hat,
        sigma_tilde,
        rho_hat,
        n: d.n(),
        projection_converged: true,
    })
}

/// As [`corrected_moments`] but keeps the best ADMM iterate when the
/// projection hits its iteration cap (Monte Carlo loops prefer a flagged
/// approximate projection over a lost replication).
pub fn corrected_moments_lenient(
    d: &Dataset,
    opts: &PsdProjectionOptions,
) -> Result<CorrectedMoments> {
    let (sigma_hat, rho_hat) = raw_corrected_gram(d);
    let (sigma_tilde, converged) = nearest_psd_lenient(&sigma_hat, opts)?;
    Ok(CorrectedMoments {
        sigma_hat,
        sigma_tilde,
        rho_hat,
        n: d.n(),
        projection_converged: converged,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    /// Stop when no coordinate moves more than this within a sweep.
    pub coord_tol: f64,
    pub max_sweeps: usize,
    pub kkt_tol: f64,
    /// Coordinates with a Gram diagonal at or below this are frozen at zero.
    pub diag_floor: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            coord_tol: 1e-9,
            max_sweeps: 10_000,
            kkt_tol: 1e-7,
            diag_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub theta: DVector<f64>,
    pub sweeps: usize,
    /// Worst KKT residual over all coordinates at the returned point.
    pub kkt_residual: f64,
    /// Coordinates frozen at zero because of a degenerate Gram diagonal.
    pub frozen: Vec<usize>,
}

pub fn lasso_objective(
    sigma: &DMatrix<f64>,
    rho: &DVector<f64>,
    lambda: f64,
    theta: &DVector<f64>,
) -> f64 {
    0.5 * (sigma * theta).dot(theta) - rho.dot(theta) + lambda * theta.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for
/// `min 0.5 theta' Sigma theta - rho' theta + lambda ||theta||_1`
/// on a PSD Gram matrix, warm-startable via `theta0`.
pub fn lasso_gram_solve(
    sigma_tilde: &DMatrix<f64>,
    rho_hat: &DVector<f64>,
    lambda: f64,
    opts: &LassoOptions,
    theta0: Option<&DVector<f64>>,
) -> Result<LassoSolution> {
    let p = rho_hat.len();
    if sigma_tilde.nrows() != p || sigma_tilde.ncols() != p {
        return Err(Error::ShapeMismatch(format!(
            "gram {:?} vs rho {p}",
            sigma_tilde.shape()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda = {lambda} must be > 0")));
    }

    let mut theta = match theta0 {
        Some(t) if t.len() == p => t.clone(),
        _ => DVector::zeros(p),
    };
    let mut frozen = Vec::new();
    for j in 0..p {
        if sigma_tilde[(j, j)] <= opts.diag_floor {
            frozen.push(j);
            theta[j] = 0.0;
        }
    }

    // maintain q = Sigma * theta
    let mut q = sigma_tilde * &theta;
    let mut sweeps = 0;
    loop {
        let mut max_delta = 0.0f64;
        let mut max_theta = 0.0f64;
        for j in 0..p {
            let djj = sigma_tilde[(j, j)];
            if djj <= opts.diag_floor {
                continue;
            }
            let old = theta[j];
            let partial = rho_hat[j] - (q[j] - djj * old);
            let new = soft_threshold(partial, lambda) / djj;
            if new != old {
                let delta = new - old;
                q.axpy(delta, &sigma_tilde.column(j), 1.0);
                theta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
            max_theta = max_theta.max(theta[j].abs());
        }
        sweeps += 1;
        if max_delta <= opts.coord_tol {
            break;
        }
        // a singular Gram matrix makes the objective unbounded below once
        // lambda drops under the out-of-range part of rho; iterates then
        // run away instead of cycling
        if max_theta > 1e10 {
            return Err(Error::LassoNonConvergence(sweeps));
        }
        if sweeps >= opts.max_sweeps {
            return Err(Error::LassoNonConvergence(opts.max_sweeps));
        }
    }

    // KKT certificate: |g_j| <= lambda on the zero set,
    // g_j + lambda*sign(theta_j) = 0 on the active set.
    let g = sigma_tilde * &theta - rho_hat;
    let mut kkt = 0.0f64;
    for j in 0..p {
        if frozen.contains(&j) {
            continue;
        }
        let r = if theta[j] == 0.0 {
            (g[j].abs() - lambda).max(0.0)
        } else {
            (g[j] + lambda * theta[j].signum()).abs()
        };
        kkt = kkt.max(r);
    }

    Ok(LassoSolution {
        theta,
        sweeps,
        kkt_residual: kkt,
        frozen,
    })
}

/// Sparse coefficient estimate (beta, gamma) with tuning metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub beta: f64,
    pub gamma: Vec<f64>,
    /// Indices into theta = (beta, gamma) with nonzero penalized coefficients.
    pub support: Vec<usize>,
    pub lambda: f64,
    pub refitted: bool,
    /// True when refitting was requested but refused (|support| > n).
    pub refit_refused: bool,
    pub solver_iters: usize,
}

impl ThetaEstimate {
    pub fn theta(&self) -> DVector<f64> {
        let mut t = DVector::zeros(1 + self.gamma.len());
        t[0] = self.beta;
        for (j, g) in self.gamma.iter().enumerate() {
            t[j + 1] = *g;
        }
        t
    }
}

/// CoCoLasso fit at a fixed lambda, optionally refitting corrected least
/// squares on the selected support (`theta_S = sigma_tilde_SS^{-1} rho_S`).
pub fn cocolasso_fit_with_moments(
    m: &CorrectedMoments,
    lambda: f64,
    refit: bool,
    opts: &LassoOptions,
) -> Result<ThetaEstimate> {
    let sol = lasso_gram_solve(&m.sigma_tilde, &m.rho_hat, lambda, opts, None)?;
    let support: Vec<usize> = sol
        .theta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, _)| j)
        .collect();

    let mut theta = sol.theta.clone();
    let mut refitted = false;
    let mut refit_refused = false;
    if refit && !support.is_empty() {
        if support.len() > m.n {
            refit_refused = true;
        } else {
            let s = support.len();
            let mut sub = DMatrix::zeros(s, s);
            let mut rhs = DVector::zeros(s);
            for (a, &ja) in support.iter().enumerate() {
                rhs[a] = m.rho_hat[ja];
                for (b, &jb) in support.iter().enumerate() {
                    sub[(a, b)] = m.sigma_tilde[(ja, jb)];
                }
            }
            // principal submatrix of a PSD matrix; ridge-stabilize if the
            // Cholesky still fails numerically
            let mut ridge = 0.0;
            let solved = loop {
                let mut trial = sub.clone();
                for a in 0..s {
                    trial[(a, a)] += ridge;
                }
                if let Some(chol) = trial.cholesky() {
                    break Some(chol.solve(&rhs));
                }
                ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
                if ridge > 1e-4 {
                    break None;
                }
            };
            if let Some(coef) = solved {
                theta = DVector::zeros(m.p());
                for (a, &ja) in support.iter().enumerate() {
                    theta[ja] = coef[a];
                }
                refitted = true;
            }
        }
    }

    Ok(ThetaEstimate {
        beta: theta[0],
        gamma: theta.rows(1, m.p() - 1).iter().cloned().collect(),
        support,
        lambda,
        refitted,
        refit_refused,
        solver_iters: sol.sweeps,
    })
}

/// Convenience wrapper: build moments, then fit.
pub fn cocolasso_fit(
    d: &Dataset,
    lambda: f64,
    refit: bool,
    psd_opts: &PsdProjectionOptions,
    lasso_opts: &LassoOptions,
) -> Result<ThetaEstimate> {
    let m = corrected_moments(d, psd_opts)?;
    cocolasso_fit_with_moments(&m, lambda, refit, lasso_opts)
}

/// Default lambda grid: `n_points` log-spaced values from
/// `||rho_hat||_inf` down to `0.001 ||rho_hat||_inf`, descending.
pub fn default_lambda_grid(rho_hat: &DVector<f64>, n_points: usize) -> Vec<f64> {
    let lmax = rho_hat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    log_grid(lmax, 1e-3 * lmax, n_points)
}

pub(crate) fn log_grid(hi: f64, lo: f64, n_points: usize) -> Vec<f64> {
    if n_points == 1 {
        return vec![hi];
    }
    let (lh, ll) = (hi.ln(), lo.ln());
    (0..n_points)
        .map(|i| (lh + (ll - lh) * i as f64 / (n_points - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_score: f64,
    pub per_fold: Vec<f64>,
}

pub(crate) fn fold_rows(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::new(); k];
    for i in 0..n {
        folds[i % k].push(i);
    }
    folds
}

/// K-fold CV for the CoCoLasso tuning parameter. Each fold fits the
/// penalized path on the training moments and scores the held-out fold
/// with the corrected validation loss
/// `CV(lambda) = 0.5 theta' Sigma_val theta - rho_val' theta`.
/// Ties break toward the larger lambda.
pub fn cv_select_lambda(
    d: &Dataset,
    grid: &[f64],
    k_folds: usize,
    psd_opts: &PsdProjectionOptions,
    lasso_opts: &LassoOptions,
) -> Result<(f64, Vec<CvPoint>)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if k_folds < 2 {
        return Err(Error::InvalidConfig(format!("k_folds = {k_folds} must be >= 2")));
    }
    let n = d.n();
    let folds = fold_rows(n, k_folds);
    for (f, rows) in folds.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::FoldTooSmall { fold: f, size: rows.len() });
        }
    }

    let mut scores = vec![vec![0.0f64; k_folds]; grid.len()];
    for (f, val_rows) in folds.iter().enumerate() {
        let train_rows: Vec<usize> = (0..n).filter(|i| i % k_folds != f).collect();
        let train = d.subset(&train_rows);
        let val = d.subset(val_rows);
        let tm = corrected_moments_lenient(&train, psd_opts)?;
        let (vs, vr) = raw_corrected_gram(&val);

        let mut warm: Option<DVector<f64>> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            match lasso_gram_solve(&tm.sigma_tilde, &tm.rho_hat, lambda, lasso_opts, warm.as_ref()) {
                Ok(sol) => {
                    scores[g][f] = 0.5 * (&vs * &sol.theta).dot(&sol.theta) - vr.dot(&sol.theta);
                    warm = Some(sol.theta);
                }
                // unbounded below at this lambda (singular training Gram);
                // rule the grid point out instead of failing the fold
                Err(Error::LassoNonConvergence(_)) => {
                    scores[g][f] = f64::INFINITY;
                    warm = None;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut table = Vec::with_capacity(grid.len());
    for (g, &lambda) in grid.iter().enumerate() {
        let mean = scores[g].iter().sum::<f64>() / k_folds as f64;
        table.push(CvPoint {
            lambda,
            mean_score: mean,
            per_fold: scores[g].clone(),
        });
    }

    let mut best = &table[0];
    for point in &table[1..] {
        let better = point.mean_score < best.mean_score
            || (point.mean_score == best.mean_score && point.lambda > best.lambda);
        if better {
            best = point;
        }
    }
    if !best.mean_score.is_finite() {
        return Err(Error::LassoNonConvergence(lasso_opts.max_sweeps));
    }
    Ok((best.lambda, table))
}

/// One-standard-error rule over a CV table: the largest lambda whose mean
/// score is within one fold standard error of the minimum. Prefers sparser
/// fits than the plain minimizer, which matters when the support is refit.
pub fn one_se_lambda(table: &[CvPoint]) -> Result<f64> {
    let best = table
        .iter()
        .filter(|p| p.mean_score.is_finite())
        .min_by(|a, b| a.mean_score.total_cmp(&b.mean_score))
        .ok_or(Error::EmptyGrid)?;
    let k = best.per_fold.len() as f64;
    let var = best
        .per_fold
        .iter()
        .map(|s| (s - best.mean_score).powi(2))
        .sum::<f64>()
        / (k - 1.0).max(1.0);
    let threshold = best.mean_score + (var / k).sqrt();
    Ok(table
        .iter()
        .filter(|p| p.mean_score.is_finite() && p.mean_score <= threshold)
        .map(|p| p.lambda)
        .fold(best.lambda, f64::max))
}

/// CV selection with the one-standard-error rule applied to the corrected
/// validation loss table. Used by the fitting pipeline and the simulation
/// harness; `cv_select_lambda` returns the plain minimizer.
pub fn cv_select_lambda_one_se(
    d: &Dataset,
    grid: &[f64],
    k_folds: usize,
    psd_opts: &PsdProjectionOptions,
    lasso_opts: &LassoOptions,
) -> Result<(f64, Vec<CvPoint>)> {
    let (_, table) = cv_select_lambda(d, grid, k_folds, psd_opts, lasso_opts)?;
    let lambda = one_se_lambda(&table)?;
    Ok((lambda, table))
}
