//! Nearest positive semi-definite matrix in element-wise max norm,
//! `(K)_+ = argmin_{K1 >= 0} ||K - K1||_max`, computed by ADMM.
//!
//! Splitting: minimize `||K - B||_max + I_psd(A)` subject to `A = B`.
//! The A-update is an eigenvalue clamp, the B-update is the prox of the
//! max norm (Moreau: identity minus an l1-ball projection), and the dual
//! step size is rebalanced from the residuals.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct PsdProjectionOptions {
    /// Augmented-Lagrangian parameter (rebalanced adaptively during the run).
    pub admm_rho: f64,
    /// Max-norm tolerance on the primal residual ||A - B||_max.
    pub tol_primal: f64,
    /// Max-norm tolerance on the dual residual rho * ||B - B_prev||_max.
    pub tol_dual: f64,
    pub max_iters: usize,
    /// Eigenvalue clamp threshold: matrices with min eigenvalue >= -eig_floor
    /// count as PSD and short-circuit the ADMM entirely.
    pub eig_floor: f64,
}

impl Default for PsdProjectionOptions {
    fn default() -> Self {
        PsdProjectionOptions {
            admm_rho: 1.0,
            tol_primal: 1e-7,
            tol_dual: 1e-7,
            max_iters: 2000,
            eig_floor: 1e-10,
        }
    }
}

impl PsdProjectionOptions {
    /// Relaxed settings for Monte Carlo loops where the projection runs
    /// thousands of times and inference is insensitive below ~1e-4.
    pub fn fast() -> Self {
        PsdProjectionOptions {
            admm_rho: 1.0,
            tol_primal: 1e-4,
            tol_dual: 1e-4,
            max_iters: 150,
            eig_floor: 1e-10,
        }
    }
}

/// Element-wise max absolute difference between two same-shape matrices.
pub fn max_norm_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Euclidean projection onto the PSD cone: clamp negative eigenvalues at 0.
/// Idempotent up to rounding.
pub fn project_psd_cone(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .clone()
        .symmetric_eigen_try(1024)
        .ok_or(Error::EigFailure)?;
    let mut vals = eig.eigenvalues;
    let mut any_negative = false;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            any_negative = true;
        }
    }
    if !any_negative {
        return Ok(sym);
    }
    // V diag(vals+) V^T, then symmetrize away reconstruction rounding.
    let scaled = {
        let mut q = eig.eigenvectors.clone();
        for (j, v) in vals.iter().enumerate() {
            q.column_mut(j).scale_mut(*v);
        }
        q
    };
    let rec = scaled * eig.eigenvectors.transpose();
    Ok((&rec + rec.transpose()) * 0.5)
}

trait SymmetricEigenTry {
    fn symmetric_eigen_try(self, max_iter: usize) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>>;
}

impl SymmetricEigenTry for DMatrix<f64> {
    fn symmetric_eigen_try(self, max_iter: usize) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
        nalgebra::SymmetricEigen::try_new(self, f64::EPSILON, max_iter)
    }
}

/// Exact projection of `v` (in place) onto the l1 ball of radius `t`,
/// returned as the residual `v - proj` (which is the max-norm prox).
/// Sort-based threshold search.
fn linf_prox_in_place(d: &mut [f64], t: f64) {
    let l1: f64 = d.iter().map(|v| v.abs()).sum();
    if l1 <= t {
        // projection is d itself, prox residual is zero
        d.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    // find theta with sum(max(|d_i| - theta, 0)) = t
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cum += m;
        let cand = (cum - t) / (k + 1) as f64;
        if k + 1 == mags.len() || cand >= mags[k + 1] {
            theta = cand;
            break;
        }
    }
    for v in d.iter_mut() {
        // prox residual: clip toward the linf ball of radius theta
        *v = v.clamp(-theta, theta);
    }
}

/// Nearest PSD matrix to `k` in max norm. Returns the PSD iterate `A`;
/// if `k` is already PSD (min eigenvalue >= -eig_floor) it is returned
/// exactly without running ADMM.
pub fn nearest_psd(k: &DMatrix<f64>, opts: &PsdProjectionOptions) -> Result<DMatrix<f64>> {
    if k.nrows() != k.ncols() {
        return Err(Error::ShapeMismatch(format!("{:?} not square", k.shape())));
    }
    let asym = max_norm_distance(k, &k.transpose())?;
    if asym > 1e-10 * (1.0 + max_abs(k)) {
        return Err(Error::NotSymmetric(asym));
    }
    let k = (k + k.transpose()) * 0.5;

    // PSD short-circuit, and warm start from the cone projection otherwise.
    let eig = k.clone().symmetric_eigen_try(1024).ok_or(Error::EigFailure)?;
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig >= -opts.eig_floor {
        return Ok(k);
    }
    let mut b = {
        let mut vals = eig.eigenvalues.clone();
        vals.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut q = eig.eigenvectors.clone();
        for (j, v) in vals.iter().enumerate() {
            q.column_mut(j).scale_mut(*v);
        }
        let rec = q * eig.eigenvectors.transpose();
        (&rec + rec.transpose()) * 0.5
    };
    let mut u = DMatrix::<f64>::zeros(k.nrows(), k.ncols());
    let mut rho = opts.admm_rho;

    let mut a = b.clone();
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    for iter in 0..opts.max_iters {
        a = project_psd_cone(&(&b - &u))?;

        let b_prev = b;
        // B = K - prox_{(1/rho)||.||_max}(K - A - U)
        let mut d = &k - &a - &u;
        linf_prox_in_place(d.as_mut_slice(), 1.0 / rho);
        b = &k - d;

        u += &a - &b;

        primal = max_norm_distance(&a, &b)?;
        dual = rho * max_norm_distance(&b, &b_prev)?;
        if primal <= opts.tol_primal && dual <= opts.tol_dual {
            return Ok(a);
        }

        // residual balancing; the scaled dual must be rescaled with rho
        if iter % 10 == 9 {
            if primal > 10.0 * dual {
                rho *= 2.0;
                u /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    Err(Error::PsdNonConvergence {
        iters: opts.max_iters,
        primal,
        dual,
        best: Box::new(a),
    })
}

/// Like [`nearest_psd`] but accepts the best iterate when the iteration
/// cap is reached, reporting convergence in the second tuple slot.
pub fn nearest_psd_lenient(
    k: &DMatrix<f64>,
    opts: &PsdProjectionOptions,
) -> Result<(DMatrix<f64>, bool)> {
    match nearest_psd(k, opts) {
        Ok(m) => Ok((m, true)),
        Err(Error::PsdNonConvergence { best, .. }) => Ok((*best, false)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn max_norm_basics() {
        let a = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(max_norm_distance(&a, &a).unwrap(), 0.0);
        let b = DMatrix::from_element(2, 2, 0.7);
        assert_relative_eq!(max_norm_distance(&a, &b).unwrap(), 0.3, epsilon = 1e-15);
        let c = DMatrix::from_element(3, 2, 0.0);
        assert!(max_norm_distance(&a, &c).is_err());
    }

    #[test]
    fn max_norm_matches_scalar_loop() {
        let a: DMatrix<f64> =
            DMatrix::from_row_slice(3, 3, &[0.1, -2.0, 0.3, 1.4, 0.0, -0.6, 0.9, 0.2, -1.1]);
        let b: DMatrix<f64> =
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, 0.4, 0.5, -0.6, 0.9, 2.2, -1.0]);
        let mut want = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                want = want.max((a[(i, j)] - b[(i, j)]).abs());
            }
        }
        assert_eq!(max_norm_distance(&a, &b).unwrap(), want);
    }

    #[test]
    fn cone_projection_diagonal_clamp() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        let p = project_psd_cone(&m).unwrap();
        assert_relative_eq!(p[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(p[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cone_projection_keeps_positive_part() {
        // [[0,1],[1,0]] has eigenvalues +-1; keep the +1 eigenvector outer product.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = project_psd_cone(&m).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert_relative_eq!(max_norm_distance(&p, &want).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cone_projection_idempotent() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = project_psd_cone(&m).unwrap();
        assert_relative_eq!(
            max_norm_distance(&p, &m).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn nearest_psd_identity_short_circuit() {
        let id = DMatrix::<f64>::identity(4, 4);
        let p = nearest_psd(&id, &PsdProjectionOptions::default()).unwrap();
        assert_eq!(p, id);
    }

    #[test]
    fn nearest_psd_is_idempotent_via_short_circuit() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let opts = PsdProjectionOptions::default();
        let p1 = nearest_psd(&k, &opts).unwrap();
        let p2 = nearest_psd(&p1, &opts).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn nearest_psd_small_perturbation_feasibility_bound() {
        // diag(1, -eps): a feasible PSD point at distance eps exists.
        let eps = 1e-3;
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -eps]);
        let opts = PsdProjectionOptions::default();
        let p = nearest_psd(&k, &opts).unwrap();
        assert!(min_eigenvalue(&p) >= -1e-8);
        let dist = max_norm_distance(&k, &p).unwrap();
        assert!(dist <= eps + 1e-6, "distance {dist} exceeds {eps} + tol");
    }

    #[test]
    fn nearest_psd_rejects_asymmetry() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(
            nearest_psd(&k, &PsdProjectionOptions::default()),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn nearest_psd_output_symmetric_and_psd() {
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, -1.5, 2.0, 1.0, 0.3, -1.5, 0.3, -0.5]);
        let p = nearest_psd(&k, &PsdProjectionOptions::default()).unwrap();
        assert!(max_norm_distance(&p, &p.transpose()).unwrap() < 1e-12);
        assert!(min_eigenvalue(&p) >= -1e-8);
    }

    #[test]
    fn lenient_accepts_best_iterate() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let opts = PsdProjectionOptions {
            max_iters: 1,
            tol_primal: 1e-14,
            tol_dual: 1e-14,
            ..PsdProjectionOptions::default()
        };
        let (m, converged) = nearest_psd_lenient(&k, &opts).unwrap();
        assert!(!converged);
        assert_eq!(m.shape(), (2, 2));
    }

    #[test]
    fn linf_prox_zero_inside_ball() {
        let mut d = vec![0.1, -0.2, 0.05];
        linf_prox_in_place(&mut d, 1.0);
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linf_prox_matches_bisection_oracle() {
        let d0 = vec![3.0, -1.0, 0.5, 2.0, -2.5, 0.1];
        let t = 1.7;
        let mut d = d0.clone();
        linf_prox_in_place(&mut d, t);
        // oracle: bisection on theta for the l1-ball projection threshold
        let (mut lo, mut hi) = (0.0, 3.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = d0.iter().map(|v| (v.abs() - mid).max(0.0)).sum();
            if s > t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta = 0.5 * (lo + hi);
        for (got, orig) in d.iter().zip(&d0) {
            assert_relative_eq!(*got, orig.clamp(-theta, theta), epsilon = 1e-9);
        }
    }
}
