//! Decorrelated score test, one-step estimator, confidence intervals,
//! and theoretical local power for the error-prone coefficient.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cocolasso::{CorrectedMoments, ThetaEstimate};
use crate::decorrelation::OmegaEstimate;
use crate::error::{Error, Result};
use crate::model_data::Dataset;

/// Residual variance estimates can go negative in small samples after the
/// measurement error correction; values below this are clamped, with the
/// raw value kept for diagnostics.
pub const SIGMA_EPS_FLOOR: f64 = 1e-8;

/// Minimum admissible |Sigma_11 - omega' Sigma_21| for the one-step update.
pub const DENOM_FLOOR: f64 = 1e-6;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// S_beta = Sigma_11 beta + Sigma_12 gamma - rho_1.
    pub s_beta: f64,
    /// S_gamma = Sigma_21 beta + Sigma_22 gamma - rho_2.
    pub s_gamma: Vec<f64>,
    /// S_beta - omega' S_gamma.
    pub decorrelated: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SigmaEpsEstimate {
    /// Clamped at [`SIGMA_EPS_FLOOR`].
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub t_stat: f64,
    pub p_value: f64,
    pub beta_star: f64,
    /// Plug-in variance of the decorrelated score under the null.
    pub sigma2_h0: f64,
    pub sigma2_eps_h0: f64,
    pub sigma2_eps_h0_raw: f64,
    pub alpha: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneStepResult {
    pub beta_hat: f64,
    pub sigma2_beta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    /// Sigma_11 - omega' Sigma_21, the score derivative in beta.
    pub denominator: f64,
    pub sigma2_eps: f64,
    pub sigma2_eps_raw: f64,
}

fn check_gamma(m: &CorrectedMoments, gamma: &DVector<f64>) -> Result<()> {
    if gamma.len() != m.p() - 1 {
        return Err(Error::ShapeMismatch(format!(
            "gamma has {} entries, expected {}",
            gamma.len(),
            m.p() - 1
        )));
    }
    Ok(())
}

/// Corrected score `S_theta(theta) = Sigma_hat theta - rho_hat` (raw
/// corrected Gram matrix, not its PSD projection).
pub fn corrected_score(m: &CorrectedMoments, theta: &DVector<f64>) -> Result<DVector<f64>> {
    if theta.len() != m.p() {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} entries, expected {}",
            theta.len(),
            m.p()
        )));
    }
    Ok(&m.sigma_hat * theta - &m.rho_hat)
}

/// Score for beta with the nuisance directions projected out via omega.
pub fn decorrelated_score(
    m: &CorrectedMoments,
    beta: f64,
    gamma: &DVector<f64>,
    omega: &OmegaEstimate,
) -> Result<ScoreComponents> {
    check_gamma(m, gamma)?;
    if omega.omega.len() != m.p() - 1 {
        return Err(Error::ShapeMismatch(format!(
            "omega has {} entries, expected {}",
            omega.omega.len(),
            m.p() - 1
        )));
    }
    let mut theta = DVector::zeros(m.p());
    theta[0] = beta;
    theta.rows_mut(1, m.p() - 1).copy_from(gamma);
    let s = corrected_score(m, &theta)?;
    let s_beta = s[0];
    let s_gamma: Vec<f64> = s.iter().skip(1).cloned().collect();
    let dot: f64 = omega
        .omega
        .iter()
        .zip(&s_gamma)
        .map(|(o, g)| o * g)
        .sum();
    Ok(ScoreComponents {
        s_beta,
        s_gamma,
        decorrelated: s_beta - dot,
    })
}

/// Corrected residual variance
/// `n^{-1} sum (y_i - beta w_i - gamma' z_i)^2 - beta^2 sigma_u2`,
/// clamped below at [`SIGMA_EPS_FLOOR`].
pub fn sigma_eps_hat(d: &Dataset, beta: f64, gamma: &DVector<f64>) -> Result<SigmaEpsEstimate> {
    if gamma.len() != d.p() - 1 {
        return Err(Error::ShapeMismatch(format!(
            "gamma has {} entries, expected {}",
            gamma.len(),
            d.p() - 1
        )));
    }
    let resid = &d.y - beta * &d.w - &d.z * gamma;
    let raw = resid.norm_squared() / d.n() as f64 - beta * beta * d.sigma_u2;
    let clamped = raw < SIGMA_EPS_FLOOR;
    Ok(SigmaEpsEstimate {
        value: if clamped { SIGMA_EPS_FLOOR } else { raw },
        raw,
        clamped,
    })
}

/// Plug-in variance of the decorrelated score under H0: beta = beta*:
/// `(s2_eps + b^2 su2)(1 - omega' Sigma_21) + b^2 EU4 + s2_eps su2 - b^2 su2^2`.
pub fn test_variance(
    d: &Dataset,
    m: &CorrectedMoments,
    beta_star: f64,
    gamma: &DVector<f64>,
    omega: &OmegaEstimate,
) -> Result<(f64, SigmaEpsEstimate)> {
    let eps = sigma_eps_hat(d, beta_star, gamma)?;
    let b2 = beta_star * beta_star;
    let su2 = d.sigma_u2;
    let proj = 1.0 - omega.omega_vector().dot(&m.s21());
    let var = (eps.value + b2 * su2) * proj + b2 * d.eu4 + eps.value * su2 - b2 * su2 * su2;
    if var <= 0.0 {
        return Err(Error::NonPositiveVariance(var));
    }
    Ok((var, eps))
}

/// Two-sided decorrelated score test of H0: beta = beta*.
pub fn score_test(
    d: &Dataset,
    m: &CorrectedMoments,
    beta_star: f64,
    theta_tilde: &ThetaEstimate,
    omega: &OmegaEstimate,
    alpha: f64,
) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} not in (0, 1)")));
    }
    let gamma = DVector::from_vec(theta_tilde.gamma.clone());
    let score = decorrelated_score(m, beta_star, &gamma, omega)?;
    let (var, eps) = test_variance(d, m, beta_star, &gamma, omega)?;
    let t_stat = (m.n as f64).sqrt() * score.decorrelated / var.sqrt();
    let p_value = 2.0 * (1.0 - std_normal().cdf(t_stat.abs()));
    Ok(TestResult {
        t_stat,
        p_value,
        beta_star,
        sigma2_h0: var,
        sigma2_eps_h0: eps.value,
        sigma2_eps_h0_raw: eps.raw,
        alpha,
        reject: p_value < alpha,
    })
}

/// One-step estimator: Newton update of the affine decorrelated score
/// from the initial estimate, with the plug-in variance evaluated at the
/// updated beta, and the symmetric (1 - alpha) confidence interval.
pub fn one_step(
    d: &Dataset,
    m: &CorrectedMoments,
    theta_tilde: &ThetaEstimate,
    omega: &OmegaEstimate,
    alpha: f64,
) -> Result<OneStepResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} not in (0, 1)")));
    }
    let gamma = DVector::from_vec(theta_tilde.gamma.clone());
    let score = decorrelated_score(m, theta_tilde.beta, &gamma, omega)?;
    let denominator = m.s11() - omega.omega_vector().dot(&m.s21());
    if denominator.abs() < DENOM_FLOOR {
        return Err(Error::DegenerateDenominator(denominator));
    }
    let beta_hat = theta_tilde.beta - score.decorrelated / denominator;

    let eps = sigma_eps_hat(d, beta_hat, &gamma)?;
    let b2 = beta_hat * beta_hat;
    let su2 = d.sigma_u2;
    let proj = 1.0 - omega.omega_vector().dot(&m.s21());
    let inner = (eps.value + b2 * su2) * proj + b2 * d.eu4 + eps.value * su2 - b2 * su2 * su2;
    let sigma2_beta = inner / (proj * proj);
    if sigma2_beta <= 0.0 {
        return Err(Error::NonPositiveVariance(sigma2_beta));
    }

    let z = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    let half = z * (sigma2_beta / m.n as f64).sqrt();
    Ok(OneStepResult {
        beta_hat,
        sigma2_beta,
        ci_low: beta_hat - half,
        ci_high: beta_hat + half,
        alpha,
        denominator,
        sigma2_eps: eps.value,
        sigma2_eps_raw: eps.raw,
    })
}

/// Asymptotic power of the two-sided level-alpha test against the local
/// alternative with drift `h` and variance `sigma2_beta`:
/// `Phi(-z - h/sigma) + 1 - Phi(z - h/sigma)` with `Phi(z) = 1 - alpha/2`.
pub fn theoretical_power(h: f64, sigma2_beta: f64, alpha: f64) -> Result<f64> {
    if !(sigma2_beta > 0.0) {
        return Err(Error::NonPositiveVariance(sigma2_beta));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} not in (0, 1)")));
    }
    let norm = std_normal();
    let z = norm.inverse_cdf(1.0 - alpha / 2.0);
    let shift = h / sigma2_beta.sqrt();
    Ok(norm.cdf(-z - shift) + 1.0 - norm.cdf(z - shift))
}

/// Central difference of the decorrelated score in beta. The score is
/// affine in beta, so this matches `Sigma_11 - omega' Sigma_21` to
/// rounding; exposed for validation.
pub fn finite_diff_score_derivative(
    m: &CorrectedMoments,
    beta: f64,
    gamma: &DVector<f64>,
    omega: &OmegaEstimate,
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "step h = {h} outside [1e-7, 1e-4]"
        )));
    }
    let up = decorrelated_score(m, beta + h, gamma, omega)?.decorrelated;
    let dn = decorrelated_score(m, beta - h, gamma, omega)?.decorrelated;
    Ok((up - dn) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocolasso::corrected_moments;
    use crate::decorrelation::OmegaMethod;
    use crate::psd::PsdProjectionOptions;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn omega_of(v: Vec<f64>) -> OmegaEstimate {
        OmegaEstimate {
            l1_norm: v.iter().map(|x| x.abs()).sum(),
            omega: v,
            lambda_prime: 0.1,
            method: OmegaMethod::Lasso,
            feasibility_gap: 0.0,
        }
    }

    fn small_instance(seed: u64) -> (Dataset, CorrectedMoments) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let q = 4;
        let mut draw = move |scale: f64| {
            let v: f64 = StandardNormal.sample(&mut rng);
            scale * v
        };
        let x = DVector::from_fn(n, |_, _| draw(1.0));
        let z = DMatrix::from_fn(n, q, |_, _| draw(1.0));
        let su = 0.1;
        let u = DVector::from_fn(n, |_, _| draw(su));
        let eps = DVector::from_fn(n, |_, _| draw(0.2));
        let y = &x + z.column(0).into_owned() + eps;
        let w = x + u;
        let d = Dataset::new(y, w, z, su * su, Dataset::gaussian_eu4(su * su)).unwrap();
        let m = corrected_moments(&d, &PsdProjectionOptions::default()).unwrap();
        (d, m)
    }

    #[test]
    fn score_at_zero_is_minus_rho() {
        let (_, m) = small_instance(1);
        let s = corrected_score(&m, &DVector::zeros(m.p())).unwrap();
        for j in 0..m.p() {
            assert_relative_eq!(s[j], -m.rho_hat[j]);
        }
    }

    #[test]
    fn zero_omega_leaves_score_undecorrelated() {
        let (_, m) = small_instance(2);
        let gamma = DVector::from_element(m.p() - 1, 0.3);
        let omega = omega_of(vec![0.0; m.p() - 1]);
        let sc = decorrelated_score(&m, 0.7, &gamma, &omega).unwrap();
        assert_eq!(sc.decorrelated, sc.s_beta);
    }

    #[test]
    fn zero_coefficients_identity() {
        let (_, m) = small_instance(3);
        let gamma = DVector::zeros(m.p() - 1);
        let omega = omega_of(vec![0.1, -0.2, 0.05, 0.0]);
        let sc = decorrelated_score(&m, 0.0, &gamma, &omega).unwrap();
        let want = -m.rho1() + omega.omega_vector().dot(&m.rho2());
        assert_relative_eq!(sc.decorrelated, want, epsilon = 1e-12);
    }

    #[test]
    fn sigma_eps_at_zero_is_mean_square_response() {
        let (d, _) = small_instance(4);
        let est = sigma_eps_hat(&d, 0.0, &DVector::zeros(d.p() - 1)).unwrap();
        assert_relative_eq!(est.value, d.y.norm_squared() / d.n() as f64, epsilon = 1e-12);
        assert!(!est.clamped);
    }

    #[test]
    fn sigma_eps_clamps_negative_estimates() {
        // exact fit plus a large correction term drives the raw value negative
        let n = 10;
        let w = DVector::from_fn(n, |i, _| (i as f64 - 4.5) / 3.0);
        let y = 2.0 * &w;
        let z = DMatrix::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let d = Dataset::new(y, w, z, 0.5, 0.75).unwrap();
        let est = sigma_eps_hat(&d, 2.0, &DVector::zeros(1)).unwrap();
        assert!(est.clamped);
        assert_eq!(est.value, SIGMA_EPS_FLOOR);
        assert_relative_eq!(est.raw, -4.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn test_variance_error_free_reduces_to_residual_variance() {
        let (d0, _) = small_instance(5);
        let d = Dataset::new(d0.y.clone(), d0.w.clone(), d0.z.clone(), 0.0, 0.0).unwrap();
        let m = corrected_moments(&d, &PsdProjectionOptions::default()).unwrap();
        let gamma = DVector::zeros(d.p() - 1);
        let omega = omega_of(vec![0.0; d.p() - 1]);
        let (var, eps) = test_variance(&d, &m, 0.8, &gamma, &omega).unwrap();
        assert_relative_eq!(var, eps.value, epsilon = 1e-12);
    }

    #[test]
    fn test_variance_null_beta_zero() {
        let (d, m) = small_instance(6);
        let gamma = DVector::from_element(d.p() - 1, 0.1);
        let omega = omega_of(vec![0.2, 0.0, -0.1, 0.0]);
        let (var, eps) = test_variance(&d, &m, 0.0, &gamma, &omega).unwrap();
        let proj = 1.0 - omega.omega_vector().dot(&m.s21());
        assert_relative_eq!(var, eps.value * proj + eps.value * d.sigma_u2, epsilon = 1e-12);
    }

    #[test]
    fn p_value_and_rejection_consistent() {
        let (d, m) = small_instance(7);
        let theta = ThetaEstimate {
            beta: 1.0,
            gamma: vec![1.0, 0.0, 0.0, 0.0],
            support: vec![0, 1],
            lambda: 0.1,
            refitted: false,
            refit_refused: false,
            solver_iters: 1,
        };
        let omega = omega_of(vec![0.0; 4]);
        let r = score_test(&d, &m, 1.0, &theta, &omega, 0.05).unwrap();
        let norm = Normal::new(0.0, 1.0).unwrap();
        assert_relative_eq!(r.p_value, 2.0 * (1.0 - norm.cdf(r.t_stat.abs())), epsilon = 1e-14);
        assert_eq!(r.reject, r.p_value < 0.05);
    }

    #[test]
    fn one_step_is_exact_root_of_affine_score() {
        let (d, m) = small_instance(8);
        let theta = ThetaEstimate {
            beta: 0.9,
            gamma: vec![1.1, 0.0, 0.0, 0.0],
            support: vec![0, 1],
            lambda: 0.1,
            refitted: false,
            refit_refused: false,
            solver_iters: 1,
        };
        let omega = omega_of(vec![0.15, -0.05, 0.0, 0.02]);
        let r = one_step(&d, &m, &theta, &omega, 0.05).unwrap();
        // the score is affine in beta, so the Newton step lands on its root
        let gamma = DVector::from_vec(theta.gamma.clone());
        let at_root = decorrelated_score(&m, r.beta_hat, &gamma, &omega).unwrap();
        assert!(at_root.decorrelated.abs() < 1e-12);
        assert!(r.ci_low < r.beta_hat && r.beta_hat < r.ci_high);

        // restarting from the root changes nothing
        let theta2 = ThetaEstimate {
            beta: r.beta_hat,
            ..theta
        };
        let r2 = one_step(&d, &m, &theta2, &omega, 0.05).unwrap();
        assert!((r2.beta_hat - r.beta_hat).abs() <= 1e-10);
    }

    #[test]
    fn one_step_rejects_degenerate_denominator() {
        let (d, m) = small_instance(9);
        // omega chosen so omega' Sigma_21 = Sigma_11
        let s21 = m.s21();
        let scale = m.s11() / s21[0];
        let mut v = vec![0.0; 4];
        v[0] = scale;
        let omega = omega_of(v);
        let theta = ThetaEstimate {
            beta: 1.0,
            gamma: vec![0.0; 4],
            support: vec![0],
            lambda: 0.1,
            refitted: false,
            refit_refused: false,
            solver_iters: 1,
        };
        assert!(matches!(
            one_step(&d, &m, &theta, &omega, 0.05),
            Err(Error::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn power_at_zero_drift_is_alpha() {
        for alpha in [0.01, 0.05, 0.10] {
            // limited by the precision of the quantile function
            let p = theoretical_power(0.0, 0.5, alpha).unwrap();
            assert_relative_eq!(p, alpha, epsilon = 1e-9);
        }
    }

    #[test]
    fn power_increases_to_one() {
        let p1 = theoretical_power(1.0, 0.04, 0.05).unwrap();
        let p2 = theoretical_power(5.0, 0.04, 0.05).unwrap();
        assert!(p1 < p2);
        assert!((theoretical_power(100.0, 0.04, 0.05).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_at_critical_drift_is_half() {
        // h = 1.96... sigma gives Phi(-2z) + 1 - Phi(0) ~ 0.5000
        let norm = Normal::new(0.0, 1.0).unwrap();
        let z = norm.inverse_cdf(0.975);
        let sigma2: f64 = 0.09;
        let p = theoretical_power(z * sigma2.sqrt(), sigma2, 0.05).unwrap();
        assert_relative_eq!(p, norm.cdf(-2.0 * z) + 0.5, epsilon = 1e-12);
        assert!((p - 0.5).abs() < 1e-4);
    }

    #[test]
    fn finite_difference_matches_analytic_derivative() {
        let (_, m) = small_instance(10);
        let gamma = DVector::from_element(m.p() - 1, 0.2);
        let omega = omega_of(vec![0.3, -0.1, 0.0, 0.05]);
        let want = m.s11() - omega.omega_vector().dot(&m.s21());
        for h in [1e-7, 1e-5, 1e-4] {
            let got = finite_diff_score_derivative(&m, 0.8, &gamma, &omega, h).unwrap();
            assert!((got - want).abs() < 1e-6, "h = {h}: {got} vs {want}");
        }
        assert!(finite_diff_score_derivative(&m, 0.8, &gamma, &omega, 1e-3).is_err());
    }

    #[test]
    fn score_second_difference_vanishes() {
        let (_, m) = small_instance(11);
        let gamma = DVector::from_element(m.p() - 1, -0.4);
        let omega = omega_of(vec![0.1, 0.1, 0.1, 0.1]);
        let f = |b: f64| {
            decorrelated_score(&m, b, &gamma, &omega)
                .unwrap()
                .decorrelated
        };
        let second = f(1.2) - 2.0 * f(1.0) + f(0.8);
        assert!(second.abs() < 1e-12);
    }
}
