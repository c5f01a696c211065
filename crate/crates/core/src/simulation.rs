//! Seeded Monte Carlo harness: AR(1) Gaussian design, the simulation
//! data-generating process, and replication studies summarizing type I
//! error, power, estimator bias, and confidence interval coverage.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocolasso::{
    cocolasso_fit_with_moments, corrected_moments_lenient, cv_select_lambda_one_se,
    default_lambda_grid,
    LassoOptions,
};
use crate::decorrelation::{
    cv_select_lambda_prime, default_lambda_prime_grid, estimate_omega, OmegaMethod,
};
use crate::error::{Error, Result};
use crate::inference::{one_step, score_test};
use crate::model_data::Dataset;
use crate::psd::PsdProjectionOptions;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// AR(1) design correlation.
    pub rho: f64,
    pub sigma_eps: f64,
    pub sigma_u: f64,
    /// True coefficient vector (beta_0, gamma_0), length p.
    pub theta0: Vec<f64>,
    /// Overrides theta0[0] for power runs; None means theta0[0].
    pub beta_true: Option<f64>,
    /// Null value tested in every replication.
    pub beta_star: f64,
    pub replications: usize,
    pub base_seed: u64,
    pub omega_method: OmegaMethod,
    pub alpha_levels: Vec<f64>,
    /// CI level for the coverage summary.
    pub ci_alpha: f64,
    /// Reuse the tuning parameters selected on the first replication for
    /// the whole cell instead of re-running CV every time.
    pub fast_tuning: bool,
    /// Keep per-replication records in the report.
    pub keep_records: bool,
    pub lambda_folds: usize,
    pub lambda_prime_folds: usize,
}

impl SimConfig {
    /// Sparse truth (1, 1, 0, ...).
    pub fn scenario1(n: usize, rho: f64, sigma_u: f64) -> Self {
        Self::with_theta0(n, rho, sigma_u, &[1.0, 1.0])
    }

    /// Sparse truth (1, 0.8, 1.5, 0, ...).
    pub fn scenario2(n: usize, rho: f64, sigma_u: f64) -> Self {
        Self::with_theta0(n, rho, sigma_u, &[1.0, 0.8, 1.5])
    }

    fn with_theta0(n: usize, rho: f64, sigma_u: f64, head: &[f64]) -> Self {
        let p = 250;
        let mut theta0 = vec![0.0; p];
        theta0[..head.len()].copy_from_slice(head);
        SimConfig {
            n,
            p,
            rho,
            sigma_eps: 0.2,
            sigma_u,
            theta0,
            beta_true: None,
            beta_star: 1.0,
            replications: 1000,
            base_seed: 20250801,
            omega_method: OmegaMethod::Lasso,
            alpha_levels: vec![0.01, 0.05, 0.10],
            ci_alpha: 0.05,
            fast_tuning: false,
            keep_records: false,
            lambda_folds: 5,
            lambda_prime_folds: 4,
        }
    }

    pub fn beta_true_value(&self) -> f64 {
        self.beta_true.unwrap_or(self.theta0[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.theta0.len() != self.p {
            return Err(Error::InvalidConfig(format!(
                "theta0 has {} entries for p = {}",
                self.theta0.len(),
                self.p
            )));
        }
        if self.rho.abs() >= 1.0 {
            return Err(Error::BadRho(self.rho));
        }
        if self.replications < 1 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_eps = {} must be > 0",
                self.sigma_eps
            )));
        }
        if self.sigma_u < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma_u = {} must be >= 0",
                self.sigma_u
            )));
        }
        if self.alpha_levels.is_empty()
            || self.alpha_levels.iter().any(|a| !(*a > 0.0 && *a < 1.0))
            || !(self.ci_alpha > 0.0 && self.ci_alpha < 1.0)
        {
            return Err(Error::InvalidConfig("alpha levels must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Looser coordinate-descent settings for Monte Carlo loops: tolerances
/// below inference-relevant digits, with a sweep cap that cuts off the
/// rank-deficient crawl near the unbounded end of the tuning grids (CV
/// treats those points as infinitely bad rather than failing).
pub fn mc_lasso_options() -> LassoOptions {
    LassoOptions {
        coord_tol: 1e-7,
        max_sweeps: 2000,
        ..LassoOptions::default()
    }
}

/// splitmix64: a bijection on u64, used to derive statistically
/// independent per-replication seeds from the base seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn replication_seed(base_seed: u64, rep: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(rep as u64))
}

/// n x p matrix with iid N(0, Sigma) rows, Sigma_jk = rho^|j-k|, built by
/// the AR(1) recursion x_1 = e_1, x_j = rho x_{j-1} + sqrt(1-rho^2) e_j.
pub fn gen_ar1_design(n: usize, p: usize, rho: f64, seed: u64) -> Result<DMatrix<f64>> {
    if rho.abs() >= 1.0 {
        return Err(Error::BadRho(rho));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = prev;
        for j in 1..p {
            let e: f64 = rng.sample(StandardNormal);
            prev = rho * prev + scale * e;
            x[(i, j)] = prev;
        }
    }
    Ok(x)
}

/// One simulated dataset plus the latent error-free covariate. The design
/// uses RNG stream 0 and the noise (epsilon first, then u) stream 1, so
/// the design is reproducible independently of the noise draws.
pub fn gen_dataset(cfg: &SimConfig, seed: u64) -> Result<(Dataset, DVector<f64>)> {
    cfg.validate()?;
    let design = gen_ar1_design(cfg.n, cfg.p, cfg.rho, seed)?;
    let x = design.column(0).into_owned();
    let z = design.columns(1, cfg.p - 1).into_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut draw = |scale: f64| -> f64 {
        let v: f64 = rng.sample(StandardNormal);
        scale * v
    };
    let eps = DVector::from_fn(cfg.n, |_, _| draw(cfg.sigma_eps));
    let u = DVector::from_fn(cfg.n, |_, _| draw(cfg.sigma_u));

    let gamma0 = DVector::from_fn(cfg.p - 1, |j, _| cfg.theta0[j + 1]);
    let y = cfg.beta_true_value() * &x + &z * &gamma0 + eps;
    let w = &x + u;
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let d = Dataset::new(y, w, z, su2, Dataset::gaussian_eu4(su2))?;
    Ok((d, x))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub t_stat: f64,
    pub p_value: f64,
    pub beta_hat: f64,
    /// sqrt(sigma2_beta / n).
    pub sd_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub lambda: f64,
    pub lambda_prime: f64,
    pub support_size: usize,
    pub projection_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionEntry {
    pub alpha: f64,
    pub rejections: usize,
    pub rate: f64,
    /// Binomial standard error at the observed rate.
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    /// Replications that completed the full pipeline.
    pub effective_replications: usize,
    pub rejection: Vec<RejectionEntry>,
    pub mean_beta_hat: f64,
    pub empirical_sd: f64,
    pub mean_estimated_sd: f64,
    pub ci_coverage: f64,
    pub failures: Vec<(usize, String)>,
    /// True when more than 2% of replications failed.
    pub excessive_failures: bool,
    pub projection_nonconverged: usize,
    pub tuning_mode: String,
    pub wall_time_secs: f64,
    pub records: Option<Vec<RepRecord>>,
}

impl SimReport {
    /// JSON with the wall clock zeroed; bit-identical across worker counts
    /// and machines for a fixed config.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_time_secs = 0.0;
        serde_json::to_string_pretty(&clone).expect("report serialization")
    }
}

struct RepOutcome {
    record: RepRecord,
}

fn run_replication(
    cfg: &SimConfig,
    rep: usize,
    fixed_tuning: Option<(f64, f64)>,
) -> Result<RepOutcome> {
    let seed = replication_seed(cfg.base_seed, rep);
    let (d, _) = gen_dataset(cfg, seed)?;
    let psd_opts = PsdProjectionOptions::fast();
    let lasso_opts = mc_lasso_options();

    let (lambda, lambda_prime) = match fixed_tuning {
        Some(t) => t,
        None => select_tuning(cfg, &d, &psd_opts, &lasso_opts)?,
    };

    let m = corrected_moments_lenient(&d, &psd_opts)?;
    let theta = cocolasso_fit_with_moments(&m, lambda, true, &lasso_opts)?;
    let omega = estimate_omega(&m.s22(), &m.s21(), lambda_prime, cfg.omega_method, &lasso_opts)?;

    let min_alpha = cfg
        .alpha_levels
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let test = score_test(&d, &m, cfg.beta_star, &theta, &omega, min_alpha)?;
    let ci = one_step(&d, &m, &theta, &omega, cfg.ci_alpha)?;

    let truth = cfg.beta_true_value();
    Ok(RepOutcome {
        record: RepRecord {
            rep,
            seed,
            t_stat: test.t_stat,
            p_value: test.p_value,
            beta_hat: ci.beta_hat,
            sd_hat: (ci.sigma2_beta / cfg.n as f64).sqrt(),
            ci_low: ci.ci_low,
            ci_high: ci.ci_high,
            covered: ci.ci_low <= truth && truth <= ci.ci_high,
            lambda,
            lambda_prime,
            support_size: theta.support.len(),
            projection_converged: m.projection_converged,
        },
    })
}

fn select_tuning(
    cfg: &SimConfig,
    d: &Dataset,
    psd_opts: &PsdProjectionOptions,
    lasso_opts: &LassoOptions,
) -> Result<(f64, f64)> {
    let (_, rho_hat) = crate::cocolasso::raw_corrected_gram(d);
    let grid = default_lambda_grid(&rho_hat, 50);
    let (lambda, _) = cv_select_lambda_one_se(d, &grid, cfg.lambda_folds, psd_opts, lasso_opts)?;
    let grid_p = default_lambda_prime_grid(cfg.p, cfg.n);
    let (lambda_prime, _) = cv_select_lambda_prime(
        d,
        &grid_p,
        cfg.lambda_prime_folds,
        cfg.omega_method,
        lasso_opts,
    )?;
    Ok((lambda, lambda_prime))
}

/// Run the full study on a dedicated pool of `threads` workers (0 means
/// the rayon default). Replications are independent; aggregation follows
/// replication order, so the report does not depend on the worker count.
pub fn run_monte_carlo(cfg: &SimConfig, threads: usize) -> Result<SimReport> {
    cfg.validate()?;
    let start = Instant::now();

    let fixed_tuning = if cfg.fast_tuning {
        let seed = replication_seed(cfg.base_seed, 0);
        let (d, _) = gen_dataset(cfg, seed)?;
        Some(select_tuning(
            cfg,
            &d,
            &PsdProjectionOptions::fast(),
            &mc_lasso_options(),
        )?)
    } else {
        None
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<std::result::Result<RepOutcome, String>> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_replication(cfg, rep, fixed_tuning).map_err(|e| e.to_string()))
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => records.push(o.record),
            Err(msg) => failures.push((rep, msg)),
        }
    }
    let k = records.len();
    if k == 0 {
        return Err(Error::InvalidConfig(format!(
            "all {} replications failed; first failure: {}",
            cfg.replications,
            failures
                .first()
                .map(|(_, m)| m.as_str())
                .unwrap_or("unknown")
        )));
    }
    let kf = k as f64;

    let rejection = cfg
        .alpha_levels
        .iter()
        .map(|&alpha| {
            let rejections = records.iter().filter(|r| r.p_value < alpha).count();
            let rate = rejections as f64 / kf;
            RejectionEntry {
                alpha,
                rejections,
                rate,
                std_error: (rate * (1.0 - rate) / kf).sqrt(),
            }
        })
        .collect();

    let mean_beta_hat = records.iter().map(|r| r.beta_hat).sum::<f64>() / kf;
    let empirical_sd = if k > 1 {
        (records
            .iter()
            .map(|r| (r.beta_hat - mean_beta_hat).powi(2))
            .sum::<f64>()
            / (kf - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let mean_estimated_sd = records.iter().map(|r| r.sd_hat).sum::<f64>() / kf;
    let ci_coverage = records.iter().filter(|r| r.covered).count() as f64 / kf;
    let projection_nonconverged = records.iter().filter(|r| !r.projection_converged).count();
    let excessive_failures = failures.len() as f64 > 0.02 * cfg.replications as f64;

    Ok(SimReport {
        config: cfg.clone(),
        effective_replications: k,
        rejection,
        mean_beta_hat,
        empirical_sd,
        mean_estimated_sd,
        ci_coverage,
        failures,
        excessive_failures,
        projection_nonconverged,
        tuning_mode: if cfg.fast_tuning {
            "reused-from-first".into()
        } else {
            "per-replication".into()
        },
        wall_time_secs: start.elapsed().as_secs_f64(),
        records: if cfg.keep_records {
            Some(records)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerPoint {
    pub beta_true: f64,
    pub alpha: f64,
    pub rejection_rate: f64,
    pub std_error: f64,
    pub effective_replications: usize,
}

/// Rejection rates over a (beta_true, alpha) grid; each beta cell is a
/// full Monte Carlo run of `cfg` with the truth overridden.
pub fn power_curve(
    cfg: &SimConfig,
    beta_grid: &[f64],
    alpha_grid: &[f64],
    threads: usize,
) -> Result<Vec<PowerPoint>> {
    if beta_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut points = Vec::with_capacity(beta_grid.len() * alpha_grid.len());
    for &beta in beta_grid {
        let mut cell = cfg.clone();
        cell.beta_true = Some(beta);
        cell.alpha_levels = alpha_grid.to_vec();
        let report = run_monte_carlo(&cell, threads)?;
        for entry in &report.rejection {
            points.push(PowerPoint {
                beta_true: beta,
                alpha: entry.alpha,
                rejection_rate: entry.rate,
                std_error: entry.std_error,
                effective_replications: report.effective_replications,
            });
        }
    }
    Ok(points)
}

pub fn write_power_csv<W: std::io::Write>(points: &[PowerPoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "beta_true",
        "alpha",
        "rejection_rate",
        "std_error",
        "effective_replications",
    ])
    .map_err(csv_io)?;
    for p in points {
        wtr.write_record([
            p.beta_true.to_string(),
            p.alpha.to_string(),
            p.rejection_rate.to_string(),
            p.std_error.to_string(),
            p.effective_replications.to_string(),
        ])
        .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Table-shaped summary (one row per alpha plus the estimator block).
pub fn write_summary_csv<W: std::io::Write>(report: &SimReport, mut out: W) -> Result<()> {
    writeln!(out, "metric,alpha,value,std_error")?;
    for e in &report.rejection {
        writeln!(
            out,
            "rejection_rate,{},{},{}",
            e.alpha, e.rate, e.std_error
        )?;
    }
    writeln!(out, "mean_beta_hat,,{},", report.mean_beta_hat)?;
    writeln!(out, "empirical_sd,,{},", report.empirical_sd)?;
    writeln!(out, "mean_estimated_sd,,{},", report.mean_estimated_sd)?;
    writeln!(
        out,
        "ci_coverage,{},{},",
        report.config.ci_alpha, report.ci_coverage
    )?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
