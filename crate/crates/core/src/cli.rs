//! Command-line surface: CSV ingestion, the fit/test/ci/moments commands,
//! and the Monte Carlo driver. Reports are JSON (machine) plus a short
//! human-readable summary on standard output.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cocolasso::{
    cocolasso_fit_with_moments, corrected_moments, cv_select_lambda_one_se, default_lambda_grid,
    CorrectedMoments, LassoOptions, ThetaEstimate,
};
use crate::decorrelation::{
    cv_select_lambda_prime, default_lambda_prime_grid, estimate_omega, OmegaEstimate, OmegaMethod,
};
use crate::error::{Error, Result};
use crate::inference::{one_step, score_test, OneStepResult, TestResult};
use crate::model_data::{
    estimate_error_moments, standardize, surrogate_from_replicates, Dataset, ErrorMoments,
    ReplicateMatrix, StandardizationRecord,
};
use crate::psd::PsdProjectionOptions;
use crate::simulation::{
    power_curve, run_monte_carlo, write_power_csv, write_summary_csv, SimConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "cocoscore",
    version,
    about = "Corrected decorrelated score inference for linear regression \
             with one error-prone covariate"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sparse corrected-lasso fit of all coefficients.
    Fit(FitCmd),
    /// Score test of H0: beta = beta-star for the error-prone coefficient.
    Test(TestCmd),
    /// One-step estimate and confidence interval for the error-prone coefficient.
    Ci(CiCmd),
    /// Measurement-error moment estimates from replicate surrogate columns.
    Moments(MomentsCmd),
    /// Seeded Monte Carlo study of level, power, bias, and coverage.
    Simulate(SimulateCmd),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, env = "COCOSCORE_INPUT")]
    input: PathBuf,

    /// Response column name.
    #[arg(long, env = "COCOSCORE_RESPONSE", default_value = "y")]
    response: String,

    /// Surrogate (error-prone covariate) column; requires --sigma-u2.
    #[arg(long, env = "COCOSCORE_SURROGATE", conflicts_with = "replicates")]
    surrogate: Option<String>,

    /// Replicate surrogate columns (comma separated, at least 2); the
    /// surrogate becomes their row mean and the error moments are
    /// estimated from pairwise differences.
    #[arg(
        long,
        env = "COCOSCORE_REPLICATES",
        value_delimiter = ',',
        conflicts_with = "sigma_u2"
    )]
    replicates: Vec<String>,

    /// Known measurement error variance (raw scale).
    #[arg(long, env = "COCOSCORE_SIGMA_U2")]
    sigma_u2: Option<f64>,

    /// Known fourth error moment E(U^4); defaults to the Gaussian value
    /// 3 sigma_u2^2 when only --sigma-u2 is given.
    #[arg(long, env = "COCOSCORE_EU4", requires = "sigma_u2")]
    eu4: Option<f64>,

    /// Raise replicate-estimated E(U^4) to its Jensen floor sigma_U^4
    /// instead of failing when the raw estimate violates it.
    #[arg(long, env = "COCOSCORE_CLAMP_JENSEN")]
    clamp_jensen: bool,
}

#[derive(Debug, Args)]
struct TuningArgs {
    /// Penalty for the initial sparse fit; cross-validated when absent.
    #[arg(long, env = "COCOSCORE_LAMBDA")]
    lambda: Option<f64>,

    /// Penalty for the decorrelation vector; cross-validated when absent.
    #[arg(long, env = "COCOSCORE_LAMBDA_PRIME")]
    lambda_prime: Option<f64>,

    /// Folds for the lambda cross-validation.
    #[arg(long, env = "COCOSCORE_FOLDS", default_value_t = 5)]
    folds: usize,

    #[arg(long, env = "COCOSCORE_OMEGA_METHOD", value_enum, default_value_t = OmegaMethod::Dantzig)]
    omega_method: OmegaMethod,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Write the JSON report here; defaults to standard output.
    #[arg(long, env = "COCOSCORE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct TestCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Hypothesized coefficient of the error-prone covariate (raw scale).
    #[arg(long, env = "COCOSCORE_BETA_STAR", default_value_t = 0.0)]
    beta_star: f64,
    #[arg(long, env = "COCOSCORE_ALPHA", default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct CiCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    out: OutArgs,
    /// 1 - confidence level.
    #[arg(long, env = "COCOSCORE_ALPHA", default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct MomentsCmd {
    /// CSV file with a header row.
    #[arg(long, env = "COCOSCORE_INPUT")]
    input: PathBuf,
    /// Replicate surrogate columns (comma separated, at least 2).
    #[arg(long, env = "COCOSCORE_REPLICATES", value_delimiter = ',', required = true)]
    replicates: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SimulateCmd {
    /// 1: theta0 = (1, 1, 0, ...); 2: theta0 = (1, 0.8, 1.5, 0, ...).
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 250)]
    p: usize,
    /// AR(1) design correlation.
    #[arg(long, default_value_t = 0.25)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_u: f64,
    #[arg(long, default_value_t = 0.2)]
    sigma_eps: f64,
    /// True beta, overriding the scenario value (power runs).
    #[arg(long)]
    beta_true: Option<f64>,
    /// Null value tested in every replication.
    #[arg(long, env = "COCOSCORE_BETA_STAR", default_value_t = 1.0)]
    beta_star: f64,
    #[arg(long, default_value_t = 1000)]
    replications: usize,
    #[arg(long, env = "COCOSCORE_SEED", default_value_t = 20250801)]
    seed: u64,
    /// Worker threads; 0 means all available cores.
    #[arg(long, env = "COCOSCORE_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(long, env = "COCOSCORE_OMEGA_METHOD", value_enum, default_value_t = OmegaMethod::Lasso)]
    omega_method: OmegaMethod,
    /// Significance levels for the rejection-rate table.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.10])]
    alpha: Vec<f64>,
    /// Reuse the tuning from the first replication across the whole cell.
    #[arg(long)]
    fast_tuning: bool,
    /// Keep per-replication records in the JSON report.
    #[arg(long)]
    keep_records: bool,
    #[command(flatten)]
    out: OutArgs,
    /// Also write a table-shaped summary CSV here.
    #[arg(long)]
    summary_csv: Option<PathBuf>,
    /// True-beta grid for a power curve (comma separated); each value is
    /// a full Monte Carlo cell.
    #[arg(long, value_delimiter = ',')]
    power_betas: Vec<f64>,
    /// Power-curve CSV output path (requires --power-betas).
    #[arg(long, requires = "power_betas")]
    power_csv: Option<PathBuf>,
}

/// Entry point: returns the process exit code (0 success, 1 invalid
/// input or configuration, 2 solver failure).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(cmd) => cmd_fit(cmd),
        Command::Test(cmd) => cmd_test(cmd),
        Command::Ci(cmd) => cmd_ci(cmd),
        Command::Moments(cmd) => cmd_moments(cmd),
        Command::Simulate(cmd) => cmd_simulate(cmd),
    }
}

// ---------------------------------------------------------------- ingestion

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn column(&self, idx: usize) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[idx]))
    }
}

fn read_table(path: &PathBuf) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Parse {
                row: 0,
                msg: format!("cannot open {}: {e}", path.display()),
            },
            _ => Error::Parse {
                row: 0,
                msg: e.to_string(),
            },
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            msg: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1; // 1-based data row
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            msg: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(header.len());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row: row_no,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 0,
            msg: "no data rows".into(),
        });
    }
    Ok(Table { header, rows })
}

#[derive(Debug)]
struct Ingested {
    standardized: Dataset,
    record: StandardizationRecord,
    /// Replicate-based estimates (per single measurement), when used.
    replicate_moments: Option<ErrorMoments>,
}

fn ingest(args: &DataArgs) -> Result<Ingested> {
    let table = read_table(&args.input)?;
    let y_idx = table.column_index(&args.response)?;
    let y = table.column(y_idx);

    let mut used = vec![y_idx];
    let (w, sigma_u2, eu4, replicate_moments) = if !args.replicates.is_empty() {
        if args.replicates.len() < 2 {
            return Err(Error::InvalidReplicates(args.replicates.len()));
        }
        let idxs = args
            .replicates
            .iter()
            .map(|c| table.column_index(c))
            .collect::<Result<Vec<_>>>()?;
        used.extend(&idxs);
        let values = DMatrix::from_fn(table.rows.len(), idxs.len(), |i, j| {
            table.rows[i][idxs[j]]
        });
        let reps = ReplicateMatrix::new(values)?;
        let per_measurement = estimate_error_moments(&reps)?;
        let (w, avg) = surrogate_from_replicates(&reps)?;
        let (su2, eu4) = if args.clamp_jensen {
            avg.clamped()
        } else {
            (avg.sigma_u2, avg.eu4)
        };
        (w, su2, eu4, Some(per_measurement))
    } else {
        let col = args.surrogate.as_ref().ok_or_else(|| {
            Error::InvalidConfig("either --surrogate with --sigma-u2 or --replicates is required".into())
        })?;
        let su2 = args.sigma_u2.ok_or_else(|| {
            Error::InvalidConfig("--sigma-u2 is required with --surrogate".into())
        })?;
        if su2 < 0.0 {
            return Err(Error::InvalidConfig(format!("sigma_u2 = {su2} must be >= 0")));
        }
        let idx = table.column_index(col)?;
        used.push(idx);
        let eu4 = args.eu4.unwrap_or_else(|| Dataset::gaussian_eu4(su2));
        (table.column(idx), su2, eu4, None)
    };

    let z_idxs: Vec<usize> = (0..table.header.len())
        .filter(|j| !used.contains(j))
        .collect();
    if z_idxs.is_empty() {
        return Err(Error::InvalidConfig(
            "no covariate columns remain after the response and surrogate".into(),
        ));
    }
    let z = DMatrix::from_fn(table.rows.len(), z_idxs.len(), |i, j| {
        table.rows[i][z_idxs[j]]
    });

    let raw = Dataset::new(y, w, z, sigma_u2, eu4)?;
    let (standardized, record) = standardize(&raw)?;
    Ok(Ingested {
        standardized,
        record,
        replicate_moments,
    })
}

// ----------------------------------------------------------------- pipeline

struct Pipeline {
    moments: CorrectedMoments,
    theta: ThetaEstimate,
    omega: OmegaEstimate,
    lambda: f64,
    lambda_prime: f64,
}

fn run_pipeline(d: &Dataset, tuning: &TuningArgs) -> Result<Pipeline> {
    let psd_opts = PsdProjectionOptions::default();
    let lasso_opts = LassoOptions::default();

    let moments = corrected_moments(d, &psd_opts)?;
    let lambda = match tuning.lambda {
        Some(l) => l,
        None => {
            let grid = default_lambda_grid(&moments.rho_hat, 50);
            cv_select_lambda_one_se(d, &grid, tuning.folds, &psd_opts, &lasso_opts)?.0
        }
    };
    let theta = cocolasso_fit_with_moments(&moments, lambda, true, &lasso_opts)?;

    let lambda_prime = match tuning.lambda_prime {
        Some(l) => l,
        None => {
            let grid = default_lambda_prime_grid(d.p(), d.n());
            cv_select_lambda_prime(d, &grid, 4, tuning.omega_method, &lasso_opts)?.0
        }
    };
    let omega = estimate_omega(
        &moments.s22(),
        &moments.s21(),
        lambda_prime,
        tuning.omega_method,
        &lasso_opts,
    )?;

    Ok(Pipeline {
        moments,
        theta,
        omega,
        lambda,
        lambda_prime,
    })
}

fn emit<T: Serialize>(out: &OutArgs, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidConfig(format!("report serialization: {e}")))?;
    match &out.out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

// ----------------------------------------------------------------- commands

#[derive(Serialize)]
struct FitReport {
    schema_version: u32,
    lambda: f64,
    lambda_prime: f64,
    omega_method: OmegaMethod,
    omega_l1_norm: f64,
    estimate_standardized: ThetaEstimate,
    beta_original: f64,
    gamma_original: Vec<f64>,
    standardization: StandardizationRecord,
    projection_converged: bool,
    replicate_moments: Option<ErrorMoments>,
}

fn cmd_fit(cmd: FitCmd) -> Result<()> {
    let data = ingest(&cmd.data)?;
    let pipe = run_pipeline(&data.standardized, &cmd.tuning)?;
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        lambda: pipe.lambda,
        lambda_prime: pipe.lambda_prime,
        omega_method: cmd.tuning.omega_method,
        omega_l1_norm: pipe.omega.l1_norm,
        beta_original: data.record.beta_raw(pipe.theta.beta),
        gamma_original: data.record.gamma_raw(&pipe.theta.gamma),
        estimate_standardized: pipe.theta,
        standardization: data.record,
        projection_converged: pipe.moments.projection_converged,
        replicate_moments: data.replicate_moments,
    };
    println!(
        "fit: beta = {:.6} (original scale), support size {}, lambda = {:.4e}",
        report.beta_original,
        report.estimate_standardized.support.len(),
        report.lambda
    );
    emit(&cmd.out, &report)
}

#[derive(Serialize)]
struct TestReport {
    schema_version: u32,
    beta_star_original: f64,
    beta_star_standardized: f64,
    result: TestResult,
    lambda: f64,
    lambda_prime: f64,
    omega_method: OmegaMethod,
    omega_l1_norm: f64,
    replicate_moments: Option<ErrorMoments>,
}

fn cmd_test(cmd: TestCmd) -> Result<()> {
    let data = ingest(&cmd.data)?;
    let pipe = run_pipeline(&data.standardized, &cmd.tuning)?;
    // hypotheses are stated on the raw scale; beta_raw = beta_std * w_scale
    let beta_star_std = cmd.beta_star / data.record.w_scale;
    let result = score_test(
        &data.standardized,
        &pipe.moments,
        beta_star_std,
        &pipe.theta,
        &pipe.omega,
        cmd.alpha,
    )?;
    println!(
        "test H0: beta = {}: T = {:.4}, p = {:.4e}, {} at alpha = {}",
        cmd.beta_star,
        result.t_stat,
        result.p_value,
        if result.reject { "REJECT" } else { "do not reject" },
        cmd.alpha
    );
    let report = TestReport {
        schema_version: SCHEMA_VERSION,
        beta_star_original: cmd.beta_star,
        beta_star_standardized: beta_star_std,
        result,
        lambda: pipe.lambda,
        lambda_prime: pipe.lambda_prime,
        omega_method: cmd.tuning.omega_method,
        omega_l1_norm: pipe.omega.l1_norm,
        replicate_moments: data.replicate_moments,
    };
    emit(&cmd.out, &report)
}

#[derive(Serialize)]
struct CiReport {
    schema_version: u32,
    result_standardized: OneStepResult,
    beta_hat_original: f64,
    ci_low_original: f64,
    ci_high_original: f64,
    lambda: f64,
    lambda_prime: f64,
    omega_method: OmegaMethod,
    omega_l1_norm: f64,
    standardization: StandardizationRecord,
    replicate_moments: Option<ErrorMoments>,
}

fn cmd_ci(cmd: CiCmd) -> Result<()> {
    let data = ingest(&cmd.data)?;
    let pipe = run_pipeline(&data.standardized, &cmd.tuning)?;
    let result = one_step(
        &data.standardized,
        &pipe.moments,
        &pipe.theta,
        &pipe.omega,
        cmd.alpha,
    )?;
    let report = CiReport {
        schema_version: SCHEMA_VERSION,
        beta_hat_original: data.record.beta_raw(result.beta_hat),
        ci_low_original: data.record.beta_raw(result.ci_low),
        ci_high_original: data.record.beta_raw(result.ci_high),
        result_standardized: result,
        lambda: pipe.lambda,
        lambda_prime: pipe.lambda_prime,
        omega_method: cmd.tuning.omega_method,
        omega_l1_norm: pipe.omega.l1_norm,
        standardization: data.record,
        replicate_moments: data.replicate_moments,
    };
    println!(
        "one-step: beta = {:.6}, {:.0}% CI ({:.6}, {:.6}) (original scale)",
        report.beta_hat_original,
        100.0 * (1.0 - cmd.alpha),
        report.ci_low_original,
        report.ci_high_original
    );
    emit(&cmd.out, &report)
}

#[derive(Serialize)]
struct MomentsReport {
    schema_version: u32,
    n: usize,
    replicates: usize,
    /// Moments of a single measurement's error.
    per_measurement: ErrorMoments,
    /// Moments of the averaged surrogate's error.
    averaged_surrogate: ErrorMoments,
}

fn cmd_moments(cmd: MomentsCmd) -> Result<()> {
    if cmd.replicates.len() < 2 {
        return Err(Error::InvalidReplicates(cmd.replicates.len()));
    }
    let table = read_table(&cmd.input)?;
    let idxs = cmd
        .replicates
        .iter()
        .map(|c| table.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_fn(table.rows.len(), idxs.len(), |i, j| {
        table.rows[i][idxs[j]]
    });
    let reps = ReplicateMatrix::new(values)?;
    let per_measurement = estimate_error_moments(&reps)?;
    let (_, averaged) = surrogate_from_replicates(&reps)?;
    println!(
        "error moments from {} replicates: sigma_u = {:.6}, E(U^4) = {:.6}{}",
        reps.m(),
        per_measurement.sigma_u2.max(0.0).sqrt(),
        per_measurement.eu4,
        if per_measurement.jensen_violated {
            " (warning: E(U^4) < sigma_U^4)"
        } else {
            ""
        }
    );
    let report = MomentsReport {
        schema_version: SCHEMA_VERSION,
        n: reps.n(),
        replicates: reps.m(),
        per_measurement,
        averaged_surrogate: averaged,
    };
    emit(&cmd.out, &report)
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    schema_version: u32,
    report: &'a crate::simulation::SimReport,
}

fn cmd_simulate(cmd: SimulateCmd) -> Result<()> {
    let mut cfg = match cmd.scenario {
        1 => SimConfig::scenario1(cmd.n, cmd.rho, cmd.sigma_u),
        2 => SimConfig::scenario2(cmd.n, cmd.rho, cmd.sigma_u),
        s => return Err(Error::InvalidConfig(format!("scenario {s}; expected 1 or 2"))),
    };
    if cmd.p != cfg.p {
        if cmd.p < 2 {
            return Err(Error::InvalidConfig(format!("p = {} must be >= 2", cmd.p)));
        }
        let mut theta0 = vec![0.0; cmd.p];
        let head = cfg.theta0.iter().take_while(|v| **v != 0.0).count();
        if head > cmd.p {
            return Err(Error::InvalidConfig(format!(
                "p = {} too small for the scenario's {head} nonzero coefficients",
                cmd.p
            )));
        }
        theta0[..head].copy_from_slice(&cfg.theta0[..head]);
        cfg.p = cmd.p;
        cfg.theta0 = theta0;
    }
    cfg.sigma_eps = cmd.sigma_eps;
    cfg.beta_true = cmd.beta_true;
    cfg.beta_star = cmd.beta_star;
    cfg.replications = cmd.replications;
    cfg.base_seed = cmd.seed;
    cfg.omega_method = cmd.omega_method;
    cfg.alpha_levels = cmd.alpha.clone();
    cfg.fast_tuning = cmd.fast_tuning;
    cfg.keep_records = cmd.keep_records;

    if !cmd.power_betas.is_empty() {
        let points = power_curve(&cfg, &cmd.power_betas, &cmd.alpha, cmd.threads)?;
        for p in &points {
            println!(
                "beta_true = {:.3}, alpha = {:.3}: rejection rate {:.4} (se {:.4}, {} reps)",
                p.beta_true, p.alpha, p.rejection_rate, p.std_error, p.effective_replications
            );
        }
        if let Some(path) = &cmd.power_csv {
            let file = fs::File::create(path)?;
            write_power_csv(&points, file)?;
        }
        return Ok(());
    }

    let report = run_monte_carlo(&cfg, cmd.threads)?;
    for e in &report.rejection {
        println!(
            "alpha = {:.3}: rejection rate {:.4} (se {:.4})",
            e.alpha, e.rate, e.std_error
        );
    }
    println!(
        "beta_hat: mean {:.4}, empirical sd {:.4}, mean estimated sd {:.4}, \
         {:.0}% CI coverage {:.3} ({} of {} replications, {:.1}s)",
        report.mean_beta_hat,
        report.empirical_sd,
        report.mean_estimated_sd,
        100.0 * (1.0 - cfg.ci_alpha),
        report.ci_coverage,
        report.effective_replications,
        cfg.replications,
        report.wall_time_secs
    );
    if report.excessive_failures {
        eprintln!(
            "warning: {} of {} replications failed",
            report.failures.len(),
            cfg.replications
        );
    }
    if let Some(path) = &cmd.summary_csv {
        let file = fs::File::create(path)?;
        write_summary_csv(&report, file)?;
    }
    emit(
        &cmd.out,
        &SimulateReport {
            schema_version: SCHEMA_VERSION,
            report: &report,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn data_args(path: PathBuf) -> DataArgs {
        DataArgs {
            input: path,
            response: "y".into(),
            surrogate: Some("w".into()),
            replicates: vec![],
            sigma_u2: Some(0.0),
            eu4: None,
            clamp_jensen: false,
        }
    }

    #[test]
    fn cli_args_parse() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn ingest_toy_file() {
        let f = write_csv("y,w,z1,z2\n1.0,0.5,0.1,0.2\n-1.0,-0.5,0.3,-0.2\n0.5,0.2,-0.4,0.6\n");
        let data = ingest(&data_args(f.path().to_path_buf())).unwrap();
        assert_eq!(data.standardized.n(), 3);
        assert_eq!(data.standardized.p(), 3);
        assert!(data.replicate_moments.is_none());
    }

    #[test]
    fn ingest_missing_column() {
        let f = write_csv("y,w,z1\n1,2,3\n4,5,6\n");
        let mut args = data_args(f.path().to_path_buf());
        args.surrogate = Some("nope".into());
        assert!(matches!(
            ingest(&args),
            Err(Error::MissingColumn(c)) if c == "nope"
        ));
    }

    #[test]
    fn ingest_blank_cell_named() {
        let f = write_csv("y,w,z1\n1,2,3\n4,,6\n");
        let err = ingest(&data_args(f.path().to_path_buf())).unwrap_err();
        match err {
            Error::NonNumericCell { row, column, value } => {
                assert_eq!(row, 2);
                assert_eq!(column, "w");
                assert_eq!(value, "");
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn ingest_ragged_row_rejected() {
        let f = write_csv("y,w,z1\n1,2,3\n4,5\n");
        assert!(matches!(
            ingest(&data_args(f.path().to_path_buf())),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn ingest_replicates_builds_averaged_surrogate() {
        // hand computation: row means become the surrogate
        let f = write_csv(
            "y,w1,w2,z1\n\
             1.0,0.4,0.6,0.1\n\
             -0.5,1.0,1.2,0.4\n\
             2.0,-0.8,-0.6,-0.3\n\
             0.3,0.2,0.0,0.8\n\
             -1.2,-0.1,0.1,-0.5\n",
        );
        let args = DataArgs {
            input: f.path().to_path_buf(),
            response: "y".into(),
            surrogate: None,
            replicates: vec!["w1".into(), "w2".into()],
            sigma_u2: None,
            eu4: None,
            clamp_jensen: true,
        };
        let data = ingest(&args).unwrap();
        assert!(data.replicate_moments.is_some());
        assert_eq!(data.standardized.p(), 2);
        // all pairwise differences are +-0.2, so sigma_u2 = 0.02 per
        // measurement and 0.01 for the 2-replicate average
        let per = data.replicate_moments.unwrap();
        assert!((per.sigma_u2 - 0.02).abs() < 1e-12);
    }

    #[test]
    fn ingest_requires_a_moment_source() {
        let f = write_csv("y,w,z1\n1,2,3\n4,5,6\n");
        let args = DataArgs {
            input: f.path().to_path_buf(),
            response: "y".into(),
            surrogate: Some("w".into()),
            replicates: vec![],
            sigma_u2: None,
            eu4: None,
            clamp_jensen: false,
        };
        assert!(matches!(ingest(&args), Err(Error::InvalidConfig(_))));
    }
}
