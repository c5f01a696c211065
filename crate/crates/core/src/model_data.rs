//! Observed-data model: one error-prone surrogate column `w`, clean
//! covariates `z`, known (or replicate-estimated) measurement-error moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A centered/standardized regression dataset with a single error-prone
/// covariate. The convention is: columns of `z` have mean 0 and mean
/// square 1, `w` has mean 0 and mean square `1 + sigma_u2`, `y` has mean 0.
///
/// `Dataset::new` only checks structural validity; exact standardization is
/// established by [`standardize`] (simulated draws already satisfy the
/// convention in expectation and are used unstandardized).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub z: DMatrix<f64>,
    /// Measurement-error variance sigma_U^2.
    pub sigma_u2: f64,
    /// Fourth moment E(U^4).
    pub eu4: f64,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        w: DVector<f64>,
        z: DMatrix<f64>,
        sigma_u2: f64,
        eu4: f64,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need n >= 2, got {n}")));
        }
        if w.len() != n || z.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "y has {} rows, w has {}, z has {}",
                n,
                w.len(),
                z.nrows()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidConfig("need p >= 2 (at least one z column)".into()));
        }
        if !(sigma_u2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_u2 = {sigma_u2} must be >= 0")));
        }
        // Jensen: E(U^4) >= sigma_U^4. Allow a hair of rounding slack.
        if eu4 < sigma_u2 * sigma_u2 * (1.0 - 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "eu4 = {eu4} violates Jensen floor sigma_u2^2 = {}",
                sigma_u2 * sigma_u2
            )));
        }
        let finite = y.iter().chain(w.iter()).chain(z.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite value in data".into()));
        }
        Ok(Dataset { y, w, z, sigma_u2, eu4 })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Total covariate count, 1 + columns of z.
    pub fn p(&self) -> usize {
        1 + self.z.ncols()
    }

    /// Gaussian default for the fourth moment: E(U^4) = 3 sigma_U^4.
    pub fn gaussian_eu4(sigma_u2: f64) -> f64 {
        3.0 * sigma_u2 * sigma_u2
    }

    /// Row subset with the same error moments (used for CV folds).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let m = rows.len();
        let mut y = DVector::zeros(m);
        let mut w = DVector::zeros(m);
        let mut z = DMatrix::zeros(m, self.z.ncols());
        for (k, &i) in rows.iter().enumerate() {
            y[k] = self.y[i];
            w[k] = self.w[i];
            z.row_mut(k).copy_from(&self.z.row(i));
        }
        Dataset { y, w, z, sigma_u2: self.sigma_u2, eu4: self.eu4 }
    }
}

/// Centering offsets and multiplicative scales recorded by [`standardize`],
/// sufficient to map coefficient estimates back to the raw scale:
/// `beta_raw = beta_std * w_scale`, `gamma_raw[j] = gamma_std[j] * z_scales[j]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub y_mean: f64,
    pub w_mean: f64,
    pub z_means: Vec<f64>,
    /// Multiplier applied to the centered w column (strictly positive).
    pub w_scale: f64,
    /// Multipliers applied to the centered z columns (strictly positive).
    pub z_scales: Vec<f64>,
    pub sigma_u2_raw: f64,
    pub eu4_raw: f64,
}

impl StandardizationRecord {
    pub fn beta_raw(&self, beta_std: f64) -> f64 {
        beta_std * self.w_scale
    }

    pub fn gamma_raw(&self, gamma_std: &[f64]) -> Vec<f64> {
        gamma_std
            .iter()
            .zip(&self.z_scales)
            .map(|(g, s)| g * s)
            .collect()
    }

    /// Inverse of [`standardize`]: recovers the raw inputs.
    pub fn destandardize(&self, d: &Dataset) -> Dataset {
        let y = d.y.map(|v| v + self.y_mean);
        let w = d.w.map(|v| v / self.w_scale + self.w_mean);
        let mut z = d.z.clone();
        for j in 0..z.ncols() {
            let s = self.z_scales[j];
            let m = self.z_means[j];
            for i in 0..z.nrows() {
                z[(i, j)] = z[(i, j)] / s + m;
            }
        }
        Dataset {
            y,
            w,
            z,
            sigma_u2: self.sigma_u2_raw,
            eu4: self.eu4_raw,
        }
    }
}

/// Center all variables and scale so that each z column has unit mean
/// square and w has mean square `1 + sigma_u2`. w and sigma_U are scaled
/// jointly by `w_scale = 1/sqrt(mean(w^2) - sigma_u2)` so the implied
/// latent x has unit mean square.
pub fn standardize(raw: &Dataset) -> Result<(Dataset, StandardizationRecord)> {
    let n = raw.n() as f64;

    let y_mean = raw.y.mean();
    let y = raw.y.map(|v| v - y_mean);

    let w_mean = raw.w.mean();
    let wc = raw.w.map(|v| v - w_mean);
    let w_msq = wc.dot(&wc) / n;
    if w_msq <= raw.sigma_u2 {
        return Err(Error::DegenerateVariance(format!(
            "mean square of centered w ({w_msq:.6e}) does not exceed sigma_u2 ({:.6e})",
            raw.sigma_u2
        )));
    }
    let w_scale = 1.0 / (w_msq - raw.sigma_u2).sqrt();
    let w = wc.map(|v| v * w_scale);
    let sigma_u2 = raw.sigma_u2 * w_scale * w_scale;
    let eu4 = raw.eu4 * w_scale.powi(4);

    let q = raw.z.ncols();
    let mut z = raw.z.clone();
    let mut z_means = Vec::with_capacity(q);
    let mut z_scales = Vec::with_capacity(q);
    for j in 0..q {
        let mut col = z.column_mut(j);
        let m = col.mean();
        col.iter_mut().for_each(|v| *v -= m);
        let msq = col.iter().map(|v| v * v).sum::<f64>() / n;
        if msq <= 0.0 {
            return Err(Error::DegenerateVariance(format!(
                "z column {j} has zero variance"
            )));
        }
        let s = 1.0 / msq.sqrt();
        col.iter_mut().for_each(|v| *v *= s);
        z_means.push(m);
        z_scales.push(s);
    }

    let record = StandardizationRecord {
        y_mean,
        w_mean,
        z_means,
        w_scale,
        z_scales,
        sigma_u2_raw: raw.sigma_u2,
        eu4_raw: raw.eu4,
    };
    let std = Dataset { y, w, z, sigma_u2, eu4 };
    Ok((std, record))
}

/// n x m matrix of m >= 2 repeated surrogate measurements per subject.
#[derive(Debug, Clone)]
pub struct ReplicateMatrix {
    pub values: DMatrix<f64>,
}

impl ReplicateMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::InvalidReplicates(values.ncols()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite replicate value".into()));
        }
        Ok(ReplicateMatrix { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }
}

/// Second and fourth measurement-error moments estimated from replicates.
///
/// Small samples can produce `eu4 < sigma_u2^2`; that is reported, never
/// silently repaired. Callers opt into the Jensen floor via [`ErrorMoments::clamped`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorMoments {
    pub sigma_u2: f64,
    pub eu4: f64,
    /// True when the raw estimate violates E(U^4) >= sigma_U^4.
    pub jensen_violated: bool,
}

impl ErrorMoments {
    /// Moments with the fourth clamped up to the Jensen floor sigma_U^4.
    pub fn clamped(&self) -> (f64, f64) {
        (self.sigma_u2, self.eu4.max(self.sigma_u2 * self.sigma_u2))
    }
}

/// Moment estimators from pairwise replicate differences. With
/// `D = W_ik - W_ij = U_ik - U_ij` (j < k, all pairs pooled with equal
/// weight): `sigma_U^2 = E(D^2)/2` and `E(U^4) = {E(D^4) - 6 sigma_U^4}/2`.
pub fn estimate_error_moments(reps: &ReplicateMatrix) -> Result<ErrorMoments> {
    let m = reps.m();
    if m < 2 {
        return Err(Error::InvalidReplicates(m));
    }
    let n = reps.n();
    let mut sum2 = 0.0;
    let mut sum4 = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..m {
            for k in (j + 1)..m {
                let d = reps.values[(i, k)] - reps.values[(i, j)];
                let d2 = d * d;
                sum2 += d2;
                sum4 += d2 * d2;
                count += 1;
            }
        }
    }
    let c = count as f64;
    let sigma_u2 = sum2 / c / 2.0;
    let eu4 = (sum4 / c - 6.0 * sigma_u2 * sigma_u2) / 2.0;
    Ok(ErrorMoments {
        sigma_u2,
        eu4,
        jensen_violated: eu4 < sigma_u2 * sigma_u2,
    })
}

/// Row means of the replicates together with the moments of the averaged
/// error: `var = sigma_U^2/m` and, for iid errors,
/// `E(Ubar^4) = 3 sigma_U^4 (1/m^2 - 1/m^3) + E(U^4)/m^3`.
pub fn surrogate_from_replicates(reps: &ReplicateMatrix) -> Result<(DVector<f64>, ErrorMoments)> {
    let m = reps.m();
    if m < 2 {
        return Err(Error::InvalidReplicates(m));
    }
    let single = estimate_error_moments(reps)?;
    let mf = m as f64;
    let sigma_u2 = single.sigma_u2 / mf;
    let s4 = single.sigma_u2 * single.sigma_u2;
    let eu4 = 3.0 * s4 * (1.0 / (mf * mf) - 1.0 / (mf * mf * mf)) + single.eu4 / (mf * mf * mf);
    let w = DVector::from_iterator(reps.n(), (0..reps.n()).map(|i| reps.values.row(i).mean()));
    Ok((
        w,
        ErrorMoments {
            sigma_u2,
            eu4,
            jensen_violated: eu4 < sigma_u2 * sigma_u2,
        },
    ))
}
