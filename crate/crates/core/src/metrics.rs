//! Evaluation metrics: coefficient of determination, mean log pointwise
//! predictive density, principal subspace angles and training duration.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{gaussian_log_kernel, log_2pi};
use crate::linalg::orthonormality_error;
use crate::stiefel::{ProjectionMatrix, ORTHONORMAL_TOL};

/// `1 - mean((f - f_hat)^2) / mean(f^2)`.
///
/// The denominator is the raw second moment of the actual values, not their
/// variance. [`r_squared_centered`] gives the conventional variant.
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_lengths(actual, predicted)?;
    let denom: f64 = actual.iter().map(|f| f * f).sum();
    finish_r2(actual, predicted, denom)
}

pub fn r_squared_centered(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_lengths(actual, predicted)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let denom: f64 = actual.iter().map(|f| (f - mean) * (f - mean)).sum();
    finish_r2(actual, predicted, denom)
}

fn check_lengths(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "need equal nonzero lengths, got {} and {}",
            actual.len(),
            predicted.len()
        )));
    }
    Ok(())
}

fn finish_r2(actual: &[f64], predicted: &[f64], denom: f64) -> Result<f64> {
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric("R² denominator is zero".into()));
    }
    let num: f64 = actual.iter().zip(predicted).map(|(f, p)| (f - p) * (f - p)).sum();
    Ok(1.0 - num / denom)
}

/// Pointwise predictive densities, evaluated up to the `log 2π` constant.
pub trait PointwisePredictive {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `log p(y | point i) + ½ log 2π`, i.e. without the normalizing
    /// constant that [`mlppd`] adds back (scaled by `gamma`).
    fn log_kernel(&self, i: usize, y: f64) -> Result<f64>;
}

/// Independent Gaussian marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PointwisePredictive for GaussianPredictive {
    fn len(&self) -> usize {
        self.mean.len()
    }

    fn log_kernel(&self, i: usize, y: f64) -> Result<f64> {
        let s = self.std[i];
        if !(s > 0.0) {
            return Err(Error::invalid(format!("predictive std at point {i} is {s}")));
        }
        Ok(gaussian_log_kernel(y, self.mean[i], s))
    }
}

/// Equally weighted Gaussian mixture at every point, one component per
/// posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePredictive {
    /// `means[c][i]`: component `c` at point `i`.
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl GaussianMixturePredictive {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Affine map `y -> scale * y + shift` applied to every component.
    pub fn affine(&self, scale: f64, shift: f64) -> Self {
        Self {
            means: self.means.iter().map(|c| c.iter().map(|m| m * scale + shift).collect()).collect(),
            stds: self.stds.iter().map(|c| c.iter().map(|s| s * scale.abs()).collect()).collect(),
        }
    }
}

impl PointwisePredictive for GaussianMixturePredictive {
    fn len(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn log_kernel(&self, i: usize, y: f64) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.means.len());
        for (mc, sc) in self.means.iter().zip(&self.stds) {
            let s = sc[i];
            if !(s > 0.0) {
                return Err(Error::invalid(format!("predictive std at point {i} is {s}")));
            }
            terms.push(gaussian_log_kernel(y, mc[i], s));
        }
        if terms.is_empty() {
            return Err(Error::invalid("mixture has no components"));
        }
        Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean over points of `log_kernel(i, y_i) - (gamma / 2) log 2π`.
///
/// With `gamma != 1` the constant no longer normalizes a univariate density;
/// it is kept configurable so that results stay comparable across methods
/// working in spaces of different dimension.
pub fn mlppd(actual: &[f64], predictive: &dyn PointwisePredictive, gamma: usize) -> Result<f64> {
    if actual.is_empty() || actual.len() != predictive.len() {
        return Err(Error::invalid(format!(
            "{} actual values for {} predictive marginals",
            actual.len(),
            predictive.len()
        )));
    }
    let mut acc = 0.0;
    for (i, &y) in actual.iter().enumerate() {
        acc += predictive.log_kernel(i, y)?;
    }
    Ok(acc / actual.len() as f64 - 0.5 * gamma as f64 * log_2pi())
}

/// Principal angles in radians, sorted descending (largest first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAngles {
    pub angles: Vec<f64>,
}

impl SubspaceAngles {
    /// The largest principal angle.
    pub fn first(&self) -> f64 {
        self.angles[0]
    }
}

fn check_orthonormal(w: &ProjectionMatrix, what: &str) -> Result<()> {
    let err = orthonormality_error(w.matrix());
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::invalid(format!("{what} is not orthonormal (error {err:e})")));
    }
    Ok(())
}

/// Principal angles from the singular values of `UᵀV` (cosines) and of
/// `(I − UUᵀ)V` (sines). Small angles take the sine branch, which keeps
/// them accurate near zero where `arccos` loses half the digits.
pub fn principal_angles(u: &ProjectionMatrix, v: &ProjectionMatrix) -> Result<SubspaceAngles> {
    check_orthonormal(u, "U")?;
    check_orthonormal(v, "V")?;
    if u.d() != v.d() {
        return Err(Error::invalid(format!(
            "subspaces live in R^{} and R^{}",
            u.d(),
            v.d()
        )));
    }
    // Angles are symmetric in U and V; let V be the narrower one.
    let (u, v) = if v.m() <= u.m() { (u.matrix(), v.matrix()) } else { (v.matrix(), u.matrix()) };
    let prod = u.transpose() * v;
    let mut cos: Vec<f64> = prod.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    cos.sort_by(|a, b| b.total_cmp(a));
    let mut sin: Vec<f64> = (v - u * &prod).singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sin.sort_by(f64::total_cmp);
    let mut angles: Vec<f64> = cos
        .iter()
        .zip(&sin)
        .map(|(&c, &s)| if c * c >= 0.5 { s.asin() } else { c.acos() })
        .collect();
    angles.sort_by(|a, b| b.total_cmp(a));
    Ok(SubspaceAngles { angles })
}

/// Mean over draws of the largest principal angle to the reference.
pub fn mfsa(posterior: &[ProjectionMatrix], reference: &ProjectionMatrix) -> Result<f64> {
    if posterior.is_empty() {
        return Err(Error::invalid("no projection draws"));
    }
    let mut acc = 0.0;
    for w in posterior {
        acc += principal_angles(w, reference)?.first();
    }
    Ok(acc / posterior.len() as f64)
}

/// Runs `f` and reports its monotonic wall-clock duration in seconds.
pub fn time_training<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

pub fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub d: usize,
    pub m: usize,
    pub n_train: usize,
    pub seed: u64,
    pub r_squared: f64,
    pub mlppd: f64,
    pub mfsa_rad: Option<f64>,
    pub training_seconds: f64,
    pub status: String,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 11] = [
        "method",
        "dataset",
        "d",
        "m",
        "n_train",
        "seed",
        "r_squared",
        "mlppd",
        "mfsa_rad",
        "training_seconds",
        "status",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.dataset.clone(),
            self.d.to_string(),
            self.m.to_string(),
            self.n_train.to_string(),
            self.seed.to_string(),
            self.r_squared.to_string(),
            self.mlppd.to_string(),
            self.mfsa_rad.map(|v| v.to_string()).unwrap_or_default(),
            self.training_seconds.to_string(),
            self.status.clone(),
        ]
    }

    /// Fields that must be reproducible run to run (everything but timing).
    pub fn deterministic_fields(&self) -> Vec<String> {
        let mut f = self.csv_fields();
        f.remove(9);
        f
    }
}
