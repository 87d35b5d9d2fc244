//! ARD squared-exponential covariance.
//!
//! The kernel is `sigma_f * prod_i exp(-(a_i - b_i)^2 / (2 l_i^2))`, i.e. the
//! signal variance enters linearly. Observation noise `sigma_n^2` is only ever
//! added on the diagonal of the training covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Signal variance.
    pub sigma_f: f64,
    /// Noise standard deviation.
    pub sigma_n: f64,
    /// One lengthscale per input dimension of the kernel.
    pub lengthscales: Vec<f64>,
}

impl GpHyperparams {
    pub fn new(sigma_f: f64, sigma_n: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let hp = Self {
            sigma_f,
            sigma_n,
            lengthscales,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Builds hyperparameters from `(log sigma_n, log sigma_f, log l_1, ...)`.
    pub fn from_log(log_hp: &[f64]) -> Result<Self> {
        if log_hp.len() < 3 {
            return Err(Error::invalid(format!(
                "log hyperparameter vector needs at least 3 entries, got {}",
                log_hp.len()
            )));
        }
        Self::new(
            log_hp[1].exp(),
            log_hp[0].exp(),
            log_hp[2..].iter().map(|v| v.exp()).collect(),
        )
    }

    /// Inverse of [`GpHyperparams::from_log`].
    pub fn to_log(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lengthscales.len() + 2);
        out.push(self.sigma_n.ln());
        out.push(self.sigma_f.ln());
        out.extend(self.lengthscales.iter().map(|l| l.ln()));
        out
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sigma_f) || !positive(self.sigma_n) {
            return Err(Error::invalid(format!(
                "sigma_f and sigma_n must be finite and positive (got {}, {})",
                self.sigma_f, self.sigma_n
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("at least one lengthscale is required"));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !positive(**l)) {
            return Err(Error::invalid(format!(
                "lengthscales must be finite and positive (got {l})"
            )));
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, got: usize, what: &str) -> Result<()> {
        if got != self.dim() {
            return Err(Error::invalid(format!(
                "{what} has dimension {got} but the kernel has {} lengthscales",
                self.dim()
            )));
        }
        Ok(())
    }
}

#[inline]
fn scaled_sq_dist(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>, ls: &[f64]) -> f64 {
    a.zip(b)
        .zip(ls)
        .map(|((x, y), l)| {
            let r = (x - y) / l;
            r * r
        })
        .sum()
}

pub fn k_eval(a: &[f64], b: &[f64], hp: &GpHyperparams) -> Result<f64> {
    hp.check_dim(a.len(), "first point")?;
    hp.check_dim(b.len(), "second point")?;
    let r2 = scaled_sq_dist(a.iter().copied(), b.iter().copied(), &hp.lengthscales);
    Ok(hp.sigma_f * (-0.5 * r2).exp())
}

/// Cross-covariance between the rows of `a` and the rows of `b`.
pub fn k_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, hp: &GpHyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim(a.ncols(), "first design matrix")?;
    hp.check_dim(b.ncols(), "second design matrix")?;
    let ls = &hp.lengthscales;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let r2 = scaled_sq_dist(a.row(i).iter().copied(), b.row(j).iter().copied(), ls);
        hp.sigma_f * (-0.5 * r2).exp()
    }))
}

/// Symmetric training covariance `K(a, a)`, filled from the upper triangle.
pub(crate) fn k_symmetric(a: &DMatrix<f64>, hp: &GpHyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim(a.ncols(), "design matrix")?;
    let n = a.nrows();
    let ls = &hp.lengthscales;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.sigma_f;
        for j in (i + 1)..n {
            let r2 = scaled_sq_dist(a.row(i).iter().copied(), a.row(j).iter().copied(), ls);
            let v = hp.sigma_f * (-0.5 * r2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Derivatives of the training covariance with respect to the hyperparameters.
#[derive(Debug, Clone)]
pub struct KernelHyperGradients {
    /// `dK/d sigma_f`.
    pub d_sigma_f: DMatrix<f64>,
    /// `dK/d l_i`, one matrix per lengthscale.
    pub d_lengthscales: Vec<DMatrix<f64>>,
    /// `d(K + sigma_n^2 I)/d sigma_n`.
    pub d_sigma_n: DMatrix<f64>,
}

pub fn k_grad_hyper(a: &DMatrix<f64>, hp: &GpHyperparams) -> Result<KernelHyperGradients> {
    let k = k_symmetric(a, hp)?;
    let n = a.nrows();
    let d_sigma_f = &k / hp.sigma_f;
    let d_lengthscales = hp
        .lengthscales
        .iter()
        .enumerate()
        .map(|(dim, &l)| {
            DMatrix::from_fn(n, n, |i, j| {
                let r = a[(i, dim)] - a[(j, dim)];
                k[(i, j)] * r * r / (l * l * l)
            })
        })
        .collect();
    let d_sigma_n = DMatrix::identity(n, n) * (2.0 * hp.sigma_n);
    Ok(KernelHyperGradients {
        d_sigma_f,
        d_lengthscales,
        d_sigma_n,
    })
}

/// Gradient of `k(x_star, X_j)` with respect to `x_star`, one column per row of `x`.
pub fn k_grad_input(x_star: &[f64], x: &DMatrix<f64>, hp: &GpHyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim(x_star.len(), "query point")?;
    hp.check_dim(x.ncols(), "design matrix")?;
    let dim = x.ncols();
    let mut out = DMatrix::zeros(dim, x.nrows());
    for j in 0..x.nrows() {
        let kj = k_eval(x_star, &crate::linalg::row(x, j), hp)?;
        for a in 0..dim {
            let l = hp.lengthscales[a];
            out[(a, j)] = -(x_star[a] - x[(j, a)]) / (l * l) * kj;
        }
    }
    Ok(out)
}
