//! Zero-mean Gaussian-process regression with the ARD kernel.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{k_grad_input, k_matrix, k_symmetric, GpHyperparams};
use crate::linalg::{dvec, jittered_cholesky};

pub(crate) const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

fn check_training(x: &DMatrix<f64>, y: &[f64], hp: &GpHyperparams) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("at least one training point is required"));
    }
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!(
            "design matrix has {} rows but there are {} responses",
            x.nrows(),
            y.len()
        )));
    }
    hp.check_dim(x.ncols(), "design matrix")
}

/// Factorizes `K(x, x) + sigma_n^2 I` (plus jitter). Returns the noise-free
/// kernel matrix alongside the factor.
fn factorize(x: &DMatrix<f64>, hp: &GpHyperparams) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    let k = k_symmetric(x, hp)?;
    let mut noisy = k.clone();
    let s2 = hp.sigma_n * hp.sigma_n;
    for i in 0..x.nrows() {
        noisy[(i, i)] += s2;
    }
    let f = jittered_cholesky(&noisy)?;
    Ok((k, f.chol, f.jitter))
}

/// Conditioned GP, ready for repeated predictions.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    x_train: DMatrix<f64>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    hp: GpHyperparams,
}

/// Pointwise Gaussian predictive marginals. `variance` includes the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

impl GpPosterior {
    pub fn fit(x: DMatrix<f64>, y: &[f64], hp: GpHyperparams) -> Result<Self> {
        check_training(&x, y, &hp)?;
        let (_, chol, jitter) = factorize(&x, &hp)?;
        let alpha = chol.solve(&dvec(y));
        Ok(Self {
            x_train: x,
            alpha,
            chol,
            jitter,
            hp,
        })
    }

    /// Builds a posterior from an explicit weight vector, bypassing the
    /// solve. Used to construct surrogates with known means.
    pub fn from_weights(x: DMatrix<f64>, alpha: Vec<f64>, hp: GpHyperparams) -> Result<Self> {
        hp.check_dim(x.ncols(), "design matrix")?;
        if alpha.len() != x.nrows() {
            return Err(Error::invalid("weight vector length must match the training rows"));
        }
        let (_, chol, jitter) = factorize(&x, &hp)?;
        Ok(Self {
            x_train: x,
            alpha: DVector::from_vec(alpha),
            chol,
            jitter,
            hp,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hp
    }

    pub fn x_train(&self) -> &DMatrix<f64> {
        &self.x_train
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + (sigma_n^2 + jitter) I`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        if x_star.ncols() != self.x_train.ncols() {
            return Err(Error::invalid(format!(
                "query points have {} columns, training inputs have {}",
                x_star.ncols(),
                self.x_train.ncols()
            )));
        }
        let k_cross = k_matrix(&self.x_train, x_star, &self.hp)?; // n x q
        let mean = (k_cross.transpose() * &self.alpha).iter().copied().collect();
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_cross)
            .ok_or(Error::Conditioning { jitter: self.jitter })?;
        let s2 = self.hp.sigma_n * self.hp.sigma_n;
        let variance = v
            .column_iter()
            .map(|c| (self.hp.sigma_f - c.norm_squared()).max(0.0) + s2)
            .collect();
        Ok(PredictiveDistribution { mean, variance })
    }

    pub fn mean_grad(&self, x_star: &[f64]) -> Result<Vec<f64>> {
        let g = k_grad_input(x_star, &self.x_train, &self.hp)?;
        Ok((g * &self.alpha).iter().copied().collect())
    }
}

pub fn posterior_predict(post: &GpPosterior, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    post.predict(x_star)
}

pub fn posterior_mean_grad(post: &GpPosterior, x_star: &[f64]) -> Result<Vec<f64>> {
    post.mean_grad(x_star)
}

pub fn log_marginal_likelihood(x: &DMatrix<f64>, y: &[f64], hp: &GpHyperparams) -> Result<f64> {
    check_training(x, y, hp)?;
    let (_, chol, _) = factorize(x, hp)?;
    let yv = dvec(y);
    let alpha = chol.solve(&yv);
    Ok(lml_from_parts(&chol, &yv, &alpha))
}

fn lml_from_parts(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * y.dot(alpha) - half_log_det - n * HALF_LOG_2PI
}

/// Gradient of the log marginal likelihood in natural coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LmlGradient {
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub lengthscales: Vec<f64>,
}

/// Value and derivatives of the log marginal likelihood with respect to the
/// log hyperparameters `(sigma_n, sigma_f, l...)` and to the inputs.
#[derive(Debug, Clone)]
pub(crate) struct LmlTerms {
    pub value: f64,
    pub d_log_hp: Vec<f64>,
    pub d_inputs: Option<DMatrix<f64>>,
}

pub(crate) fn lml_terms(z: &DMatrix<f64>, y: &[f64], hp: &GpHyperparams, want_inputs: bool) -> Result<LmlTerms> {
    check_training(z, y, hp)?;
    let (k, chol, _) = factorize(z, hp)?;
    let yv = dvec(y);
    let alpha = chol.solve(&yv);
    let value = lml_from_parts(&chol, &yv, &alpha);
    let n = z.nrows();
    let dim = z.ncols();

    // A = alpha alphaᵀ - (K + s2 I)^-1,  M = A ∘ K
    let mut a = chol.inverse();
    a.neg_mut();
    a.ger(1.0, &alpha, &alpha, 1.0);
    let m = a.component_mul(&k);

    let mut d_log_hp = vec![0.0; dim + 2];
    d_log_hp[0] = hp.sigma_n * hp.sigma_n * a.trace();
    d_log_hp[1] = 0.5 * m.sum();
    for (l_idx, &l) in hp.lengthscales.iter().enumerate() {
        let inv_l2 = 1.0 / (l * l);
        let mut acc = 0.0;
        for j in 0..n {
            for i in (j + 1)..n {
                let r = z[(i, l_idx)] - z[(j, l_idx)];
                acc += m[(i, j)] * r * r;
            }
        }
        // the strict lower triangle counts each symmetric pair once
        d_log_hp[2 + l_idx] = acc * inv_l2;
    }

    let d_inputs = want_inputs.then(|| {
        let row_sums: Vec<f64> = (0..n).map(|i| m.row(i).sum()).collect();
        let mz = &m * z;
        DMatrix::from_fn(n, dim, |i, c| {
            let l = hp.lengthscales[c];
            -(z[(i, c)] * row_sums[i] - mz[(i, c)]) / (l * l)
        })
    });

    Ok(LmlTerms {
        value,
        d_log_hp,
        d_inputs,
    })
}

pub fn log_marginal_likelihood_grad(x: &DMatrix<f64>, y: &[f64], hp: &GpHyperparams) -> Result<LmlGradient> {
    let t = lml_terms(x, y, hp, false)?;
    Ok(LmlGradient {
        sigma_n: t.d_log_hp[0] / hp.sigma_n,
        sigma_f: t.d_log_hp[1] / hp.sigma_f,
        lengthscales: t.d_log_hp[2..]
            .iter()
            .zip(&hp.lengthscales)
            .map(|(g, l)| g / l)
            .collect(),
    })
}

/// Log density of `N(y; mu, sigma^2)` without the `log 2π` constant.
#[inline]
pub(crate) fn gaussian_log_kernel(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - sigma.ln()
}

pub(crate) fn log_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_noise(ls: Vec<f64>) -> GpHyperparams {
        GpHyperparams::new(1.0, 1e-8, ls).unwrap()
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn lml_hand_values() {
        let x = col(&[0.3]);
        let v = log_marginal_likelihood(&x, &[0.0], &tiny_noise(vec![1.0])).unwrap();
        assert!((v + 0.918_939).abs() < 1e-6);
        let v = log_marginal_likelihood(&x, &[2.0], &tiny_noise(vec![1.0])).unwrap();
        assert!((v + 2.918_939).abs() < 1e-6);
        let hp = GpHyperparams::new(1.0, 1.0, vec![1.0]).unwrap();
        let v = log_marginal_likelihood(&x, &[0.0], &hp).unwrap();
        assert!((v + 1.265_512).abs() < 1e-6);
    }

    #[test]
    fn lml_rejects_bad_shapes() {
        let x = col(&[0.3, 0.4]);
        assert!(log_marginal_likelihood(&x, &[0.0], &tiny_noise(vec![1.0])).is_err());
        let empty = DMatrix::zeros(0, 1);
        assert!(log_marginal_likelihood(&empty, &[], &tiny_noise(vec![1.0])).is_err());
    }

    #[test]
    fn lml_grad_single_point() {
        let x = col(&[0.0]);
        let hp = GpHyperparams::new(1.5, 0.5, vec![0.7]).unwrap();
        let g = log_marginal_likelihood_grad(&x, &[0.0], &hp).unwrap();
        assert!((g.sigma_f + 0.5 / (1.5 + 0.25)).abs() < 1e-9);
        assert_eq!(g.lengthscales, vec![0.0]);
    }

    fn fd_check(x: &DMatrix<f64>, y: &[f64], hp: &GpHyperparams) {
        let g = log_marginal_likelihood_grad(x, y, hp).unwrap();
        let h = 1e-5;
        let f = |p: &GpHyperparams| log_marginal_likelihood(x, y, p).unwrap();
        let mut analytic = vec![g.sigma_f, g.sigma_n];
        analytic.extend(&g.lengthscales);
        for (i, a) in analytic.iter().enumerate() {
            let shift = |delta: f64| {
                let mut p = hp.clone();
                match i {
                    0 => p.sigma_f += delta,
                    1 => p.sigma_n += delta,
                    j => p.lengthscales[j - 2] += delta,
                }
                p
            };
            let fd = (f(&shift(h)) - f(&shift(-h))) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn lml_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.5..1.5));
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hp = GpHyperparams::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.1..0.6),
                vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
            )
            .unwrap();
            fd_check(&x, &y, &hp);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.5..1.5));
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = GpHyperparams::new(1.1, 0.3, vec![0.8, 1.3]).unwrap();
        let t = lml_terms(&z, &y, &hp, true).unwrap();
        let dz = t.d_inputs.unwrap();
        let h = 1e-5;
        for i in 0..6 {
            for c in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[(i, c)] += h;
                zm[(i, c)] -= h;
                let fd = (log_marginal_likelihood(&zp, &y, &hp).unwrap()
                    - log_marginal_likelihood(&zm, &y, &hp).unwrap())
                    / (2.0 * h);
                assert!((fd - dz[(i, c)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let x = col(&[-1.0, 0.0, 0.5, 1.7]);
        let y = [0.3, -0.2, 0.9, 0.1];
        let post = GpPosterior::fit(x.clone(), &y, tiny_noise(vec![0.8])).unwrap();
        let pred = post.predict(&x).unwrap();
        for (i, yi) in y.iter().enumerate() {
            assert!((pred.mean[i] - yi).abs() < 1e-4);
            assert!(pred.variance[i] < 1e-4);
        }
    }

    #[test]
    fn far_queries_recover_the_prior() {
        let hp = GpHyperparams::new(1.7, 0.2, vec![0.5]).unwrap();
        let post = GpPosterior::fit(col(&[0.0, 1.0]), &[1.0, -1.0], hp).unwrap();
        let pred = post.predict(&col(&[1e3])).unwrap();
        assert_eq!(pred.mean[0], 0.0);
        assert!((pred.variance[0] - (1.7 + 0.04)).abs() < 1e-12);
    }

    #[test]
    fn single_point_hand_values() {
        let post = GpPosterior::fit(col(&[0.0]), &[1.0], tiny_noise(vec![1.0])).unwrap();
        let pred = post.predict(&col(&[1.0])).unwrap();
        assert!((pred.mean[0] - 0.606_530_66).abs() < 1e-6);
        let g0 = post.mean_grad(&[0.0]).unwrap();
        assert!(g0[0].abs() < 1e-12);
        let g1 = post.mean_grad(&[1.0]).unwrap();
        assert!((g1[0] + 0.606_530_66).abs() < 1e-6);
        assert!(post.predict(&DMatrix::zeros(1, 2)).is_err());
        assert!(post.mean_grad(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = GpHyperparams::new(1.0, 0.1, vec![0.9, 1.4, 0.6]).unwrap();
        let post = GpPosterior::fit(x, &y, hp).unwrap();
        let xs = [0.1, -0.3, 0.45];
        let g = post.mean_grad(&xs).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            let mut p = xs;
            let mut m = xs;
            p[a] += h;
            m[a] -= h;
            let mp = post.predict(&DMatrix::from_row_slice(1, 3, &p)).unwrap().mean[0];
            let mm = post.predict(&DMatrix::from_row_slice(1, 3, &m)).unwrap().mean[0];
            let fd = (mp - mm) / (2.0 * h);
            assert!((fd - g[a]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn cholesky_reconstructs_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let hp = GpHyperparams::new(1.3, 0.2, vec![0.7, 1.1]).unwrap();
        let post = GpPosterior::fit(x.clone(), &[0.0; 8], hp.clone()).unwrap();
        let l = post.chol_factor();
        let mut target = k_matrix(&x, &x, &hp).unwrap();
        for i in 0..8 {
            target[(i, i)] += 0.04;
        }
        assert!((l.clone() * l.transpose() - &target).norm() / target.norm() < 1e-8);
    }

    #[test]
    fn extra_observation_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let hp = GpHyperparams::new(1.0, 1e-6, vec![0.8, 0.8]).unwrap();
            let fewer = GpPosterior::fit(x.rows(0, 5).into_owned(), &y[..5], hp.clone()).unwrap();
            let more = GpPosterior::fit(x, &y, hp).unwrap();
            let vf = fewer.predict(&q).unwrap().variance;
            let vm = more.predict(&q).unwrap().variance;
            for (a, b) in vm.iter().zip(&vf) {
                assert!(*a <= b + 1e-9);
            }
        }
    }

    #[test]
    fn lml_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = GpHyperparams::new(1.0, 0.3, vec![0.8, 1.2]).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp = DMatrix::from_fn(7, 2, |i, j| x[(perm[i], j)]);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = log_marginal_likelihood(&x, &y, &hp).unwrap();
        let b = log_marginal_likelihood(&xp, &yp, &hp).unwrap();
        assert!((a - b).abs() < 1e-10);
    }
}
