//! The Bayesian active-subspace model: a GP on `Z = X W` with `W` given by
//! the Householder map, standard-normal priors on the projection parameters
//! and on the log hyperparameters, and prediction by marginalizing over
//! posterior draws.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::gp::{lml_terms, log_2pi, GpPosterior};
use crate::kernel::GpHyperparams;
use crate::metrics::GaussianMixturePredictive;
use crate::sampler::{nuts_sample, ChainDiagnostics, LogDensity, SamplerConfig};
use crate::stiefel::{householder_map, householder_vjp, param_count, ProjectionMatrix, ProjectionParams};

pub const DEFAULT_DRAWS_PER_SAMPLE: usize = 10;

/// Names of the log hyperparameters in storage order.
pub fn hyperparameter_order(m: usize) -> Vec<String> {
    let mut names = vec!["log_sigma_n".to_string(), "log_sigma_f".to_string()];
    names.extend((1..=m).map(|i| format!("log_lengthscale_{i}")));
    names
}

/// Names of every coordinate of the flat sampling vector.
pub fn parameter_names(d: usize, m: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=param_count(d, m)).map(|i| format!("theta_p_{i}")).collect();
    names.extend(hyperparameter_order(m));
    names
}

/// Length of the flat sampling vector `[theta_p, log_hp]`.
pub fn flat_dim(d: usize, m: usize) -> usize {
    param_count(d, m) + m + 2
}

/// Point in sampling coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BasParams {
    pub theta_p: ProjectionParams,
    /// `(log sigma_n, log sigma_f, log l_1, ..., log l_m)`.
    pub log_hp: Vec<f64>,
}

impl BasParams {
    pub fn new(theta_p: ProjectionParams, log_hp: Vec<f64>) -> Result<Self> {
        if log_hp.len() != theta_p.m + 2 {
            return Err(Error::invalid(format!(
                "expected {} log hyperparameters, got {}",
                theta_p.m + 2,
                log_hp.len()
            )));
        }
        Ok(Self { theta_p, log_hp })
    }

    pub fn from_flat(flat: &[f64], d: usize, m: usize) -> Result<Self> {
        if flat.len() != flat_dim(d, m) {
            return Err(Error::invalid(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                flat_dim(d, m)
            )));
        }
        let k = param_count(d, m);
        Self::new(ProjectionParams::new(flat[..k].to_vec(), d, m)?, flat[k..].to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta_p.theta.clone();
        v.extend_from_slice(&self.log_hp);
        v
    }

    pub fn d(&self) -> usize {
        self.theta_p.d
    }

    pub fn m(&self) -> usize {
        self.theta_p.m
    }

    pub fn projection(&self) -> Result<ProjectionMatrix> {
        householder_map(&self.theta_p)
    }

    pub fn hyperparams(&self) -> Result<GpHyperparams> {
        GpHyperparams::from_log(&self.log_hp)
    }
}

fn std_normal_log_density(v: &[f64]) -> f64 {
    -0.5 * v.len() as f64 * log_2pi() - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

pub fn log_prior(p: &BasParams) -> f64 {
    std_normal_log_density(&p.theta_p.theta) + std_normal_log_density(&p.log_hp)
}

fn check_data(p: &BasParams, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.ncols() != p.d() {
        return Err(Error::invalid(format!("design has {} columns, model expects {}", x.ncols(), p.d())));
    }
    if x.nrows() != y.len() {
        return Err(Error::invalid("design and response lengths differ"));
    }
    Ok(())
}

pub fn log_posterior(p: &BasParams, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    check_data(p, x, y)?;
    let w = p.projection()?;
    let z = x * w.matrix();
    let lml = crate::gp::log_marginal_likelihood(&z, y, &p.hyperparams()?)?;
    Ok(log_prior(p) + lml)
}

/// Log posterior and its gradient in flat order.
pub fn log_posterior_with_grad(p: &BasParams, x: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_data(p, x, y)?;
    let hp = p.hyperparams()?;
    let mut lml = None;
    let (_, d_theta) = householder_vjp(&p.theta_p, |w| {
        let z = x * w.matrix();
        let terms = lml_terms(&z, y, &hp, true)?;
        let d_z = terms.d_inputs.as_ref().expect("input derivatives requested");
        let w_bar = x.transpose() * d_z;
        lml = Some((terms.value, terms.d_log_hp));
        Ok(w_bar)
    })?;
    let (value, d_log_hp) = lml.expect("cotangent closure ran");
    let mut grad: Vec<f64> = d_theta.iter().zip(&p.theta_p.theta).map(|(g, t)| g - t).collect();
    grad.extend(d_log_hp.iter().zip(&p.log_hp).map(|(g, t)| g - t));
    Ok((value + log_prior(p), grad))
}

pub fn log_posterior_grad(p: &BasParams, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    log_posterior_with_grad(p, x, y).map(|(_, g)| g)
}

/// Unnormalized posterior over the flat sampling vector.
#[derive(Debug, Clone)]
pub struct BasModel {
    x: DMatrix<f64>,
    y: Vec<f64>,
    m: usize,
}

impl BasModel {
    /// `x` and `y` are expected in standardized coordinates.
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, m: usize) -> Result<Self> {
        let d = x.ncols();
        if m == 0 || m > d {
            return Err(Error::invalid(format!("need 1 <= m <= d, got m = {m}, d = {d}")));
        }
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::invalid("design and response must be nonempty and of equal length"));
        }
        Ok(Self { x, y, m })
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

impl LogDensity for BasModel {
    fn dim(&self) -> usize {
        flat_dim(self.d(), self.m)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let p = BasParams::from_flat(x, self.d(), self.m)?;
        let (v, g) = log_posterior_with_grad(&p, &self.x, &self.y)?;
        grad.copy_from_slice(&g);
        Ok(v)
    }

    /// A draw from the prior.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeta {
    pub d: usize,
    pub m: usize,
    pub chains: usize,
    pub draws: usize,
    pub warmup: usize,
    pub seed: u64,
    pub hyperparameter_order: Vec<String>,
}

/// Posterior draws in flat sampling coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub meta: PosteriorMeta,
    pub standardization: Standardization,
    /// `chains[c][t]`: flat vector of draw `t` in chain `c`.
    pub chains: Vec<Vec<Vec<f64>>>,
}

impl PosteriorSamples {
    pub fn validate(&self) -> Result<()> {
        let dim = flat_dim(self.meta.d, self.meta.m);
        if self.chains.is_empty() || self.chains[0].is_empty() {
            return Err(Error::invalid("posterior has no draws"));
        }
        let len = self.chains[0].len();
        for (c, chain) in self.chains.iter().enumerate() {
            if chain.len() != len {
                return Err(Error::invalid(format!("chain {c} has {} draws, expected {len}", chain.len())));
            }
            if let Some(t) = chain.iter().position(|d| d.len() != dim) {
                return Err(Error::invalid(format!("draw {t} of chain {c} does not have length {dim}")));
            }
        }
        if self.standardization.d() != self.meta.d {
            return Err(Error::invalid("standardization dimension does not match the model"));
        }
        Ok(())
    }

    pub fn num_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    /// All draws, chain-major.
    pub fn flat_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.chains.iter().flat_map(|c| c.iter().map(Vec::as_slice))
    }

    pub fn params(&self) -> Result<Vec<BasParams>> {
        self.flat_draws()
            .map(|f| BasParams::from_flat(f, self.meta.d, self.meta.m))
            .collect()
    }

    pub fn projections(&self) -> Result<Vec<ProjectionMatrix>> {
        self.params()?.iter().map(BasParams::projection).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Runs NUTS on the BAS posterior. `x` and `y` must already be standardized
/// with `standardization`.
pub fn sample_posterior(
    x: &DMatrix<f64>,
    y: &[f64],
    m: usize,
    standardization: Standardization,
    cfg: &SamplerConfig,
) -> Result<(PosteriorSamples, ChainDiagnostics)> {
    let model = BasModel::new(x.clone(), y.to_vec(), m)?;
    let out = nuts_sample(&model, cfg)?;
    let samples = PosteriorSamples {
        meta: PosteriorMeta {
            d: x.ncols(),
            m,
            chains: cfg.chains,
            draws: cfg.draws,
            warmup: cfg.warmup,
            seed: cfg.seed,
            hyperparameter_order: hyperparameter_order(m),
        },
        standardization,
        chains: out.chains,
    };
    Ok((samples, out.diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub draws_per_sample: usize,
    pub seed: u64,
    /// Evenly thin the posterior to at most this many draws.
    pub max_posterior_draws: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            draws_per_sample: DEFAULT_DRAWS_PER_SAMPLE,
            seed: 0,
            max_posterior_draws: None,
        }
    }
}

/// Per-point summary of the pooled predictive draws.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrediction {
    pub median: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    pub pool_size: usize,
    /// One Gaussian component per posterior draw, for log predictive density.
    pub mixture: GaussianMixturePredictive,
}

impl MarginalPrediction {
    /// Maps every summary from standardized to original response units.
    pub fn destandardize(&self, s: &Standardization) -> Self {
        let f = |v: &[f64]| s.inverse_y(v);
        Self {
            median: f(&self.median),
            mean: f(&self.mean),
            std: self.std.iter().map(|v| v * s.y_scale).collect(),
            q05: f(&self.q05),
            q95: f(&self.q95),
            pool_size: self.pool_size,
            mixture: self.mixture.affine(s.y_scale, s.y_mean),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the draws of mixture component `c` at point `i`; independent of
/// evaluation order.
fn cell_seed(seed: u64, c: usize, i: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ c as u64) ^ i as u64)
}

/// Linear-interpolation sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pools `draws_per_sample` samples from every component at every point and
/// summarizes the pool.
pub fn summarize_mixture(
    mixture: GaussianMixturePredictive,
    draws_per_sample: usize,
    seed: u64,
) -> Result<MarginalPrediction> {
    if draws_per_sample == 0 {
        return Err(Error::invalid("draws_per_sample must be at least 1"));
    }
    if mixture.means.is_empty() {
        return Err(Error::invalid("mixture has no components"));
    }
    let n = mixture.means[0].len();
    let pool_size = mixture.components() * draws_per_sample;
    let stats: Vec<[f64; 5]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pool = Vec::with_capacity(pool_size);
            for (c, (mc, sc)) in mixture.means.iter().zip(&mixture.stds).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, c, i));
                for _ in 0..draws_per_sample {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    pool.push(mc[i] + sc[i] * z);
                }
            }
            let len = pool.len() as f64;
            let mean = pool.iter().sum::<f64>() / len;
            let var = if pool.len() > 1 {
                pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (len - 1.0)
            } else {
                0.0
            };
            pool.sort_by(f64::total_cmp);
            [
                quantile_sorted(&pool, 0.5),
                mean,
                var.sqrt(),
                quantile_sorted(&pool, 0.05),
                quantile_sorted(&pool, 0.95),
            ]
        })
        .collect();
    let col = |k: usize| stats.iter().map(|s| s[k]).collect::<Vec<_>>();
    Ok(MarginalPrediction {
        median: col(0),
        mean: col(1),
        std: col(2),
        q05: col(3),
        q95: col(4),
        pool_size,
        mixture,
    })
}

/// Evenly spaced subset of at most `max` items.
pub(crate) fn thin<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(max) if max > 0 && items.len() > max => (0..max).map(|j| items[j * items.len() / max].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Fully Bayesian prediction in standardized coordinates: every posterior
/// draw contributes its conditional Gaussian predictive at `x_star`.
pub fn predict_marginal(
    samples: &PosteriorSamples,
    x_star: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &PredictOptions,
) -> Result<MarginalPrediction> {
    samples.validate()?;
    if x.ncols() != samples.meta.d || x_star.ncols() != samples.meta.d {
        return Err(Error::invalid("input dimension does not match the posterior"));
    }
    let draws: Vec<&[f64]> = samples.flat_draws().collect();
    let draws = thin(&draws, opts.max_posterior_draws);
    let components: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .map(|flat| {
            let p = BasParams::from_flat(flat, samples.meta.d, samples.meta.m)?;
            let w = p.projection()?;
            let post = GpPosterior::fit(x * w.matrix(), y, p.hyperparams()?)?;
            let pred = post.predict(&(x_star * w.matrix()))?;
            let std = pred.std();
            Ok((pred.mean, std))
        })
        .collect::<Result<_>>()?;
    let (means, stds) = components.into_iter().unzip();
    summarize_mixture(GaussianMixturePredictive { means, stds }, opts.draws_per_sample, opts.seed)
}

/// Prediction from raw (original-unit) data, using the posterior's stored
/// standardization. Results are in original units.
pub fn predict_marginal_original(
    samples: &PosteriorSamples,
    x_star: &DMatrix<f64>,
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    opts: &PredictOptions,
) -> Result<MarginalPrediction> {
    let s = &samples.standardization;
    let pred = predict_marginal(samples, &s.transform_x(x_star)?, &s.transform_x(x_train)?, &s.transform_y(y_train), opts)?;
    Ok(pred.destandardize(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::log_marginal_likelihood;
    use crate::metrics::PointwisePredictive;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_problem(d: usize, n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5f64..1.5));
        let y: Vec<f64> = (0..n)
            .map(|i| (x[(i, 0)] + 0.5 * x[(i, d - 1)]).sin() + 0.1 * rng.random_range(-1.0f64..1.0))
            .collect();
        (x, y)
    }

    fn random_params(d: usize, m: usize, rng: &mut ChaCha8Rng) -> BasParams {
        let flat: Vec<f64> = (0..flat_dim(d, m))
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                if i >= param_count(d, m) {
                    0.5 * z
                } else {
                    z
                }
            })
            .collect();
        BasParams::from_flat(&flat, d, m).unwrap()
    }

    #[test]
    fn prior_at_origin() {
        let p = BasParams::from_flat(&[0.0; 5], 2, 1).unwrap();
        assert_eq!(flat_dim(2, 1), 5);
        assert!((log_prior(&p) - (-4.594693)).abs() < 1e-6);
        let mut flat = [0.0; 5];
        flat[3] = 1.0;
        let q = BasParams::from_flat(&flat, 2, 1).unwrap();
        assert!((log_prior(&q) - (log_prior(&p) - 0.5)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn prior_is_even(flat in proptest::collection::vec(-3.0f64..3.0, 9), i in 0usize..9) {
            // d=3, m=2: k = 5
            let p = BasParams::from_flat(&flat, 3, 2).unwrap();
            let mut neg = flat.clone();
            neg[i] = -neg[i];
            let q = BasParams::from_flat(&neg, 3, 2).unwrap();
            prop_assert_eq!(log_prior(&p), log_prior(&q));
        }

        #[test]
        fn posterior_is_prior_plus_likelihood(seed in 0u64..1000) {
            let (x, y) = random_problem(4, 12, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(4, 2, &mut rng);
            let z = &x * p.projection().unwrap().matrix();
            let lml = log_marginal_likelihood(&z, &y, &p.hyperparams().unwrap()).unwrap();
            let lp = log_posterior(&p, &x, &y).unwrap();
            prop_assert!((lp - (log_prior(&p) + lml)).abs() <= 1e-10 * lp.abs().max(1.0));
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let (x, y) = random_problem(3, 15, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(3, 1, &mut rng);
        let perm: Vec<usize> = (0..15).rev().collect();
        let xp = x.select_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = log_posterior(&p, &x, &y).unwrap();
        let b = log_posterior(&p, &xp, &yp).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn axis_aligned_projection_matches_one_dimensional_gp() {
        let (x, y) = random_problem(2, 10, 4);
        let p = BasParams::from_flat(&[1.0, 0.0, -0.3, 0.2, 0.1], 2, 1).unwrap();
        let col = DMatrix::from_fn(10, 1, |i, _| x[(i, 0)]);
        let expected = log_prior(&p) + log_marginal_likelihood(&col, &y, &p.hyperparams().unwrap()).unwrap();
        let got = log_posterior(&p, &x, &y).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected.abs());
    }

    #[test]
    fn likelihood_depends_on_theta_only_through_w() {
        // d = m = 2: the last coordinate only enters through its sign
        let (x, y) = random_problem(2, 10, 5);
        let a = BasParams::from_flat(&[0.4, -0.8, 0.3, 0.0, 0.1, -0.2, 0.3], 2, 2).unwrap();
        let b = BasParams::from_flat(&[0.4, -0.8, 0.7, 0.0, 0.1, -0.2, 0.3], 2, 2).unwrap();
        assert_eq!(a.projection().unwrap(), b.projection().unwrap());
        let la = log_posterior(&a, &x, &y).unwrap();
        let lb = log_posterior(&b, &x, &y).unwrap();
        let prior_gap = log_prior(&a) - log_prior(&b);
        assert!((la - lb - prior_gap).abs() <= 1e-12 * la.abs());
    }

    #[test]
    fn insensitive_coordinate_gradient_is_prior_term() {
        let (x, y) = random_problem(2, 10, 6);
        let p = BasParams::from_flat(&[0.4, -0.8, 0.7, 0.0, 0.1, -0.2, 0.3], 2, 2).unwrap();
        let g = log_posterior_grad(&p, &x, &y).unwrap();
        assert!((g[2] - (-0.7)).abs() < 1e-12, "{}", g[2]);
    }

    fn finite_difference(p: &BasParams, x: &DMatrix<f64>, y: &[f64], h: f64) -> Vec<f64> {
        let flat = p.to_flat();
        (0..flat.len())
            .map(|i| {
                let mut a = flat.clone();
                let mut b = flat.clone();
                a[i] += h;
                b[i] -= h;
                let fa = log_posterior(&BasParams::from_flat(&a, p.d(), p.m()).unwrap(), x, y).unwrap();
                let fb = log_posterior(&BasParams::from_flat(&b, p.d(), p.m()).unwrap(), x, y).unwrap();
                (fa - fb) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (d, m) in [(5, 1), (8, 2)] {
            let (x, y) = random_problem(d, 20, d as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + d as u64);
            for _ in 0..20 {
                let p = random_params(d, m, &mut rng);
                let g = log_posterior_grad(&p, &x, &y).unwrap();
                let fd = finite_difference(&p, &x, &y, 1e-5);
                let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(err <= 1e-5 * scale, "(d={d}, m={m}) err {err} scale {scale}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_local_maximum() {
        // The map only sees the direction of each slice, so the prior on
        // theta_p has no interior mode; maximize with that term removed
        // (BFGS ascent with backtracking).
        let (x, y) = random_problem(2, 12, 8);
        let k = param_count(2, 1);
        let eval = |f: &[f64]| {
            let (v, mut g) = log_posterior_with_grad(&BasParams::from_flat(f, 2, 1).unwrap(), &x, &y).unwrap();
            for i in 0..k {
                g[i] += f[i];
            }
            (v + 0.5 * f[..k].iter().map(|t| t * t).sum::<f64>(), g)
        };
        let n = 5;
        let mut flat = vec![0.5, 0.1, 0.0, 0.0, 0.0];
        let (mut val, mut grad) = eval(&flat);
        let mut h = DMatrix::<f64>::identity(n, n);
        for _ in 0..500 {
            let g = nalgebra::DVector::from_column_slice(&grad);
            if g.norm() <= 1e-8 {
                break;
            }
            let dir = &h * &g;
            let slope = g.dot(&dir);
            let mut step = 1.0;
            let (next, nv, ng) = loop {
                let trial: Vec<f64> = flat.iter().zip(dir.iter()).map(|(f, d)| f + step * d).collect();
                let (tv, tg) = eval(&trial);
                if tv >= val + 1e-4 * step * slope {
                    break (trial, tv, tg);
                }
                step *= 0.5;
                assert!(step > 1e-20, "line search failed");
            };
            let s = nalgebra::DVector::from_iterator(n, next.iter().zip(&flat).map(|(a, b)| a - b));
            // ascent on f is descent on -f: yk = grad(-f)_new - grad(-f)_old
            let yk = nalgebra::DVector::from_iterator(n, ng.iter().zip(&grad).map(|(a, b)| b - a));
            let sy = s.dot(&yk);
            if sy > 1e-12 {
                let rho = 1.0 / sy;
                let i = DMatrix::<f64>::identity(n, n);
                let left = &i - rho * &s * yk.transpose();
                let right = &i - rho * &yk * s.transpose();
                h = &left * &h * &right + rho * &s * s.transpose();
            }
            flat = next;
            val = nv;
            grad = ng;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm <= 1e-4, "gradient norm {norm}");
        let full = log_posterior_grad(&BasParams::from_flat(&flat, 2, 1).unwrap(), &x, &y).unwrap();
        for i in 0..k {
            assert!((full[i] + flat[i]).abs() <= 1e-4);
        }
    }

    fn toy_samples(d: usize, m: usize, chains: Vec<Vec<Vec<f64>>>) -> PosteriorSamples {
        PosteriorSamples {
            meta: PosteriorMeta {
                d,
                m,
                chains: chains.len(),
                draws: chains[0].len(),
                warmup: 0,
                seed: 0,
                hyperparameter_order: hyperparameter_order(m),
            },
            standardization: Standardization::identity(d),
            chains,
        }
    }

    #[test]
    fn collapsed_posterior_median_is_conditional_mean() {
        let (x, y) = random_problem(2, 15, 9);
        let flat = vec![0.8, 0.3, -1.0, 0.0, 0.2];
        let samples = toy_samples(2, 1, vec![vec![flat.clone(); 50]; 2]);
        let x_star = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, -0.5, 1.0, 1.0]);
        let pred = predict_marginal(&samples, &x_star, &x, &y, &PredictOptions::default()).unwrap();
        assert_eq!(pred.pool_size, 1000);
        let p = BasParams::from_flat(&flat, 2, 1).unwrap();
        let w = p.projection().unwrap();
        let gp = GpPosterior::fit(&x * w.matrix(), &y, p.hyperparams().unwrap()).unwrap();
        let exact = gp.predict(&(&x_star * w.matrix())).unwrap();
        let sd = exact.std();
        for (i, sd_i) in sd.iter().enumerate() {
            let tol = 3.0 * sd_i / (pred.pool_size as f64).sqrt();
            assert!((pred.median[i] - exact.mean[i]).abs() <= tol, "point {i}");
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_median() {
        let mix = GaussianMixturePredictive {
            means: vec![vec![-2.0], vec![2.0]],
            stds: vec![vec![0.5], vec![0.5]],
        };
        let pred = summarize_mixture(mix, 5000, 1).unwrap();
        assert!(pred.median[0].abs() < 0.2, "{}", pred.median[0]);
        // law of total variance: 0.25 + 4
        assert!(pred.std[0] >= 0.5);
        assert!((pred.std[0] - 4.25f64.sqrt()).abs() < 0.05);
        assert!(pred.q05[0] < -2.0 && pred.q95[0] > 2.0);
    }

    #[test]
    fn doubling_pool_barely_moves_medians() {
        let (x, y) = random_problem(3, 15, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chains: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..40).map(|_| random_params(3, 1, &mut rng).to_flat()).collect())
            .collect();
        let samples = toy_samples(3, 1, chains);
        let x_star = DMatrix::from_fn(5, 3, |i, j| 0.2 * i as f64 - 0.1 * j as f64);
        let a = predict_marginal(&samples, &x_star, &x, &y, &PredictOptions { draws_per_sample: 10, ..Default::default() }).unwrap();
        let b = predict_marginal(&samples, &x_star, &x, &y, &PredictOptions { draws_per_sample: 20, ..Default::default() }).unwrap();
        for i in 0..5 {
            let tol = 3.0 * a.std[i] / (a.pool_size as f64).sqrt();
            assert!((a.median[i] - b.median[i]).abs() < tol, "point {i}");
        }
    }

    #[test]
    fn prediction_is_independent_of_thread_count() {
        let (x, y) = random_problem(3, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let chains: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..10).map(|_| random_params(3, 2, &mut rng).to_flat()).collect())
            .collect();
        let samples = toy_samples(3, 2, chains);
        let x_star = DMatrix::from_fn(4, 3, |i, j| 0.3 * i as f64 - 0.2 * j as f64);
        let opts = PredictOptions { seed: 3, ..Default::default() };
        let par = predict_marginal(&samples, &x_star, &x, &y, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| predict_marginal(&samples, &x_star, &x, &y, &opts).unwrap());
        assert_eq!(par, seq);
        let thinned = predict_marginal(&samples, &x_star, &x, &y, &PredictOptions { max_posterior_draws: Some(5), ..opts }).unwrap();
        assert_eq!(thinned.mixture.components(), 5);
        assert_eq!(thinned.pool_size, 50);
    }

    #[test]
    fn destandardize_round_trip() {
        let mix = GaussianMixturePredictive {
            means: vec![vec![0.3, -1.2]],
            stds: vec![vec![0.4, 0.9]],
        };
        let pred = summarize_mixture(mix, 20, 0).unwrap();
        let s = Standardization {
            x_mean: vec![0.0],
            x_scale: vec![1.0],
            y_mean: 12.5,
            y_scale: 3.7,
        };
        let back = pred.destandardize(&s);
        let again = s.transform_y(&back.median);
        for (a, b) in again.iter().zip(&pred.median) {
            assert!((a - b).abs() <= 1e-12);
        }
        // the mixture density transforms with the Jacobian of the affine map
        let lk = back.mixture.log_kernel(0, s.inverse_y(&[0.1])[0]).unwrap();
        let lk0 = pred.mixture.log_kernel(0, 0.1).unwrap();
        assert!((lk - (lk0 - s.y_scale.ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_or_invalid_inputs() {
        let samples = PosteriorSamples {
            meta: PosteriorMeta {
                d: 2,
                m: 1,
                chains: 0,
                draws: 0,
                warmup: 0,
                seed: 0,
                hyperparameter_order: hyperparameter_order(1),
            },
            standardization: Standardization::identity(2),
            chains: vec![],
        };
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(
            predict_marginal(&samples, &x, &x, &[0.0; 3], &PredictOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
        let good = toy_samples(2, 1, vec![vec![vec![0.0; 5]]]);
        assert!(predict_marginal(&good, &x, &x, &[0.0; 3], &PredictOptions { draws_per_sample: 0, ..Default::default() }).is_err());
        assert!(BasParams::from_flat(&[0.0; 4], 2, 1).is_err());
        assert!(BasModel::new(DMatrix::zeros(3, 2), vec![0.0; 3], 3).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let chains: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..7).map(|_| random_params(4, 2, &mut rng).to_flat()).collect())
            .collect();
        let mut samples = toy_samples(4, 2, chains);
        samples.standardization.y_mean = 0.1 + 0.2;
        samples.standardization.x_scale[1] = 1.0 / 3.0;
        samples.chains[0][0][0] = f64::MIN_POSITIVE;
        samples.chains[1][6][3] = -1e300;
        let back = PosteriorSamples::from_json(&samples.to_json().unwrap()).unwrap();
        assert_eq!(back, samples);
        let json: serde_json::Value = serde_json::from_str(&samples.to_json().unwrap()).unwrap();
        assert_eq!(json["meta"]["hyperparameter_order"][0], "log_sigma_n");
        assert!(json["standardization"]["x_mean"].is_array());
    }

    #[test]
    fn posterior_sampling_smoke() {
        let (x, y) = random_problem(2, 15, 14);
        let cfg = SamplerConfig {
            chains: 2,
            draws: 30,
            warmup: 30,
            seed: 1,
            ..Default::default()
        };
        let (a, diag) = sample_posterior(&x, &y, 1, Standardization::identity(2), &cfg).unwrap();
        let (b, _) = sample_posterior(&x, &y, 1, Standardization::identity(2), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_draws(), 60);
        assert_eq!(diag.split_rhat.len(), 5);
        assert!(a.projections().unwrap().iter().all(|w| w.d() == 2 && w.m() == 1));
    }
}
