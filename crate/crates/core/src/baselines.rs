//! Comparison methods: maximum-likelihood active subspaces by optimization
//! on the Stiefel manifold (MO-AS), and a full-dimensional Bayesian GP whose
//! active subspace is extracted afterwards from posterior-mean gradients
//! (B-GP).

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::gp::{lml_terms, GpPosterior};
use crate::kernel::GpHyperparams;
use crate::metrics::GaussianMixturePredictive;
use crate::model::{hyperparameter_order, summarize_mixture, thin, MarginalPrediction, PosteriorMeta, PredictOptions};
use crate::sampler::{nuts_sample, ChainDiagnostics, LogDensity, SamplerConfig};
use crate::stiefel::{householder_map, qr_retract, tangent_project, ProjectionMatrix, ProjectionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoasConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for MoasConfig {
    fn default() -> Self {
        Self {
            restarts: 500,
            max_iterations: 1000,
            grad_tol: 1e-6,
            seed: 0,
        }
    }
}

/// Point estimate returned by MO-AS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoasModel {
    pub w: ProjectionMatrix,
    pub hp: GpHyperparams,
    pub restarts_used: usize,
    pub failed_restarts: usize,
    pub best_loglik: f64,
    /// Norm of the joint (Riemannian, log-hyperparameter) gradient at the
    /// returned point.
    pub grad_norm: f64,
    pub iterations: usize,
    pub hit_max_iterations: bool,
    /// Objective after every accepted step of the winning restart.
    pub trace: Vec<f64>,
}

impl MoasModel {
    pub fn posterior(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<GpPosterior> {
        GpPosterior::fit(x * self.w.matrix(), y, self.hp.clone())
    }
}

struct Iterate {
    w: ProjectionMatrix,
    log_hp: Vec<f64>,
    value: f64,
    xi: DMatrix<f64>,
    g_hp: Vec<f64>,
}

impl Iterate {
    fn sq_norm(&self) -> f64 {
        self.xi.norm_squared() + self.g_hp.iter().map(|g| g * g).sum::<f64>()
    }
}

fn moas_eval(x: &DMatrix<f64>, y: &[f64], w: ProjectionMatrix, log_hp: Vec<f64>) -> Result<Iterate> {
    let hp = GpHyperparams::from_log(&log_hp)?;
    let z = x * w.matrix();
    let terms = lml_terms(&z, y, &hp, true)?;
    let euclid = x.transpose() * terms.d_inputs.as_ref().expect("input derivatives requested");
    let xi = tangent_project(&w, &euclid)?;
    Ok(Iterate {
        w,
        log_hp,
        value: terms.value,
        xi,
        g_hp: terms.d_log_hp,
    })
}

struct RestartResult {
    it: Iterate,
    iterations: usize,
    hit_max: bool,
    trace: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn moas_restart(x: &DMatrix<f64>, y: &[f64], m: usize, cfg: &MoasConfig, restart: usize) -> Result<RestartResult> {
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let w0 = householder_map(&ProjectionParams::sample_prior(d, m, &mut rng)?)?;
    let hp0: Vec<f64> = (0..m + 2).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut it = moas_eval(x, y, w0, hp0)?;
    let mut trace = vec![it.value];
    let mut step = 0.1;
    let mut iterations = 0;
    let mut hit_max = true;
    while iterations < cfg.max_iterations {
        let sq = it.sq_norm();
        if sq.sqrt() < cfg.grad_tol {
            hit_max = false;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = qr_retract(&it.w, &(&it.xi * step)).and_then(|w| {
                let hp: Vec<f64> = it.log_hp.iter().zip(&it.g_hp).map(|(h, g)| h + step * g).collect();
                moas_eval(x, y, w, hp)
            });
            if let Ok(t) = trial {
                if t.value.is_finite() && t.value >= it.value + ARMIJO_C * step * sq {
                    accepted = Some(t);
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some(t) => {
                it = t;
                trace.push(it.value);
                step *= 2.0;
            }
            None => {
                // no ascent step at machine precision: treat as converged
                hit_max = false;
                break;
            }
        }
    }
    Ok(RestartResult {
        it,
        iterations,
        hit_max,
        trace,
    })
}

/// Maximizes the GP log marginal likelihood jointly over `W` and the log
/// hyperparameters from `cfg.restarts` random starts; the best run wins.
pub fn moas_train(x: &DMatrix<f64>, y: &[f64], m: usize, cfg: &MoasConfig) -> Result<MoasModel> {
    let d = x.ncols();
    if m == 0 || m > d {
        return Err(Error::invalid(format!("need 1 <= m <= d, got m = {m}, d = {d}")));
    }
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid("design and response must be nonempty and of equal length"));
    }
    if cfg.restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let results: Vec<Result<RestartResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| moas_restart(x, y, m, cfg, r))
        .collect();
    let mut failures = 0;
    let mut conditioning = 0;
    let mut best: Option<RestartResult> = None;
    for r in results {
        match r {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.it.value > b.it.value) {
                    best = Some(r);
                }
            }
            Err(e) => {
                failures += 1;
                if matches!(e, Error::Conditioning { .. }) {
                    conditioning += 1;
                }
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::Training(format!(
            "all {failures} restarts failed ({conditioning} conditioning, {} other)",
            failures - conditioning
        ))
    })?;
    Ok(MoasModel {
        hp: GpHyperparams::from_log(&best.it.log_hp)?,
        grad_norm: best.it.sq_norm().sqrt(),
        best_loglik: best.it.value,
        w: best.it.w,
        restarts_used: cfg.restarts,
        failed_restarts: failures,
        iterations: best.iterations,
        hit_max_iterations: best.hit_max,
        trace: best.trace,
    })
}

/// Uncentered second-moment matrix of gradient samples and its
/// eigendecomposition, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCovariance {
    pub c: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

impl GradientCovariance {
    /// `g` holds one gradient per row.
    pub fn from_gradients(g: &DMatrix<f64>) -> Result<Self> {
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(Error::invalid("no gradient samples"));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % g.nrows(), pos / g.nrows());
            return Err(Error::data(format!("gradient sample {r}, column {c} is not finite")));
        }
        let mut c = g.transpose() * g / g.nrows() as f64;
        c = (&c + c.transpose()) * 0.5;
        Ok(Self::from_matrix(c))
    }

    fn from_matrix(c: DMatrix<f64>) -> Self {
        let d = c.nrows();
        let eig = SymmetricEigen::new(c.clone());
        let lead_index = |j: usize| {
            let col = eig.eigenvectors.column(j);
            (0..d).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best })
        };
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        // runs of numerically equal eigenvalues are ordered by leading index
        let mut start = 0;
        while start < d {
            let head = eig.eigenvalues[order[start]];
            let mut end = start + 1;
            while end < d && (head - eig.eigenvalues[order[end]]).abs() <= 1e-12 * scale {
                end += 1;
            }
            order[start..end].sort_by_key(|&j| lead_index(j));
            start = end;
        }
        let mut eigenvectors = DMatrix::zeros(d, d);
        for (j, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).into_owned();
            if col[lead_index(src)] < 0.0 {
                col.neg_mut();
            }
            eigenvectors.set_column(j, &col);
        }
        Self {
            c,
            eigenvalues: order.iter().map(|&j| eig.eigenvalues[j]).collect(),
            eigenvectors,
        }
    }

    /// Leading `m` eigenvectors.
    pub fn leading(&self, m: usize) -> Result<ProjectionMatrix> {
        if m == 0 || m > self.c.nrows() {
            return Err(Error::invalid(format!("cannot take {m} leading eigenvectors of a {}-dimensional matrix", self.c.nrows())));
        }
        ProjectionMatrix::new(self.eigenvectors.columns(0, m).into_owned())
    }
}

/// Active subspace estimated from all available gradient samples.
pub fn reference_subspace_from_gradients(g: &DMatrix<f64>, m: usize) -> Result<(GradientCovariance, ProjectionMatrix)> {
    let cov = GradientCovariance::from_gradients(g)?;
    let w = cov.leading(m)?;
    Ok((cov, w))
}

/// Posterior over the `d + 2` log hyperparameters of a full-dimensional GP.
#[derive(Debug, Clone)]
pub struct BgpModel {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl BgpModel {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() || x.ncols() == 0 {
            return Err(Error::invalid("design and response must be nonempty and of equal length"));
        }
        Ok(Self { x, y })
    }
}

impl LogDensity for BgpModel {
    fn dim(&self) -> usize {
        self.x.ncols() + 2
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let hp = GpHyperparams::from_log(x)?;
        let terms = lml_terms(&self.x, &self.y, &hp, false)?;
        let mut lp = terms.value;
        for ((g, d), v) in grad.iter_mut().zip(&terms.d_log_hp).zip(x) {
            *g = d - v;
            lp -= 0.5 * (v * v + (2.0 * std::f64::consts::PI).ln());
        }
        Ok(lp)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect()
    }
}

/// B-GP posterior draws: each flat vector is `(log sigma_n, log sigma_f,
/// log l_1, ..., log l_d)`. `meta.m` equals `meta.d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgpPosterior {
    pub meta: PosteriorMeta,
    pub standardization: Standardization,
    pub chains: Vec<Vec<Vec<f64>>>,
}

impl BgpPosterior {
    pub fn validate(&self) -> Result<()> {
        let dim = self.meta.d + 2;
        if self.chains.is_empty() || self.chains[0].is_empty() {
            return Err(Error::invalid("posterior has no draws"));
        }
        let len = self.chains[0].len();
        if self.chains.iter().any(|c| c.len() != len || c.iter().any(|v| v.len() != dim)) {
            return Err(Error::invalid(format!("every chain needs {len} draws of length {dim}")));
        }
        Ok(())
    }

    pub fn flat_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.chains.iter().flat_map(|c| c.iter().map(Vec::as_slice))
    }

    pub fn hyperparams(&self) -> Result<Vec<GpHyperparams>> {
        self.flat_draws().map(GpHyperparams::from_log).collect()
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

pub fn bgp_train(
    x: &DMatrix<f64>,
    y: &[f64],
    standardization: Standardization,
    cfg: &SamplerConfig,
) -> Result<(BgpPosterior, ChainDiagnostics)> {
    let model = BgpModel::new(x.clone(), y.to_vec())?;
    let out = nuts_sample(&model, cfg)?;
    let d = x.ncols();
    Ok((
        BgpPosterior {
            meta: PosteriorMeta {
                d,
                m: d,
                chains: cfg.chains,
                draws: cfg.draws,
                warmup: cfg.warmup,
                seed: cfg.seed,
                hyperparameter_order: hyperparameter_order(d),
            },
            standardization,
            chains: out.chains,
        },
        out.diagnostics,
    ))
}

/// Marginal prediction over B-GP hyperparameter draws, in standardized units.
pub fn bgp_predict(
    posterior: &BgpPosterior,
    x_star: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &PredictOptions,
) -> Result<MarginalPrediction> {
    posterior.validate()?;
    let draws: Vec<&[f64]> = posterior.flat_draws().collect();
    let draws = thin(&draws, opts.max_posterior_draws);
    let comps: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .map(|flat| {
            let post = GpPosterior::fit(x.clone(), y, GpHyperparams::from_log(flat)?)?;
            let pred = post.predict(x_star)?;
            let std = pred.std();
            Ok((pred.mean, std))
        })
        .collect::<Result<_>>()?;
    let (means, stds) = comps.into_iter().unzip();
    summarize_mixture(GaussianMixturePredictive { means, stds }, opts.draws_per_sample, opts.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceOptions {
    pub n_grad: usize,
    pub max_draws: usize,
    pub seed: u64,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self {
            n_grad: 1000,
            max_draws: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDraw {
    pub w: ProjectionMatrix,
    pub covariance: GradientCovariance,
}

/// Uniform points in the bounding box of `x`.
pub fn uniform_box_points(x: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let bounds: Vec<(f64, f64)> = (0..x.ncols())
        .map(|j| (x.column(j).min(), x.column(j).max()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = DMatrix::zeros(n, x.ncols());
    for i in 0..n {
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            pts[(i, j)] = if hi > lo { rng.random_range(*lo..*hi) } else { *lo };
        }
    }
    pts
}

/// Gradient covariance of a GP posterior mean at `points` (one per row).
pub fn mean_gradient_covariance(post: &GpPosterior, points: &DMatrix<f64>) -> Result<GradientCovariance> {
    let d = points.ncols();
    let mut g = DMatrix::zeros(points.nrows(), d);
    for i in 0..points.nrows() {
        let p: Vec<f64> = points.row(i).iter().copied().collect();
        let grad = post.mean_grad(&p)?;
        for j in 0..d {
            g[(i, j)] = grad[j];
        }
    }
    GradientCovariance::from_gradients(&g)
}

/// Active subspace per (thinned) B-GP posterior draw. `x` is the
/// standardized training design; gradients are evaluated at the same
/// uniform points for every draw.
pub fn bgp_estimate_subspace(
    posterior: &BgpPosterior,
    x: &DMatrix<f64>,
    y: &[f64],
    m: usize,
    opts: &SubspaceOptions,
) -> Result<Vec<SubspaceDraw>> {
    posterior.validate()?;
    if opts.n_grad == 0 {
        return Err(Error::invalid("n_grad must be at least 1"));
    }
    let points = uniform_box_points(x, opts.n_grad, opts.seed);
    let draws: Vec<&[f64]> = posterior.flat_draws().collect();
    let draws = thin(&draws, Some(opts.max_draws));
    draws
        .par_iter()
        .map(|flat| {
            let post = GpPosterior::fit(x.clone(), y, GpHyperparams::from_log(flat)?)?;
            let covariance = mean_gradient_covariance(&post, &points)?;
            Ok(SubspaceDraw {
                w: covariance.leading(m)?,
                covariance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::principal_angles;
    use crate::sampler::split_rhat;

    fn uniform_design(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0f64..1.0))
    }

    fn centered(y: Vec<f64>) -> Vec<f64> {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        y.into_iter().map(|v| v - mean).collect()
    }

    #[test]
    fn rank_one_covariance_by_hand() {
        let g = DMatrix::from_row_slice(4, 2, &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let cov = GradientCovariance::from_gradients(&g).unwrap();
        assert_eq!(cov.c, DMatrix::from_row_slice(2, 2, &[9.0, 12.0, 12.0, 16.0]));
        assert!((cov.eigenvalues[0] - 25.0).abs() < 1e-12);
        assert!(cov.eigenvalues[1].abs() < 1e-12);
        let w = cov.leading(1).unwrap();
        assert!((w.matrix()[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((w.matrix()[(1, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn equal_gradients_along_first_axis() {
        let g = DMatrix::from_fn(5, 3, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let (cov, w) = reference_subspace_from_gradients(&g, 1).unwrap();
        assert_eq!(cov.eigenvalues, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.matrix().column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn tied_eigenvalues_break_by_index() {
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (cov, w) = reference_subspace_from_gradients(&g, 1).unwrap();
        assert_eq!(cov.eigenvalues, vec![0.5, 0.5]);
        assert_eq!(w.matrix()[(0, 0)], 1.0);
        assert_eq!(cov.eigenvectors, DMatrix::identity(2, 2));
    }

    #[test]
    fn covariance_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DMatrix::from_fn(30, 3, |_, j| (j + 1) as f64 * rng.random_range(-1.0f64..1.0));
        let r = householder_map(&ProjectionParams::sample_prior(3, 3, &mut rng).unwrap()).unwrap();
        let a = GradientCovariance::from_gradients(&g).unwrap();
        let b = GradientCovariance::from_gradients(&(&g * r.matrix().transpose())).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() < 1e-10);
        }
        for j in 0..3 {
            let rotated = r.matrix() * a.eigenvectors.column(j);
            let dot = rotated.dot(&b.eigenvectors.column(j)).abs();
            assert!((dot - 1.0).abs() < 1e-8);
        }
        // reconstruction and ordering
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.eigenvalues.clone()));
        let rec = &a.eigenvectors * lam * a.eigenvectors.transpose();
        assert!((rec - &a.c).norm() <= 1e-8 * a.c.norm());
        assert!(a.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        assert!(a.eigenvalues.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, f64::NAN, 0.0]);
        assert!(matches!(reference_subspace_from_gradients(&g, 1), Err(Error::Data(_))));
    }

    #[test]
    fn zero_response_gives_zero_covariance() {
        let x = uniform_design(10, 2, 2);
        let hp = GpHyperparams::new(1.0, 0.1, vec![1.0, 1.0]).unwrap();
        let post = GpPosterior::fit(x.clone(), &[0.0; 10], hp).unwrap();
        let cov = mean_gradient_covariance(&post, &uniform_box_points(&x, 50, 0)).unwrap();
        assert_eq!(cov.c, DMatrix::zeros(2, 2));
        assert_eq!(cov.eigenvalues, vec![0.0, 0.0]);
    }

    #[test]
    fn true_gradients_recover_ridge() {
        // f(x) = sin(aᵀx): analytic gradients at uniform points
        let a = nalgebra::DVector::from_vec(vec![0.3, -0.4, 0.0, 1.2]);
        let pts = uniform_box_points(&uniform_design(50, 4, 3), 500, 4);
        let g = DMatrix::from_fn(500, 4, |i, j| (pts.row(i).dot(&a.transpose())).cos() * a[j]);
        let (_, w) = reference_subspace_from_gradients(&g, 1).unwrap();
        let truth = ProjectionMatrix::from_direction(a.as_slice()).unwrap();
        let angle = principal_angles(&w, &truth).unwrap().first();
        assert!(angle.to_degrees() <= 2.0, "{}", angle.to_degrees());
    }

    #[test]
    fn moas_recovers_quadratic_ridge() {
        let w_true = ProjectionMatrix::from_direction(&[1.0, 2.0, -1.0]).unwrap();
        let x = uniform_design(60, 3, 5);
        let t = &x * w_true.matrix();
        let y = centered(t.iter().map(|v| v * v).collect());
        let cfg = MoasConfig {
            restarts: 10,
            seed: 1,
            ..Default::default()
        };
        let model = moas_train(&x, &y, 1, &cfg).unwrap();
        let angle = principal_angles(&model.w, &w_true).unwrap().first();
        assert!(angle.to_degrees() <= 5.0, "angle {}", angle.to_degrees());
        assert!(model.trace.windows(2).all(|p| p[1] >= p[0]));
        assert!(crate::linalg::orthonormality_error(model.w.matrix()) <= 1e-8);
        assert!(model.grad_norm <= 1e-4 || model.hit_max_iterations);
        assert_eq!(model.restarts_used, 10);
    }

    #[test]
    fn moas_is_deterministic_and_validates() {
        let x = uniform_design(20, 3, 6);
        let y = centered((0..20).map(|i| x[(i, 0)] - x[(i, 2)]).collect());
        let cfg = MoasConfig {
            restarts: 3,
            max_iterations: 50,
            seed: 2,
            ..Default::default()
        };
        let a = moas_train(&x, &y, 1, &cfg).unwrap();
        let b = moas_train(&x, &y, 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(moas_train(&x, &y, 4, &cfg).is_err());
        assert!(moas_train(&x, &y, 1, &MoasConfig { restarts: 0, ..cfg }).is_err());
    }

    #[test]
    fn bgp_one_dimensional_is_standard_gpr() {
        let x = uniform_design(15, 1, 7);
        let y = centered((0..15).map(|i| (2.0 * x[(i, 0)]).sin()).collect());
        let model = BgpModel::new(x.clone(), y.clone()).unwrap();
        assert_eq!(model.dim(), 3);
        let eta = [-1.0, 0.2, -0.3];
        let mut g = [0.0; 3];
        let lp = model.log_density_grad(&eta, &mut g).unwrap();
        let hp = GpHyperparams::from_log(&eta).unwrap();
        let lml = crate::gp::log_marginal_likelihood(&x, &y, &hp).unwrap();
        let prior: f64 = eta.iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((lp - (lml + prior)).abs() < 1e-10);
    }

    #[test]
    fn bgp_noise_concentrates_for_smooth_target() {
        let x = uniform_design(40, 2, 8);
        let y = centered((0..40).map(|i| (x[(i, 0)] + 0.5 * x[(i, 1)]).sin()).collect());
        let sd = (y.iter().map(|v| v * v).sum::<f64>() / 40.0).sqrt();
        let cfg = SamplerConfig {
            chains: 2,
            draws: 100,
            warmup: 150,
            seed: 3,
            ..Default::default()
        };
        let (post, _) = bgp_train(&x, &y, Standardization::identity(2), &cfg).unwrap();
        let draws: Vec<f64> = post.flat_draws().map(|f| f[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean < sd.ln(), "posterior mean log sigma_n {mean}, log sd {}", sd.ln());
    }

    #[test]
    fn bgp_mixes_on_quadratic() {
        let (ds, _) = crate::data::generate_quadratic(5, 1, 50, 9).unwrap();
        let s = Standardization::fit(&ds).unwrap();
        let x = s.transform_x(&ds.x).unwrap();
        let y = s.transform_y(&ds.y);
        let cfg = SamplerConfig { seed: 4, draws: 500, warmup: 500, ..Default::default() };
        let (post, diag) = bgp_train(&x, &y, s, &cfg).unwrap();
        assert!(diag.split_rhat.iter().all(|&r| r < 1.1), "{:?}", diag.split_rhat);
        let r0 = split_rhat(&crate::sampler::parameter_chains(&post.chains, 0)).unwrap();
        assert_eq!(r0, diag.split_rhat[0]);

        let back = BgpPosterior::from_json(&post.to_json().unwrap()).unwrap();
        assert_eq!(back, post);

        let subs = bgp_estimate_subspace(&post, &x, &y, 1, &SubspaceOptions { n_grad: 100, max_draws: 8, seed: 0 }).unwrap();
        assert_eq!(subs.len(), 8);
        for s in &subs {
            assert!(s.covariance.eigenvalues.iter().all(|&l| l >= -1e-10));
            assert!((&s.covariance.c - s.covariance.c.transpose()).norm() == 0.0);
        }
        let pred = bgp_predict(&post, &x.rows(0, 5).into_owned(), &x, &y, &PredictOptions { max_posterior_draws: Some(20), ..Default::default() }).unwrap();
        assert_eq!(pred.pool_size, 200);
    }
}
