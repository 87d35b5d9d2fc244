//! Orthonormal frames on the Stiefel manifold `St(m, d)`.
//!
//! [`householder_map`] turns an unconstrained vector of
//! `k = m*d - m*(m-1)/2` reals into a `d x m` matrix with orthonormal columns
//! by chaining `m` Householder reflections, each acting on a shrinking
//! trailing block. Standard-normal parameters give Haar-distributed frames,
//! so the map can sit directly under a Gaussian prior in an MCMC sampler.
//!
//! The manifold-optimization helpers [`tangent_project`] and [`qr_retract`]
//! are used by the maximum-likelihood baseline.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormality_error;

/// Tolerance used when a caller-supplied frame has to be orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Number of unconstrained parameters needed for a `d x m` frame.
pub fn param_count(d: usize, m: usize) -> usize {
    m * d - m * (m.saturating_sub(1)) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub theta: Vec<f64>,
    pub d: usize,
    pub m: usize,
}

impl ProjectionParams {
    pub fn new(theta: Vec<f64>, d: usize, m: usize) -> Result<Self> {
        if m == 0 || d < m {
            return Err(Error::invalid(format!(
                "projection needs 1 <= m <= d, got d={d}, m={m}"
            )));
        }
        let k = param_count(d, m);
        if theta.len() != k {
            return Err(Error::invalid(format!(
                "St({m}, {d}) needs {k} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("projection parameters contain NaN"));
        }
        Ok(Self { theta, d, m })
    }

    /// Draws `theta ~ N(0, I_k)`.
    pub fn sample_prior<R: rand::Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<Self> {
        let theta = (0..param_count(d, m))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::new(theta, d, m)
    }

    /// Contiguous parameter ranges consumed by each reflection:
    /// lengths `d, d-1, ..., d-m+1`.
    pub fn slices(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let d = self.d;
        (0..self.m).scan(0usize, move |start, i| {
            let len = d - i;
            let r = *start..*start + len;
            *start += len;
            Some(r)
        })
    }
}

/// A `d x m` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ProjectionMatrix(DMatrix<f64>);

impl ProjectionMatrix {
    /// Wraps `w` after checking `wᵀw = I` to [`ORTHONORMAL_TOL`].
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 || w.nrows() < w.ncols() {
            return Err(Error::invalid(format!(
                "projection matrix must be tall, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let err = orthonormality_error(&w);
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "matrix is not orthonormal (max |WᵀW - I| = {err:e})"
            )));
        }
        Ok(Self(w))
    }

    pub(crate) fn new_unchecked(w: DMatrix<f64>) -> Self {
        Self(w)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn m(&self) -> usize {
        self.0.ncols()
    }

    /// Basis of a single direction, normalized.
    pub fn from_direction(v: &[f64]) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::invalid("direction must be nonzero"));
        }
        Self::new(DMatrix::from_iterator(v.len(), 1, v.iter().map(|x| x / n)))
    }
}

impl TryFrom<Vec<Vec<f64>>> for ProjectionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::invalid("ragged projection matrix"));
        }
        Self::new(crate::linalg::from_rows(&rows, ncols))
    }
}

impl From<ProjectionMatrix> for Vec<Vec<f64>> {
    fn from(w: ProjectionMatrix) -> Self {
        crate::linalg::to_rows(&w.0)
    }
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// One block reflection `Ĥ = -sgn(v_1) (I - 2uuᵀ)` with
/// `u ∝ v + sgn(v_1)‖v‖e_1`. `Ĥe_1 = v/‖v‖`.
#[derive(Debug, Clone)]
pub struct Reflector {
    u: Vec<f64>,
    sign: f64,
    v_norm: f64,
    w_norm: f64,
}

impl Reflector {
    pub fn new(v: &[f64]) -> Option<Self> {
        let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || v_norm == 0.0 || !v_norm.is_finite() {
            return None;
        }
        let sign = sgn(v[0]);
        let mut u = v.to_vec();
        u[0] += sign * v_norm;
        let w_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= w_norm);
        Some(Self {
            u,
            sign,
            v_norm,
            w_norm,
        })
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.u.len();
        DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            -self.sign * (id - 2.0 * self.u[i] * self.u[j])
        })
    }

    /// Applies the reflection to rows `offset..` of `w`, in place.
    fn apply(&self, w: &mut DMatrix<f64>, offset: usize) {
        for c in 0..w.ncols() {
            let proj: f64 = self
                .u
                .iter()
                .enumerate()
                .map(|(r, ur)| ur * w[(offset + r, c)])
                .sum();
            for (r, ur) in self.u.iter().enumerate() {
                let x = w[(offset + r, c)];
                w[(offset + r, c)] = -self.sign * (x - 2.0 * ur * proj);
            }
        }
    }
}

/// Forward pass that keeps what the reverse pass needs.
struct HouseholderTape {
    reflectors: Vec<Reflector>,
    /// Frame before each reflection was applied.
    inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

fn householder_forward(p: &ProjectionParams, keep_tape: bool) -> Result<HouseholderTape> {
    let (d, m) = (p.d, p.m);
    let mut w = DMatrix::identity(d, m);
    let mut reflectors = Vec::with_capacity(m);
    let mut inputs = Vec::with_capacity(if keep_tape { m } else { 0 });
    for (i, range) in p.slices().enumerate() {
        let h = Reflector::new(&p.theta[range]).ok_or(Error::DegenerateReflection { slice: i })?;
        if keep_tape {
            inputs.push(w.clone());
        }
        h.apply(&mut w, i);
        reflectors.push(h);
    }
    Ok(HouseholderTape {
        reflectors,
        inputs,
        output: w,
    })
}

/// Maps unconstrained parameters to an orthonormal `d x m` frame.
///
/// Starting from `Q = I_d`, reflection `i` (0-based) is built from the
/// parameter slice of length `d - i` and applied to rows `i..d` of `Q`;
/// the result is the first `m` columns of `Q`. `sgn(0)` is taken as `+1`.
pub fn householder_map(p: &ProjectionParams) -> Result<ProjectionMatrix> {
    Ok(ProjectionMatrix::new_unchecked(
        householder_forward(p, false)?.output,
    ))
}

/// Frame together with the pullback of a cotangent: given `dL/dW`, returns
/// `dL/dtheta`.
pub fn householder_vjp(
    p: &ProjectionParams,
    w_bar: impl FnOnce(&ProjectionMatrix) -> Result<DMatrix<f64>>,
) -> Result<(ProjectionMatrix, Vec<f64>)> {
    let tape = householder_forward(p, true)?;
    let w = ProjectionMatrix::new_unchecked(tape.output);
    let mut a = w_bar(&w)?;
    if a.shape() != (p.d, p.m) {
        return Err(Error::invalid("cotangent shape does not match the frame"));
    }
    let mut grad = vec![0.0; p.theta.len()];
    let ranges: Vec<_> = p.slices().collect();
    for i in (0..p.m).rev() {
        let h = &tape.reflectors[i];
        let b = &tape.inputs[i];
        let len = p.d - i;
        // u_bar = 2s (A Bᵀu + B Aᵀu) restricted to the active rows
        let mut btu = vec![0.0; p.m];
        let mut atu = vec![0.0; p.m];
        for c in 0..p.m {
            for r in 0..len {
                btu[c] += b[(i + r, c)] * h.u[r];
                atu[c] += a[(i + r, c)] * h.u[r];
            }
        }
        let u_bar: Vec<f64> = (0..len)
            .map(|r| {
                let s: f64 = (0..p.m)
                    .map(|c| a[(i + r, c)] * btu[c] + b[(i + r, c)] * atu[c])
                    .sum();
                2.0 * h.sign * s
            })
            .collect();
        // the reflector is symmetric, so the cotangent of its input is Ĥ A
        h.apply(&mut a, i);
        let uu: f64 = h.u.iter().zip(&u_bar).map(|(x, y)| x * y).sum();
        let w_bar: Vec<f64> = (0..len)
            .map(|r| (u_bar[r] - h.u[r] * uu) / h.w_norm)
            .collect();
        let v = &p.theta[ranges[i].clone()];
        for r in 0..len {
            grad[ranges[i].start + r] = w_bar[r] + h.sign * w_bar[0] * v[r] / h.v_norm;
        }
    }
    Ok((w, grad))
}

/// Summary of a Monte-Carlo check of the Haar property of the prior.
#[derive(Debug, Clone, Serialize)]
pub struct HaarReport {
    pub sample_count: usize,
    pub d: usize,
    pub m: usize,
    /// Sample mean of each entry of the first column.
    pub first_column_mean: Vec<f64>,
    /// Sample mean of each squared entry of the first column.
    pub first_column_sq_mean: Vec<f64>,
    pub mean_tolerance: f64,
    pub sq_mean_tolerance: f64,
    pub mean_ok: bool,
    pub sq_mean_ok: bool,
}

impl HaarReport {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.sq_mean_ok
    }
}

/// Draws Gaussian parameters, maps them and compares the first-column
/// marginals against the uniform distribution on the sphere.
pub fn haar_uniformity_check(sample_count: usize, d: usize, m: usize, seed: u64) -> Result<HaarReport> {
    if sample_count < 1000 {
        return Err(Error::invalid("the Haar check needs at least 1000 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut drawn = 0;
    while drawn < sample_count {
        let p = ProjectionParams::sample_prior(d, m, &mut rng)?;
        let w = match householder_map(&p) {
            Ok(w) => w,
            Err(Error::DegenerateReflection { .. }) => continue,
            Err(e) => return Err(e),
        };
        for i in 0..d {
            let x = w.matrix()[(i, 0)];
            sum[i] += x;
            sum_sq[i] += x * x;
        }
        drawn += 1;
    }
    let n = sample_count as f64;
    let first_column_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let first_column_sq_mean: Vec<f64> = sum_sq.iter().map(|s| s / n).collect();
    let mean_tolerance = 4.0 / n.sqrt();
    let df = d as f64;
    // Var(u_i^2) for u uniform on the unit sphere in R^d
    let sq_var = 2.0 * (df - 1.0) / (df * df * (df + 2.0));
    let sq_mean_tolerance = 4.0 * (sq_var / n).sqrt();
    let mean_ok = first_column_mean.iter().all(|v| v.abs() <= mean_tolerance);
    let sq_mean_ok = first_column_sq_mean
        .iter()
        .all(|v| (v - 1.0 / df).abs() <= sq_mean_tolerance.max(1e-12));
    Ok(HaarReport {
        sample_count,
        d,
        m,
        first_column_mean,
        first_column_sq_mean,
        mean_tolerance,
        sq_mean_tolerance,
        mean_ok,
        sq_mean_ok,
    })
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Projects `g` onto the tangent space at `w`: `g - w sym(wᵀg)`.
pub fn tangent_project(w: &ProjectionMatrix, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let wm = w.matrix();
    if g.shape() != wm.shape() {
        return Err(Error::invalid(format!(
            "tangent vector shape {:?} does not match frame shape {:?}",
            g.shape(),
            wm.shape()
        )));
    }
    let err = orthonormality_error(wm);
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::invalid(format!(
            "base point is not orthonormal (max |WᵀW - I| = {err:e})"
        )));
    }
    Ok(g - wm * sym(&(wm.transpose() * g)))
}

/// QR retraction: the `Q` factor of `w + xi` with `diag(R) > 0`.
pub fn qr_retract(w: &ProjectionMatrix, xi: &DMatrix<f64>) -> Result<ProjectionMatrix> {
    let wm = w.matrix();
    if xi.shape() != wm.shape() {
        return Err(Error::invalid("step shape does not match frame shape"));
    }
    let y = wm + xi;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateRetraction);
    }
    let scale = y.norm().max(f64::MIN_POSITIVE);
    let qr = y.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..q.ncols() {
        let rc = r[(c, c)];
        if rc.abs() <= 1e-12 * scale {
            return Err(Error::DegenerateRetraction);
        }
        if rc < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    Ok(ProjectionMatrix::new_unchecked(q))
}
