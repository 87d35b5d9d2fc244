//! Datasets: synthetic quadratic ridge benchmarks, CSV ingestion, splitting
//! and standardization.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stiefel::{householder_map, ProjectionMatrix, ProjectionParams};

/// Default additive noise of the quadratic benchmarks.
pub const DEFAULT_NOISE_STD: f64 = 0.05;
/// Generated inputs are uniform on `[INPUT_LOW, INPUT_HIGH]^d`.
pub const INPUT_LOW: f64 = -1.0;
pub const INPUT_HIGH: f64 = 1.0;

const STREAM_PARAMS: u64 = 0;
const STREAM_INPUTS: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub gradients: Option<DMatrix<f64>>,
    pub name: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, gradients: Option<DMatrix<f64>>, name: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::data(format!("{} input rows but {} responses", x.nrows(), y.len())));
        }
        if x.ncols() == 0 {
            return Err(Error::data("dataset has no input columns"));
        }
        if let Some(g) = &gradients {
            if g.shape() != x.shape() {
                return Err(Error::data(format!(
                    "gradient matrix is {}x{} but inputs are {}x{}",
                    g.nrows(),
                    g.ncols(),
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        let finite = x.iter().chain(&y).chain(gradients.iter().flat_map(|g| g.iter())).all(|v| v.is_finite());
        if !finite {
            return Err(Error::data("dataset contains NaN or infinite values"));
        }
        Ok(Self {
            x,
            y,
            gradients,
            name: name.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Dataset {
            x: pick(&self.x),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            gradients: self.gradients.as_ref().map(pick),
            name: self.name.clone(),
        }
    }
}

/// Parameters of the random quadratic ridge `f(x) = zᵀAz + bᵀz + c + eps`,
/// `z = Wᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub d: usize,
    pub m: usize,
    pub w: ProjectionMatrix,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub input_bounds: [f64; 2],
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl QuadraticSpec {
    /// Draws `W` from the Haar prior and `A, b, c` i.i.d. standard normal.
    pub fn random(d: usize, m: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if m == 0 || d < m {
            return Err(Error::invalid(format!("quadratic benchmark needs d >= m >= 1, got d={d}, m={m}")));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be finite and nonnegative"));
        }
        let mut rng = stream_rng(seed, STREAM_PARAMS);
        let w = loop {
            let p = ProjectionParams::sample_prior(d, m, &mut rng)?;
            match householder_map(&p) {
                Ok(w) => break w,
                Err(Error::DegenerateReflection { .. }) => continue,
                Err(e) => return Err(e),
            }
        };
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let a = (0..m).map(|_| (0..m).map(|_| normal()).collect()).collect();
        let b = (0..m).map(|_| normal()).collect();
        let c = normal();
        Ok(Self {
            d,
            m,
            w,
            a,
            b,
            c,
            noise_std,
            seed,
            input_bounds: [INPUT_LOW, INPUT_HIGH],
        })
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let w = self.w.matrix();
        (0..self.m).map(|j| (0..self.d).map(|i| w[(i, j)] * x[i]).sum()).collect()
    }

    /// Noise-free response.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let z = self.project(x);
        let mut f = self.c;
        for i in 0..self.m {
            f += self.b[i] * z[i];
            for j in 0..self.m {
                f += z[i] * self.a[i][j] * z[j];
            }
        }
        f
    }

    /// `W (A + Aᵀ) z + W b`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let z = self.project(x);
        let inner: Vec<f64> = (0..self.m)
            .map(|i| {
                let sym: f64 = (0..self.m).map(|j| (self.a[i][j] + self.a[j][i]) * z[j]).sum();
                sym + self.b[i]
            })
            .collect();
        let w = self.w.matrix();
        (0..self.d).map(|r| (0..self.m).map(|j| w[(r, j)] * inner[j]).sum()).collect()
    }

    /// Samples `n` inputs and noisy responses; deterministic in the seed.
    pub fn sample(&self, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        let [lo, hi] = self.input_bounds;
        let mut xr = stream_rng(self.seed, STREAM_INPUTS);
        let x = DMatrix::from_fn(n, self.d, |_, _| 0.0);
        let mut x = x;
        for i in 0..n {
            for j in 0..self.d {
                x[(i, j)] = xr.random_range(lo..hi);
            }
        }
        let mut nr = stream_rng(self.seed, STREAM_NOISE);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut y = Vec::with_capacity(n);
        let mut g = DMatrix::zeros(n, self.d);
        for i in 0..n {
            let xi = crate::linalg::row(&x, i);
            y.push(self.evaluate(&xi) + noise.sample(&mut nr));
            for (j, gj) in self.gradient(&xi).into_iter().enumerate() {
                g[(i, j)] = gj;
            }
        }
        let name = format!("quadratic_d{}_m{}_s{}_u[{lo},{hi}]", self.d, self.m, self.seed);
        Dataset::new(x, y, Some(g), name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn generate_quadratic(d: usize, m: usize, n: usize, seed: u64) -> Result<(Dataset, QuadraticSpec)> {
    generate_quadratic_with_noise(d, m, n, seed, DEFAULT_NOISE_STD)
}

pub fn generate_quadratic_with_noise(
    d: usize,
    m: usize,
    n: usize,
    seed: u64,
    noise_std: f64,
) -> Result<(Dataset, QuadraticSpec)> {
    let spec = QuadraticSpec::random(d, m, noise_std, seed)?;
    Ok((spec.sample(n)?, spec))
}

fn expect_header(header: &csv::StringRecord, col: usize, want: &str) -> Result<()> {
    match header.get(col) {
        Some(h) if h.trim() == want => Ok(()),
        Some(h) => Err(Error::data(format!("header column {col} is '{h}', expected '{want}'"))),
        None => Err(Error::data(format!("header is missing column '{want}'"))),
    }
}

/// Reads `x0,...,x{d-1},y[,g0,...,g{d-1}]`. Lines starting with `#` are
/// ignored.
pub fn load_dataset(path: impl AsRef<Path>, has_gradients: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let y_col = header
        .iter()
        .position(|h| h.trim() == "y")
        .ok_or_else(|| Error::data(format!("{}: no 'y' column in header", path.display())))?;
    let d = y_col;
    if d == 0 {
        return Err(Error::data("no input columns before 'y'"));
    }
    for j in 0..d {
        expect_header(&header, j, &format!("x{j}"))?;
    }
    let expected = if has_gradients { 2 * d + 1 } else { d + 1 };
    if has_gradients {
        for j in 0..d {
            expect_header(&header, d + 1 + j, &format!("g{j}"))?;
        }
    }
    if header.len() != expected && !(header.len() == 2 * d + 1 && !has_gradients) {
        return Err(Error::data(format!(
            "header has {} columns, expected {expected}",
            header.len()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut gs = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(r + 2, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::data(format!(
                "row {} (line {line}) has {} fields, expected {}",
                r + 1,
                rec.len(),
                header.len()
            )));
        }
        let mut vals = Vec::with_capacity(expected);
        for c in 0..expected {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(format!(
                    "row {} (line {line}), column '{}': '{cell}' is not a number",
                    r + 1,
                    &header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "row {} (line {line}), column '{}': non-finite value",
                    r + 1,
                    &header[c]
                )));
            }
            vals.push(v);
        }
        xs.push(vals[..d].to_vec());
        ys.push(vals[d]);
        if has_gradients {
            gs.push(vals[d + 1..].to_vec());
        }
    }
    if ys.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let x = crate::linalg::from_rows(&xs, d);
    let gradients = has_gradients.then(|| crate::linalg::from_rows(&gs, d));
    let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(x, ys, gradients, name)
}

/// Header line for the dataset CSV.
pub fn csv_header(d: usize, with_gradients: bool) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    h.push("y".into());
    if with_gradients {
        h.extend((0..d).map(|j| format!("g{j}")));
    }
    h
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset, preamble: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let mut out = String::new();
    if let Some(p) = preamble {
        for line in p.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&csv_header(ds.d(), ds.gradients.is_some()).join(","));
    out.push('\n');
    for i in 0..ds.n() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        fields.push(ds.y[i].to_string());
        if let Some(g) = &ds.gradients {
            fields.extend(g.row(i).iter().map(|v| v.to_string()));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub train_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
}

/// Uniformly random partition into `n_train` training rows and the rest.
pub fn split(ds: &Dataset, n_train: usize, seed: u64) -> Result<SplitDataset> {
    let n = ds.n();
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!("n_train must be in [1, {}), got {n_train}", n)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, validation_idx) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    Ok(SplitDataset {
        train: ds.select(&train_idx),
        validation: ds.select(&validation_idx),
        train_idx,
        validation_idx,
    })
}

/// Affine maps fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_and_std(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count() as f64;
    let mean = vals.clone().sum::<f64>() / n;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardization {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let mut x_mean = Vec::with_capacity(train.d());
        let mut x_scale = Vec::with_capacity(train.d());
        for j in 0..train.d() {
            let (m, s) = mean_and_std(train.x.column(j).iter().copied());
            if !(s > 0.0) {
                return Err(Error::data(format!("input column x{j} has zero variance in the training set")));
            }
            x_mean.push(m);
            x_scale.push(s);
        }
        let (y_mean, y_scale) = mean_and_std(train.y.iter().copied());
        if !(y_scale > 0.0) {
            return Err(Error::data("response y has zero variance in the training set"));
        }
        Ok(Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        })
    }

    /// Identity map, for data that is already standardized.
    pub fn identity(d: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.x_mean.len()
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d() {
            return Err(Error::data(format!("expected {} input columns, got {}", self.d(), x.ncols())));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_scale[j]))
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_scale + self.y_mean).collect()
    }

    /// Chain rule from original-coordinate gradients to the gradients of
    /// the standardized response with respect to standardized inputs.
    pub fn transform_gradients(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if g.ncols() != self.d() {
            return Err(Error::data("gradient columns do not match the inputs"));
        }
        Ok(DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * self.x_scale[j] / self.y_scale))
    }

    /// Standardized bounding box of `x` (original coordinates).
    pub fn box_of(&self, x: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        let z = self.transform_x(x)?;
        Ok((0..z.ncols())
            .map(|j| {
                let c = z.column(j);
                (c.min(), c.max())
            })
            .collect())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform_x(&ds.x)?,
            y: self.transform_y(&ds.y),
            gradients: ds.gradients.clone(),
            name: ds.name.clone(),
        })
    }
}

/// Standardizes both halves with training statistics. Gradients are left in
/// original coordinates.
pub fn standardize(ds: &SplitDataset) -> Result<(SplitDataset, Standardization)> {
    let s = Standardization::fit(&ds.train)?;
    Ok((
        SplitDataset {
            train: s.apply(&ds.train)?,
            validation: s.apply(&ds.validation)?,
            train_idx: ds.train_idx.clone(),
            validation_idx: ds.validation_idx.clone(),
        },
        s,
    ))
}
