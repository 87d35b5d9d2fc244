//! A single benchmark cell end to end: load or generate data, split and
//! standardize, train one method, and score it on the validation rows.
//! Model files written here are what the command-line tool reads back.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    bgp_estimate_subspace, bgp_predict, bgp_train, moas_train, reference_subspace_from_gradients, BgpPosterior,
    MoasConfig, MoasModel, SubspaceOptions,
};
use crate::data::{generate_quadratic_with_noise, load_dataset, split, Dataset, Standardization, DEFAULT_NOISE_STD};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, to_rows};
use crate::metrics::{mlppd, mfsa, r_squared, time_training, GaussianPredictive, MetricsReport, PointwisePredictive};
use crate::model::{
    predict_marginal, sample_posterior, MarginalPrediction, PosteriorMeta, PosteriorSamples, PredictOptions,
    DEFAULT_DRAWS_PER_SAMPLE,
};
use crate::sampler::{ChainDiagnostics, SamplerConfig};
use crate::stiefel::ProjectionMatrix;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bas,
    Moas,
    Bgp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bas => "bas",
            Method::Moas => "moas",
            Method::Bgp => "bgp",
        }
    }

    /// Dimension of the space the GP regresses on, which sets the MLPPD
    /// normalization.
    pub fn mlppd_gamma(self, d: usize, m: usize) -> usize {
        match self {
            Method::Bgp => d,
            Method::Bas | Method::Moas => m,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bas" => Ok(Method::Bas),
            "moas" | "mo-as" => Ok(Method::Moas),
            "bgp" | "b-gp" => Ok(Method::Bgp),
            other => Err(Error::invalid(format!("unknown method '{other}' (expected bas, moas or bgp)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_total() -> usize {
    1000
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Random quadratic ridge function.
    Generated {
        d: usize,
        m: usize,
        #[serde(default = "default_total")]
        n: usize,
        seed: u64,
        #[serde(default = "default_noise")]
        noise_std: f64,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        has_gradients: bool,
    },
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Generated { d, m, seed, .. } => format!("qf_d{d}_m{m}_s{seed}"),
            DatasetSource::File { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut ds = match self {
            DatasetSource::Generated { d, m, n, seed, noise_std } => {
                generate_quadratic_with_noise(*d, *m, *n, *seed, *noise_std)?.0
            }
            DatasetSource::File { path, has_gradients } => load_dataset(path, *has_gradients)?,
        };
        ds.name = self.name();
        Ok(ds)
    }
}

pub(crate) fn default_restarts() -> usize {
    MoasConfig::default().restarts
}

pub(crate) fn default_n_grad() -> usize {
    SubspaceOptions::default().n_grad
}

pub(crate) fn default_subspace_draws() -> usize {
    SubspaceOptions::default().max_draws
}

pub(crate) fn default_draws_per_sample() -> usize {
    DEFAULT_DRAWS_PER_SAMPLE
}

/// Everything needed to reproduce one trained model. `seed` drives the
/// train/validation split and every random choice of the method; the
/// sampler's own seed field is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub dataset: DatasetSource,
    pub m: usize,
    pub n_train: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_restarts")]
    pub moas_restarts: usize,
    #[serde(default = "default_n_grad")]
    pub bgp_n_grad: usize,
    #[serde(default = "default_subspace_draws")]
    pub bgp_subspace_draws: usize,
    #[serde(default = "default_draws_per_sample")]
    pub draws_per_sample: usize,
    #[serde(default)]
    pub max_posterior_draws: Option<usize>,
}

impl RunConfig {
    pub fn new(method: Method, dataset: DatasetSource, m: usize, n_train: usize, seed: u64) -> Self {
        Self {
            method,
            dataset,
            m,
            n_train,
            seed,
            sampler: SamplerConfig::default(),
            moas_restarts: default_restarts(),
            bgp_n_grad: default_n_grad(),
            bgp_subspace_draws: default_subspace_draws(),
            draws_per_sample: default_draws_per_sample(),
            max_posterior_draws: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.n_train < self.m + 2 {
            return Err(Error::invalid(format!("n_train = {} must be at least m + 2 = {}", self.n_train, self.m + 2)));
        }
        match self.method {
            Method::Bas | Method::Bgp => self.sampler.validate()?,
            Method::Moas if self.moas_restarts == 0 => return Err(Error::invalid("moas_restarts must be at least 1")),
            Method::Moas => {}
        }
        if self.method == Method::Bgp && (self.bgp_n_grad == 0 || self.bgp_subspace_draws == 0) {
            return Err(Error::invalid("bgp_n_grad and bgp_subspace_draws must be at least 1"));
        }
        if self.draws_per_sample == 0 {
            return Err(Error::invalid("draws_per_sample must be at least 1"));
        }
        if let DatasetSource::Generated { d, m, n, .. } = &self.dataset {
            if *m == 0 || m > d || *n <= self.n_train {
                return Err(Error::invalid("generated dataset needs 1 <= m <= d and more rows than n_train"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    fn predict_options(&self) -> PredictOptions {
        PredictOptions {
            draws_per_sample: self.draws_per_sample,
            seed: self.seed,
            max_posterior_draws: self.max_posterior_draws,
        }
    }
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_string(&v)).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn of<T: Serialize>(config: &T) -> Self {
        Self {
            version: VERSION.to_string(),
            config_hash: config_hash(config),
        }
    }

    /// `# bas <version> config=<hash>`
    pub fn comment(&self) -> String {
        format!("# bas {} config={}", self.version, self.config_hash)
    }
}

/// Trained model plus the data needed to predict with it. For BAS and B-GP
/// the top-level `meta`, `standardization` and `chains` fields form a
/// posterior document, so the file loads directly as posterior samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub method: Method,
    pub provenance: Provenance,
    pub config: RunConfig,
    pub n_train: usize,
    pub split_seed: u64,
    pub training_seconds: f64,
    /// Training inputs and responses in original units.
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub standardization: Standardization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PosteriorMeta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chains: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moas: Option<MoasModel>,
}

impl ModelFile {
    pub fn d(&self) -> usize {
        self.standardization.d()
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn x_train(&self) -> DMatrix<f64> {
        from_rows(&self.x_train, self.d())
    }

    fn require_meta(&self) -> Result<PosteriorMeta> {
        self.meta
            .clone()
            .ok_or_else(|| Error::invalid(format!("{} model file has no posterior metadata", self.method)))
    }

    pub fn bas_posterior(&self) -> Result<PosteriorSamples> {
        if self.method != Method::Bas {
            return Err(Error::invalid(format!("model file holds a {} model, not bas", self.method)));
        }
        let p = PosteriorSamples {
            meta: self.require_meta()?,
            standardization: self.standardization.clone(),
            chains: self.chains.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn bgp_posterior(&self) -> Result<BgpPosterior> {
        if self.method != Method::Bgp {
            return Err(Error::invalid(format!("model file holds a {} model, not bgp", self.method)));
        }
        let p = BgpPosterior {
            meta: self.require_meta()?,
            standardization: self.standardization.clone(),
            chains: self.chains.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn moas_model(&self) -> Result<&MoasModel> {
        self.moas
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("model file holds a {} model, not moas", self.method)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.x_train.len() != f.y_train.len() || f.x_train.iter().any(|r| r.len() != f.d()) {
            return Err(Error::invalid("model file training data is inconsistent"));
        }
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Predictive summary at raw inputs, in original units. MO-AS yields a
    /// single Gaussian whose median and mean coincide.
    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<MarginalPrediction> {
        if x_star.ncols() != self.d() {
            return Err(Error::data(format!("inputs have {} columns, model expects {}", x_star.ncols(), self.d())));
        }
        let s = &self.standardization;
        let xs = s.transform_x(x_star)?;
        let xt = s.transform_x(&self.x_train())?;
        let yt = s.transform_y(&self.y_train);
        let opts = self.config.predict_options();
        let pred = match self.method {
            Method::Bas => predict_marginal(&self.bas_posterior()?, &xs, &xt, &yt, &opts)?,
            Method::Bgp => bgp_predict(&self.bgp_posterior()?, &xs, &xt, &yt, &opts)?,
            Method::Moas => {
                let model = self.moas_model()?;
                let p = model.posterior(&xt, &yt)?.predict(&(&xs * model.w.matrix()))?;
                let std = p.std();
                let mixture = crate::metrics::GaussianMixturePredictive {
                    means: vec![p.mean.clone()],
                    stds: vec![std.clone()],
                };
                let z = 1.6448536269514722;
                MarginalPrediction {
                    q05: p.mean.iter().zip(&std).map(|(m, s)| m - z * s).collect(),
                    q95: p.mean.iter().zip(&std).map(|(m, s)| m + z * s).collect(),
                    median: p.mean.clone(),
                    mean: p.mean,
                    std,
                    pool_size: 1,
                    mixture,
                }
            }
        };
        Ok(pred.destandardize(s))
    }

    /// Projection matrices representing the learned subspace, in
    /// standardized input coordinates.
    pub fn subspaces(&self) -> Result<Vec<ProjectionMatrix>> {
        match self.method {
            Method::Bas => self.bas_posterior()?.projections(),
            Method::Moas => Ok(vec![self.moas_model()?.w.clone()]),
            Method::Bgp => {
                let s = &self.standardization;
                let xt = s.transform_x(&self.x_train())?;
                let yt = s.transform_y(&self.y_train);
                let opts = SubspaceOptions {
                    n_grad: self.config.bgp_n_grad,
                    max_draws: self.config.bgp_subspace_draws,
                    seed: self.config.seed,
                };
                Ok(bgp_estimate_subspace(&self.bgp_posterior()?, &xt, &yt, self.m(), &opts)?
                    .into_iter()
                    .map(|s| s.w)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelFile,
    pub diagnostics: Option<ChainDiagnostics>,
}

/// Loads the data, splits it and trains the configured method.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    if cfg.m > ds.d() {
        return Err(Error::invalid(format!("m = {} exceeds the input dimension {}", cfg.m, ds.d())));
    }
    train_on(cfg, &ds)
}

pub fn train_on(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutput> {
    let parts = split(ds, cfg.n_train, cfg.seed)?;
    let s = Standardization::fit(&parts.train)?;
    let x = s.transform_x(&parts.train.x)?;
    let y = s.transform_y(&parts.train.y);
    let mut model = ModelFile {
        method: cfg.method,
        provenance: Provenance::of(cfg),
        config: cfg.clone(),
        n_train: cfg.n_train,
        split_seed: cfg.seed,
        training_seconds: 0.0,
        x_train: to_rows(&parts.train.x),
        y_train: parts.train.y.clone(),
        standardization: s.clone(),
        meta: None,
        chains: Vec::new(),
        moas: None,
    };
    let (result, secs) = time_training(|| -> Result<Option<ChainDiagnostics>> {
        match cfg.method {
            Method::Bas => {
                let (post, diag) = sample_posterior(&x, &y, cfg.m, s.clone(), &cfg.sampler_config())?;
                model.meta = Some(post.meta);
                model.chains = post.chains;
                Ok(Some(diag))
            }
            Method::Bgp => {
                let (post, diag) = bgp_train(&x, &y, s.clone(), &cfg.sampler_config())?;
                model.meta = Some(post.meta);
                model.chains = post.chains;
                Ok(Some(diag))
            }
            Method::Moas => {
                let mc = MoasConfig {
                    restarts: cfg.moas_restarts,
                    seed: cfg.seed,
                    ..Default::default()
                };
                model.moas = Some(moas_train(&x, &y, cfg.m, &mc)?);
                Ok(None)
            }
        }
    });
    let diagnostics = result?;
    model.training_seconds = secs;
    Ok(TrainOutput { model, diagnostics })
}

/// Scores a trained model on the rows of `ds` that were not used for
/// training. MFSA is reported when `ds` carries gradients; the reference
/// subspace is estimated from all of them.
pub fn evaluate(model: &ModelFile, ds: &Dataset) -> Result<MetricsReport> {
    if ds.d() != model.d() {
        return Err(Error::data(format!("dataset has d = {}, model has d = {}", ds.d(), model.d())));
    }
    let parts = split(ds, model.n_train, model.split_seed)?;
    let val = &parts.validation;
    let pred = model.predict(&val.x)?;
    let r2 = r_squared(&val.y, &pred.median)?;
    let gamma = model.method.mlppd_gamma(model.d(), model.m());
    let lppd = match model.method {
        Method::Moas => mlppd(&val.y, &GaussianPredictive { mean: pred.mean.clone(), std: pred.std.clone() }, gamma)?,
        _ => mlppd(&val.y, &pred.mixture as &dyn PointwisePredictive, gamma)?,
    };
    let mfsa_rad = match &ds.gradients {
        Some(g) => {
            let g_std = model.standardization.transform_gradients(g)?;
            let (_, reference) = reference_subspace_from_gradients(&g_std, model.m())?;
            Some(mfsa(&model.subspaces()?, &reference)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        method: model.method.name().to_string(),
        dataset: ds.name.clone(),
        d: model.d(),
        m: model.m(),
        n_train: model.n_train,
        seed: model.split_seed,
        r_squared: r2,
        mlppd: lppd,
        mfsa_rad,
        training_seconds: model.training_seconds,
        status: "ok".to_string(),
    })
}

/// Trains and evaluates one cell. Failures become a row with a `failed`
/// status rather than an error.
pub fn run_cell(cfg: &RunConfig) -> MetricsReport {
    let outcome = cfg.validate().and_then(|_| cfg.dataset.load()).and_then(|ds| {
        let out = train_on(cfg, &ds)?;
        evaluate(&out.model, &ds)
    });
    outcome.unwrap_or_else(|e| failed_report(cfg, &e))
}

pub fn failed_report(cfg: &RunConfig, e: &Error) -> MetricsReport {
    let d = match &cfg.dataset {
        DatasetSource::Generated { d, .. } => *d,
        DatasetSource::File { .. } => 0,
    };
    MetricsReport {
        method: cfg.method.name().to_string(),
        dataset: cfg.dataset.name(),
        d,
        m: cfg.m,
        n_train: cfg.n_train,
        seed: cfg.seed,
        r_squared: f64::NAN,
        mlppd: f64::NAN,
        mfsa_rad: None,
        training_seconds: 0.0,
        status: format!("failed: {e}").replace(['\n', '\r'], " "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method) -> RunConfig {
        let mut cfg = RunConfig::new(
            method,
            DatasetSource::Generated {
                d: 3,
                m: 1,
                n: 60,
                seed: 1,
                noise_std: 0.05,
            },
            1,
            15,
            2,
        );
        cfg.sampler = SamplerConfig {
            chains: 2,
            draws: 40,
            warmup: 40,
            ..Default::default()
        };
        cfg.moas_restarts = 4;
        cfg.bgp_n_grad = 50;
        cfg.bgp_subspace_draws = 10;
        cfg
    }

    #[test]
    fn every_method_trains_and_evaluates() {
        for method in [Method::Bas, Method::Moas, Method::Bgp] {
            let cfg = tiny(method);
            let r = run_cell(&cfg);
            assert_eq!(r.status, "ok", "{method}: {}", r.status);
            assert!(r.r_squared.is_finite() && r.mlppd.is_finite());
            assert!(r.mfsa_rad.is_some());
            assert_eq!((r.d, r.m, r.n_train), (3, 1, 15));
            let again = run_cell(&cfg);
            assert_eq!(r.deterministic_fields(), again.deterministic_fields());
        }
    }

    #[test]
    fn model_file_round_trip_and_posterior_view() {
        let out = train(&tiny(Method::Bas)).unwrap();
        let json = out.model.to_json().unwrap();
        let back = ModelFile::from_json(&json).unwrap();
        assert_eq!(back, out.model);
        let post = PosteriorSamples::from_json(&json).unwrap();
        assert_eq!(post, out.model.bas_posterior().unwrap());
        assert!(back.moas_model().is_err());
        assert_eq!(back.provenance.config_hash, tiny(Method::Bas).hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(Method::Bas);
        cfg.n_train = 2;
        assert!(matches!(train(&cfg), Err(Error::InvalidArgument(_))));
        let mut cfg = tiny(Method::Moas);
        cfg.moas_restarts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(Method::Bas);
        cfg.m = 4;
        assert!(train(&cfg).is_err());
        let r = run_cell(&cfg);
        assert!(r.status.starts_with("failed"));
        assert!(r.r_squared.is_nan());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = tiny(Method::Bas);
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.seed = 3;
        assert_ne!(a.hash(), b.hash());
        let json = serde_json::to_string(&a).unwrap();
        let parsed: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.hash(), a.hash());
    }

    #[test]
    fn method_names_and_gamma() {
        assert_eq!("MO-AS".parse::<Method>().unwrap(), Method::Moas);
        assert!("gp".parse::<Method>().is_err());
        assert_eq!(Method::Bgp.mlppd_gamma(10, 2), 10);
        assert_eq!(Method::Bas.mlppd_gamma(10, 2), 2);
    }

    #[test]
    fn evaluate_rejects_dimension_mismatch() {
        let out = train(&tiny(Method::Moas)).unwrap();
        let other = DatasetSource::Generated {
            d: 4,
            m: 1,
            n: 30,
            seed: 0,
            noise_std: 0.0,
        }
        .load()
        .unwrap();
        assert!(matches!(evaluate(&out.model, &other), Err(Error::Data(_))));
    }
}
