//! The `bas` command-line tool.
//!
//! Exit codes: 0 on success, 1 for runtime and numerical failures, 2 for
//! usage and configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{write_dataset, QuadraticSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    evaluate, run_cell, train, DatasetSource, Method, ModelFile, Provenance, RunConfig,
};
use crate::metrics::MetricsReport;
use crate::model::{hyperparameter_order, parameter_names, quantile_sorted};
use crate::sampler::{parameter_chains, split_rhat, ChainDiagnostics, SamplerConfig};
use crate::walkthrough::{run_walkthrough, WalkthroughManifest};

#[derive(Debug, Parser)]
#[command(name = "bas", version, about = "Bayesian active-subspace GP surrogates and baselines")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a random quadratic ridge-function dataset
    Generate(GenerateArgs),
    /// Train one method on one dataset
    Train(TrainArgs),
    /// Predict at new inputs with a trained model
    Predict(PredictArgs),
    /// Score a trained model on its validation rows
    Evaluate(EvaluateArgs),
    /// Run a grid of train/evaluate cells
    Sweep(SweepArgs),
    /// Convergence table for a trained posterior
    Diagnostics(DiagnosticsArgs),
    /// Produce the walk-through artifacts described by a manifest
    Walkthrough(WalkthroughArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = crate::data::DEFAULT_NOISE_STD)]
    noise_std: f64,
    /// Regenerate from a spec file written by an earlier run
    #[arg(long, conflicts_with_all = ["d", "m"])]
    from_spec: Option<PathBuf>,
    /// Dataset CSV to write
    #[arg(long)]
    out: PathBuf,
    /// Spec JSON to write (defaults to the CSV path with a .spec.json suffix)
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct RunOverrides {
    /// JSON run configuration; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// Dataset CSV (x0..,y[,g0..])
    #[arg(long, conflicts_with = "generate")]
    data: Option<PathBuf>,
    /// The dataset CSV has gradient columns
    #[arg(long)]
    gradients: bool,
    /// Generated dataset, e.g. `d=10,m=1,n=1000,seed=0,noise=0.05`
    #[arg(long)]
    generate: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_tree_depth: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    n_grad: Option<usize>,
    #[arg(long)]
    subspace_draws: Option<usize>,
    #[arg(long)]
    draws_per_sample: Option<usize>,
    #[arg(long)]
    max_posterior_draws: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with columns x0..x{d-1}; other columns are ignored
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV; defaults to the dataset recorded in the model file
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    gradients: bool,
    /// Results CSV; rows are appended
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnosticsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct WalkthroughArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Json(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: msg.into(),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnostics(a) => cmd_diagnostics(a),
        Command::Walkthrough(a) => cmd_walkthrough(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> std::result::Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Generator spec together with the row count, enough to regenerate the
/// CSV exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFile {
    pub provenance: Provenance,
    pub n: usize,
    #[serde(flatten)]
    pub spec: QuadraticSpec,
}

fn cmd_generate(a: GenerateArgs) -> std::result::Result<(), CliError> {
    let (spec, n) = match &a.from_spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let f: GeneratorFile = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            (f.spec, f.n)
        }
        None => {
            let (d, m) = match (a.d, a.m) {
                (Some(d), Some(m)) => (d, m),
                _ => return Err(usage("generate needs --d and --m, or --from-spec")),
            };
            (QuadraticSpec::random(d, m, a.noise_std, a.seed)?, a.n)
        }
    };
    let ds = spec.sample(n)?;
    let record = json!({"d": spec.d, "m": spec.m, "n": n, "seed": spec.seed, "noise_std": spec.noise_std});
    let provenance = Provenance::of(&record);
    write_dataset(&a.out, &ds, Some(provenance.comment().trim_start_matches("# ")))?;
    let spec_path = a.spec_out.unwrap_or_else(|| a.out.with_extension("spec.json"));
    let file = GeneratorFile { provenance, n, spec };
    write_text(&spec_path, &serde_json::to_string_pretty(&file).map_err(Error::from)?)?;
    Ok(())
}

fn parse_generate(spec: &str) -> std::result::Result<Value, CliError> {
    let mut obj = Map::new();
    obj.insert("kind".into(), json!("generated"));
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("--generate entry '{part}' is not key=value")))?;
        let key = match k.trim() {
            "noise" | "noise_std" => "noise_std",
            "d" | "m" | "n" | "seed" => k.trim(),
            other => return Err(usage(format!("unknown --generate key '{other}'"))),
        };
        let num: f64 = v.trim().parse().map_err(|_| usage(format!("--generate value '{v}' is not a number")))?;
        let val = if key == "noise_std" { json!(num) } else { json!(num as u64) };
        obj.insert(key.into(), val);
    }
    Ok(Value::Object(obj))
}

fn build_run_config(o: &RunOverrides) -> std::result::Result<RunConfig, CliError> {
    let mut root = match &o.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let obj = root
        .as_object_mut()
        .ok_or_else(|| usage("run configuration must be a JSON object"))?;
    if let Some(m) = &o.method {
        let method: Method = m.parse().map_err(|e: Error| usage(e.to_string()))?;
        obj.insert("method".into(), json!(method));
    }
    if let Some(p) = &o.data {
        obj.insert("dataset".into(), json!({"kind": "file", "path": p, "has_gradients": o.gradients}));
    }
    if let Some(g) = &o.generate {
        obj.insert("dataset".into(), parse_generate(g)?);
    }
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            obj.insert(k.into(), v);
        }
    };
    put("m", o.m.map(|v| json!(v)));
    put("n_train", o.n_train.map(|v| json!(v)));
    put("seed", o.seed.map(|v| json!(v)));
    put("moas_restarts", o.restarts.map(|v| json!(v)));
    put("bgp_n_grad", o.n_grad.map(|v| json!(v)));
    put("bgp_subspace_draws", o.subspace_draws.map(|v| json!(v)));
    put("draws_per_sample", o.draws_per_sample.map(|v| json!(v)));
    put("max_posterior_draws", o.max_posterior_draws.map(|v| json!(v)));
    let sampler = obj.entry("sampler").or_insert_with(|| json!({}));
    let s = sampler
        .as_object_mut()
        .ok_or_else(|| usage("'sampler' must be a JSON object"))?;
    for (k, v) in [
        ("chains", o.chains.map(|v| json!(v))),
        ("draws", o.draws.map(|v| json!(v))),
        ("warmup", o.warmup.map(|v| json!(v))),
        ("target_accept", o.target_accept.map(|v| json!(v))),
        ("max_tree_depth", o.max_tree_depth.map(|v| json!(v))),
    ] {
        if let Some(v) = v {
            s.insert(k.into(), v);
        }
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| usage(format!("run configuration: {e}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Convergence summary written next to every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub provenance: Provenance,
    pub method: Method,
    pub training_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<ChainDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub parameters: Vec<ParameterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moas: Option<MoasSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub split_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoasSummary {
    pub restarts_used: usize,
    pub failed_restarts: usize,
    pub best_loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub hit_max_iterations: bool,
}

/// Flat-vector names for the posterior held by `model`.
pub fn model_parameter_names(model: &ModelFile) -> Vec<String> {
    match model.method {
        Method::Bas => parameter_names(model.d(), model.m()),
        Method::Bgp => hyperparameter_order(model.d()),
        Method::Moas => Vec::new(),
    }
}

pub fn summarize_parameters(names: &[String], chains: &[Vec<Vec<f64>>]) -> Vec<ParameterSummary> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let per_chain = parameter_chains(chains, j);
            let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = if all.len() > 1 {
                all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ParameterSummary {
                name: name.clone(),
                mean,
                sd: var.sqrt(),
                split_rhat: split_rhat(&per_chain).ok(),
            }
        })
        .collect()
}

pub fn write_rhat_table(path: &Path, provenance: &Provenance, params: &[ParameterSummary]) -> Result<()> {
    let mut out = format!("{}\nparameter,split_rhat,mean,sd\n", provenance.comment());
    for p in params {
        let r = p.split_rhat.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", p.name, r, p.mean, p.sd));
    }
    write_text(path, &out)
}

fn diagnostics_for(model: &ModelFile, sampler: Option<ChainDiagnostics>) -> DiagnosticsFile {
    let parameters = summarize_parameters(&model_parameter_names(model), &model.chains);
    let moas = model.moas.as_ref().map(|m| MoasSummary {
        restarts_used: m.restarts_used,
        failed_restarts: m.failed_restarts,
        best_loglik: m.best_loglik,
        grad_norm: m.grad_norm,
        iterations: m.iterations,
        hit_max_iterations: m.hit_max_iterations,
    });
    DiagnosticsFile {
        provenance: model.provenance.clone(),
        method: model.method,
        training_seconds: model.training_seconds,
        sampler,
        parameters,
        moas,
    }
}

fn write_diagnostics(dir: &Path, diag: &DiagnosticsFile) -> Result<()> {
    write_text(&dir.join("diagnostics.json"), &serde_json::to_string_pretty(diag)?)?;
    if !diag.parameters.is_empty() {
        write_rhat_table(&dir.join("rhat.csv"), &diag.provenance, &diag.parameters)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> std::result::Result<(), CliError> {
    let cfg = build_run_config(&a.run)?;
    create_dir(&a.out_dir)?;
    let out = train(&cfg)?;
    out.model.save(a.out_dir.join("model.json"))?;
    write_diagnostics(&a.out_dir, &diagnostics_for(&out.model, out.diagnostics))?;
    Ok(())
}

/// Reads columns `x0..x{d-1}` from a CSV; other columns are ignored.
pub fn read_inputs(path: &Path, d: usize) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::data(format!("{}: {e}", path.display())))?.clone();
    let cols: Vec<usize> = (0..d)
        .map(|j| {
            let want = format!("x{j}");
            header
                .iter()
                .position(|h| h == want)
                .ok_or_else(|| Error::data(format!("{}: missing column {want}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let row = cols
            .iter()
            .map(|&c| {
                let field = rec.get(c).unwrap_or("");
                field
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("{}: row {}, column {}: '{field}' is not a number", path.display(), i + 1, &header[c])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no input rows", path.display())));
    }
    Ok(crate::linalg::from_rows(&rows, d))
}

fn cmd_predict(a: PredictArgs) -> std::result::Result<(), CliError> {
    let model = ModelFile::load(&a.model)?;
    let x = read_inputs(&a.input, model.d())?;
    let pred = model.predict(&x)?;
    let mut out = format!("{}\nrow,median,mean,std,q05,q95\n", model.provenance.comment());
    for i in 0..x.nrows() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            pred.median[i], pred.mean[i], pred.std[i], pred.q05[i], pred.q95[i]
        ));
    }
    write_text(&a.out, &out)?;
    Ok(())
}

fn results_header() -> String {
    MetricsReport::CSV_COLUMNS.join(",")
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Appends one row, writing the provenance comment and header first if the
/// file does not exist yet.
pub fn append_result(path: &Path, provenance: &Provenance, row: &MetricsReport) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&provenance.comment());
        text.push('\n');
        text.push_str(&results_header());
        text.push('\n');
    }
    text.push_str(&csv_line(&row.csv_fields()));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_results(path: &Path, provenance: &Provenance, rows: &[MetricsReport]) -> Result<()> {
    let mut text = format!("{}\n{}\n", provenance.comment(), results_header());
    for r in rows {
        text.push_str(&csv_line(&r.csv_fields()));
    }
    write_text(path, &text)
}

/// Parses the results CSV written by this tool.
pub fn read_results(path: &Path) -> Result<Vec<MetricsReport>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let bad = |what: &str| Error::data(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let fields: Vec<String> = rec.iter().map(String::from).collect();
        rows.push(report_from_fields(&fields).ok_or_else(|| bad("row"))?);
    }
    Ok(rows)
}

fn report_from_fields(f: &[String]) -> Option<MetricsReport> {
    if f.len() != MetricsReport::CSV_COLUMNS.len() {
        return None;
    }
    Some(MetricsReport {
        method: f[0].clone(),
        dataset: f[1].clone(),
        d: f[2].parse().ok()?,
        m: f[3].parse().ok()?,
        n_train: f[4].parse().ok()?,
        seed: f[5].parse().ok()?,
        r_squared: f[6].parse().ok()?,
        mlppd: f[7].parse().ok()?,
        mfsa_rad: if f[8].is_empty() { None } else { Some(f[8].parse().ok()?) },
        training_seconds: f[9].parse().ok()?,
        status: f[10].clone(),
    })
}

fn cmd_evaluate(a: EvaluateArgs) -> std::result::Result<(), CliError> {
    let model = ModelFile::load(&a.model)?;
    let source = match &a.data {
        Some(p) => DatasetSource::File {
            path: p.clone(),
            has_gradients: a.gradients,
        },
        None => model.config.dataset.clone(),
    };
    let ds = source.load()?;
    let report = evaluate(&model, &ds)?;
    append_result(&a.out, &model.provenance, &report)?;
    Ok(())
}

/// Grid of cells: datasets × m × n_train × methods × seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub datasets: Vec<DatasetSource>,
    pub m: Vec<usize>,
    /// Absolute training sizes.
    #[serde(default)]
    pub n_train: Vec<usize>,
    /// Training sizes as multiples of the input dimension.
    #[serde(default)]
    pub n_train_multiples: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "crate::experiment::default_restarts")]
    pub moas_restarts: usize,
    #[serde(default = "crate::experiment::default_n_grad")]
    pub bgp_n_grad: usize,
    #[serde(default = "crate::experiment::default_subspace_draws")]
    pub bgp_subspace_draws: usize,
    #[serde(default = "crate::experiment::default_draws_per_sample")]
    pub draws_per_sample: usize,
    #[serde(default)]
    pub max_posterior_draws: Option<usize>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("sweep needs at least one method"));
        }
        if self.datasets.is_empty() || self.m.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one dataset, m value and seed"));
        }
        if self.n_train.is_empty() && self.n_train_multiples.is_empty() {
            return Err(Error::invalid("sweep needs n_train or n_train_multiples"));
        }
        Ok(())
    }

    fn dataset_dim(ds: &DatasetSource) -> Result<usize> {
        match ds {
            DatasetSource::Generated { d, .. } => Ok(*d),
            DatasetSource::File { .. } => Ok(ds.load()?.d()),
        }
    }

    /// Every cell in a stable order.
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        self.validate()?;
        let mut cells = Vec::new();
        for dataset in &self.datasets {
            let d = Self::dataset_dim(dataset)?;
            let mut sizes = self.n_train.clone();
            sizes.extend(self.n_train_multiples.iter().map(|k| k * d));
            for &m in &self.m {
                for &n_train in &sizes {
                    for &method in &self.methods {
                        for &seed in &self.seeds {
                            let mut cfg = RunConfig::new(method, dataset.clone(), m, n_train, seed);
                            cfg.sampler = self.sampler.clone();
                            cfg.moas_restarts = self.moas_restarts;
                            cfg.bgp_n_grad = self.bgp_n_grad;
                            cfg.bgp_subspace_draws = self.bgp_subspace_draws;
                            cfg.draws_per_sample = self.draws_per_sample;
                            cfg.max_posterior_draws = self.max_posterior_draws;
                            cells.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Stored result of one sweep cell, keyed by the cell config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub hash: String,
    pub config: RunConfig,
    /// Results-CSV fields of the cell's row.
    pub row: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsReport>,
    pub executed: usize,
    pub reused: usize,
}

fn load_cell(path: &Path, hash: &str) -> Option<MetricsReport> {
    let text = fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    if rec.hash != hash {
        return None;
    }
    report_from_fields(&rec.row)
}

/// Runs every cell not already stored under `out_dir/cells/`, then rewrites
/// `results.csv` and `summary.csv` from all cells.
pub fn run_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<SweepOutcome> {
    let cells = cfg.cells()?;
    let cell_dir = out_dir.join("cells");
    create_dir(&cell_dir)?;
    let mut rows = Vec::with_capacity(cells.len());
    let (mut executed, mut reused) = (0, 0);
    for cell in &cells {
        let hash = cell.hash();
        let path = cell_dir.join(format!("{hash}.json"));
        if let Some(row) = load_cell(&path, &hash) {
            reused += 1;
            rows.push(row);
            continue;
        }
        let row = run_cell(cell);
        executed += 1;
        let rec = CellRecord {
            hash: hash.clone(),
            config: cell.clone(),
            row: row.csv_fields(),
        };
        let tmp = cell_dir.join(format!("{hash}.json.tmp"));
        write_text(&tmp, &serde_json::to_string(&rec)?)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        rows.push(row);
    }
    let provenance = Provenance::of(cfg);
    write_results(&out_dir.join("results.csv"), &provenance, &rows)?;
    write_summary(&out_dir.join("summary.csv"), &provenance, &rows)?;
    Ok(SweepOutcome { rows, executed, reused })
}

fn quartiles(mut v: Vec<f64>) -> [String; 3] {
    if v.is_empty() {
        return Default::default();
    }
    v.sort_by(f64::total_cmp);
    [0.5, 0.25, 0.75].map(|p| quantile_sorted(&v, p).to_string())
}

/// Median and quartiles across seeds of each metric, per (method, dataset,
/// d, m, n_train); failed cells are counted but not aggregated.
pub fn write_summary(path: &Path, provenance: &Provenance, rows: &[MetricsReport]) -> Result<()> {
    type Key = (String, String, usize, usize, usize);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&MetricsReport>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.dataset.clone(), r.d, r.m, r.n_train);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut text = format!(
        "{}\nmethod,dataset,d,m,n_train,cells,ok,r_squared_median,r_squared_q25,r_squared_q75,mlppd_median,mlppd_q25,mlppd_q75,mfsa_rad_median,mfsa_rad_q25,mfsa_rad_q75,training_seconds_median\n",
        provenance.comment()
    );
    for key in order {
        let g = &groups[&key];
        let ok: Vec<&&MetricsReport> = g.iter().filter(|r| r.status == "ok").collect();
        let r2 = quartiles(ok.iter().map(|r| r.r_squared).collect());
        let ll = quartiles(ok.iter().map(|r| r.mlppd).collect());
        let fa = quartiles(ok.iter().filter_map(|r| r.mfsa_rad).collect());
        let ts = quartiles(ok.iter().map(|r| r.training_seconds).collect());
        let mut fields = vec![
            key.0,
            key.1,
            key.2.to_string(),
            key.3.to_string(),
            key.4.to_string(),
            g.len().to_string(),
            ok.len().to_string(),
        ];
        fields.extend(r2);
        fields.extend(ll);
        fields.extend(fa);
        fields.push(ts[0].clone());
        text.push_str(&csv_line(&fields));
    }
    write_text(path, &text)
}

fn cmd_sweep(a: SweepArgs) -> std::result::Result<(), CliError> {
    let value = read_json(&a.config)?;
    let cfg: SweepConfig = serde_json::from_value(value).map_err(|e| usage(format!("sweep configuration: {e}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(&a.out_dir)?;
    let out = run_sweep(&cfg, &a.out_dir)?;
    let failed = out.rows.iter().filter(|r| r.status != "ok").count();
    eprintln!(
        "sweep: {} cells ({} run, {} reused, {} failed)",
        out.rows.len(),
        out.executed,
        out.reused,
        failed
    );
    Ok(())
}

fn cmd_diagnostics(a: DiagnosticsArgs) -> std::result::Result<(), CliError> {
    let model = ModelFile::load(&a.model)?;
    create_dir(&a.out_dir)?;
    write_diagnostics(&a.out_dir, &diagnostics_for(&model, None))?;
    Ok(())
}

fn cmd_walkthrough(a: WalkthroughArgs) -> std::result::Result<(), CliError> {
    let value = read_json(&a.manifest)?;
    let manifest: WalkthroughManifest =
        serde_json::from_value(value).map_err(|e| usage(format!("walkthrough manifest: {e}")))?;
    manifest.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_walkthrough(&manifest, &a.out_dir)?;
    let failed = report.cells.iter().filter(|c| c.status != "ok").count();
    eprintln!("walkthrough: {} cells, {failed} failed", report.cells.len());
    if failed == report.cells.len() {
        return Err(CliError {
            code: 1,
            message: "every walkthrough cell failed".into(),
        });
    }
    Ok(())
}
