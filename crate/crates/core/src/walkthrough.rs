//! Scripted BAS walk-through: train a grid of (m, n_train) cells on one
//! dataset and dump per-cell chains, prior-vs-posterior histograms,
//! actual-vs-predicted tables and R̂ tables as CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::{summarize_parameters, write_rhat_table};
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{evaluate, train_on, DatasetSource, Method, ModelFile, Provenance, RunConfig};
use crate::metrics::MetricsReport;
use crate::model::parameter_names;
use crate::sampler::{ChainDiagnostics, SamplerConfig};

fn default_projection_columns() -> usize {
    5
}

fn default_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkthroughCell {
    pub m: usize,
    pub n_train: usize,
    /// Overrides the manifest-level sampler settings for this cell.
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkthroughManifest {
    pub dataset: DatasetSource,
    pub cells: Vec<WalkthroughCell>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Leading projection parameters written to the chain files.
    #[serde(default = "default_projection_columns")]
    pub projection_columns: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl WalkthroughManifest {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::invalid("walkthrough manifest needs at least one cell"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::invalid("histogram_bins must be at least 1"));
        }
        for c in &self.cells {
            self.run_config(c).validate()?;
        }
        Ok(())
    }

    fn run_config(&self, cell: &WalkthroughCell) -> RunConfig {
        let mut cfg = RunConfig::new(Method::Bas, self.dataset.clone(), cell.m, cell.n_train, self.seed);
        cfg.sampler = cell.sampler.clone().unwrap_or_else(|| self.sampler.clone());
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub m: usize,
    pub n_train: usize,
    pub dir: PathBuf,
    pub status: String,
    pub metrics: Option<MetricsReport>,
    pub diagnostics: Option<ChainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkthroughReport {
    pub provenance: Provenance,
    pub cells: Vec<CellOutcome>,
}

/// Directory name of a cell inside the output directory.
pub fn cell_dir_name(cell: &WalkthroughCell) -> String {
    format!("m{}_n{}", cell.m, cell.n_train)
}

/// Runs every cell; a failing cell is recorded and the rest continue.
pub fn run_walkthrough(manifest: &WalkthroughManifest, out_dir: &Path) -> Result<WalkthroughReport> {
    manifest.validate()?;
    let ds = manifest.dataset.load()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let provenance = Provenance::of(manifest);
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for cell in &manifest.cells {
        let dir = out_dir.join(cell_dir_name(cell));
        let outcome = match run_cell(manifest, cell, &ds, &dir) {
            Ok((metrics, diagnostics)) => CellOutcome {
                m: cell.m,
                n_train: cell.n_train,
                dir,
                status: "ok".into(),
                metrics: Some(metrics),
                diagnostics,
            },
            Err(e) => CellOutcome {
                m: cell.m,
                n_train: cell.n_train,
                dir,
                status: format!("failed: {e}"),
                metrics: None,
                diagnostics: None,
            },
        };
        cells.push(outcome);
    }
    let report = WalkthroughReport { provenance, cells };
    let path = out_dir.join("walkthrough.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_cell(
    manifest: &WalkthroughManifest,
    cell: &WalkthroughCell,
    ds: &Dataset,
    dir: &Path,
) -> Result<(MetricsReport, Option<ChainDiagnostics>)> {
    let cfg = manifest.run_config(cell);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = train_on(&cfg, ds)?;
    let model = &out.model;
    let header = format!(
        "{} dataset={} m={} n_train={} seed={}",
        model.provenance.comment(),
        ds.name,
        cell.m,
        cell.n_train,
        cfg.seed
    );
    model.save(dir.join("model.json"))?;

    let d = model.d();
    let names = parameter_names(d, cell.m);
    let k = names.len() - (cell.m + 2);
    let shown: Vec<usize> = (0..manifest.projection_columns.min(k)).chain(k..names.len()).collect();
    write_chains(dir, &header, &names, &shown, &model.chains)?;
    write_histograms(&dir.join("prior_vs_posterior.csv"), &header, &names, &shown, &model.chains, manifest.histogram_bins)?;

    let params = summarize_parameters(&names, &model.chains);
    write_rhat_table(&dir.join("rhat.csv"), &model.provenance, &params)?;

    let parts = split(ds, cell.n_train, cfg.seed)?;
    write_actual_vs_predicted(&dir.join("actual_vs_predicted_train.csv"), &header, model, &parts.train)?;
    write_actual_vs_predicted(&dir.join("actual_vs_predicted_validation.csv"), &header, model, &parts.validation)?;

    let metrics = evaluate(model, ds)?;
    let doc = serde_json::json!({
        "provenance": model.provenance,
        "metrics": metrics,
        "diagnostics": out.diagnostics,
    });
    write(&dir.join("metrics.json"), &serde_json::to_string_pretty(&doc)?)?;
    Ok((metrics, out.diagnostics))
}

fn write_chains(dir: &Path, header: &str, names: &[String], shown: &[usize], chains: &[Vec<Vec<f64>>]) -> Result<()> {
    for (c, chain) in chains.iter().enumerate() {
        let mut text = format!("{header} chain={c}\ndraw");
        for &j in shown {
            text.push(',');
            text.push_str(&names[j]);
        }
        text.push('\n');
        for (t, draw) in chain.iter().enumerate() {
            text.push_str(&t.to_string());
            for &j in shown {
                text.push(',');
                text.push_str(&draw[j].to_string());
            }
            text.push('\n');
        }
        write(&dir.join(format!("chains_chain{c}.csv")), &text)?;
    }
    Ok(())
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Density histogram of the pooled draws next to the standard-normal prior
/// density at each bin centre.
fn write_histograms(
    path: &Path,
    header: &str,
    names: &[String],
    shown: &[usize],
    chains: &[Vec<Vec<f64>>],
    bins: usize,
) -> Result<()> {
    let mut text = format!("{header}\nparameter,bin_low,bin_high,posterior_density,prior_density\n");
    for &j in shown {
        let draws: Vec<f64> = chains.iter().flatten().map(|d| d[j]).collect();
        let lo = draws.iter().copied().fold(-4.0, f64::min);
        let hi = draws.iter().copied().fold(4.0, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &draws {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = draws.len() as f64;
        for (b, &count) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            let z = a + width;
            let dens = count as f64 / (total * width);
            text.push_str(&format!("{},{a},{z},{dens},{}\n", names[j], std_normal_pdf(0.5 * (a + z))));
        }
    }
    write(path, &text)
}

fn write_actual_vs_predicted(path: &Path, header: &str, model: &ModelFile, part: &Dataset) -> Result<()> {
    let pred = model.predict(&part.x)?;
    let mut text = format!("{header}\nrow,actual,median,mean,std,q05,q95\n");
    for i in 0..part.n() {
        text.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            part.y[i], pred.median[i], pred.mean[i], pred.std[i], pred.q05[i], pred.q95[i]
        ));
    }
    write(path, &text)
}
