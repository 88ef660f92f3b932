//! File formats and commands behind the `iterlace` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use iterlace_core::calibration::{histogram, sbc_run, FitSampler, SbcResult};
use iterlace_core::diagnostics::{kl_divergences, linearisation_deviation};
use iterlace_core::expr::parse_expr;
use iterlace_core::inference::{fit, generate, predict_summary, FitResult, IterationRecord, LatentSummary};
use iterlace_core::model::{DataTable, Model, ModelSpec};
use iterlace_core::{Error, Result};
use serde::{Deserialize, Serialize};

const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Everything needed to rebuild a fit for prediction and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub model: ModelSpec,
    /// Directory that data and graph paths in `model` are relative to.
    pub base_dir: PathBuf,
    pub theta_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    pub grid: Vec<GridPoint>,
    /// Final linearisation point.
    pub u0: Vec<f64>,
    pub latent: BTreeMap<String, ComponentSummary>,
    pub hyper: BTreeMap<String, LatentSummary>,
    pub convergence: Vec<IterationRecord>,
    pub converged: bool,
    pub log: Vec<String>,
}

impl FitFile {
    pub fn from_fit(f: &FitResult) -> FitFile {
        let latent = f
            .model
            .components
            .iter()
            .map(|c| {
                let s = &f.latent_summary[c.range()];
                (c.spec.name.clone(), ComponentSummary { mean: s.iter().map(|x| x.mean).collect(), sd: s.iter().map(|x| x.sd).collect() })
            })
            .collect();
        FitFile {
            model: f.model.spec.clone(),
            base_dir: f.model.base_dir.clone(),
            theta_names: f.theta_names.clone(),
            theta_mode: f.theta_mode.clone(),
            grid: f.grid.iter().map(|p| GridPoint { theta: p.theta.clone(), log_post: p.log_post, weight: p.weight }).collect(),
            u0: f.linearisation.u0.clone(),
            latent,
            hyper: f.hyper_summary().into_iter().collect(),
            convergence: f.convergence.clone(),
            converged: f.converged,
            log: f.log.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<FitFile> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn restore(&self) -> Result<FitResult> {
        let model = Model::compile(self.model.clone(), &self.base_dir)?;
        let grid: Vec<(Vec<f64>, f64)> = self.grid.iter().map(|p| (p.theta.clone(), p.weight)).collect();
        let mut f = FitResult::restore(model, &self.u0, &grid, self.convergence.clone(), self.converged)?;
        f.log = self.log.clone();
        Ok(f)
    }
}

/// Reads and compiles a model, resolving file references against the
/// config's directory.
pub fn load_model(path: &Path) -> Result<Model> {
    let spec = ModelSpec::from_json_str(&fs::read_to_string(path)?)?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Model::compile(spec, &fs::canonicalize(parent)?)
}

/// Machine-readable error report.
pub fn error_json(e: &Error) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("error".into(), e.kind().into());
    obj.insert("message".into(), e.to_string().into());
    if let Error::Schema { pointer, .. } = e {
        obj.insert("pointer".into(), pointer.clone().into());
    }
    serde_json::Value::Object(obj).to_string()
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn convergence_csv(f: &FitResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["iter", "alpha", "step_rescaling_pct", "max_dev_over_sd", "mean_dev_over_sd"].map(String::from).to_vec();
    header.extend(f.theta_names.iter().cloned());
    w.write_record(&header)?;
    for r in &f.convergence {
        let mut row = vec![r.iter.to_string(), num(r.alpha), num(100.0 * r.alpha), num(r.max_dev_over_sd), num(r.mean_dev_over_sd)];
        row.extend(r.theta.iter().map(|&t| num(t)));
        w.write_record(&row)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Fits the model at `model_path`, writing fit.json, convergence.csv and
/// fit.log into `out_dir`. On failure an error.json is written instead.
pub fn cmd_fit(model_path: &Path, out_dir: &Path) -> Result<FitFile> {
    fs::create_dir_all(out_dir)?;
    let run = || -> Result<FitFile> {
        let model = load_model(model_path)?;
        let f = fit(&model)?;
        if model.options().bru_verbose > 0 {
            for line in &f.log {
                eprintln!("{line}");
            }
        }
        let file = FitFile::from_fit(&f);
        fs::write(out_dir.join("fit.json"), file.to_json()?)?;
        fs::write(out_dir.join("convergence.csv"), convergence_csv(&f)?)?;
        fs::write(out_dir.join("fit.log"), f.log.join("\n") + "\n")?;
        Ok(file)
    };
    run().inspect_err(|e| {
        let _ = fs::write(out_dir.join("error.json"), error_json(e) + "\n");
    })
}

/// Posterior summaries of `expr` written as CSV with columns mean, sd,
/// q<p> per quantile and mode.
pub fn cmd_predict(fit_path: &Path, expr: &str, data: Option<&Path>, n_samples: usize, quantiles: &[f64], seed: Option<u64>, out: &Path) -> Result<()> {
    let file = FitFile::read(fit_path)?;
    let expr = parse_expr(expr)?;
    let f = file.restore()?;
    let table = data.map(DataTable::from_csv_path).transpose()?;
    let seed = seed.unwrap_or(f.model.options().seed);
    let samples = generate(&f, &expr, table.as_ref(), n_samples, seed)?;
    let summary = predict_summary(&samples, quantiles)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["mean".to_string(), "sd".to_string()];
    header.extend(quantiles.iter().map(|q| format!("q{q}")));
    header.push("mode".into());
    w.write_record(&header)?;
    for s in &summary {
        let mut row = vec![num(s.mean), num(s.sd)];
        row.extend(s.quantiles.iter().map(|&q| num(q)));
        row.push(num(s.mode));
        w.write_record(&row)?;
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, finish_csv(w)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SbcReport<'a> {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "J")]
    j: usize,
    failures: usize,
    ks_statistic: f64,
    ks_pvalue: f64,
    w_values: &'a [f64],
}

/// Simulation-based calibration of `functional` (by default the first
/// component at the first data row). Writes sbc.json, w_values.csv and
/// histogram.csv.
pub fn cmd_sbc(model_path: &Path, k: usize, j: usize, functional: Option<&str>, seed: Option<u64>, out_dir: &Path) -> Result<SbcResult> {
    let model = load_model(model_path)?;
    let h = parse_expr(functional.unwrap_or(&model.components[0].spec.name))?;
    let seed = seed.unwrap_or(model.options().seed);
    let r = sbc_run(&model, &h, k, j, None, seed, &FitSampler)?;
    fs::create_dir_all(out_dir)?;
    let report = SbcReport { k: r.k, j: r.j, failures: r.failures, ks_statistic: r.ks_statistic, ks_pvalue: r.ks_pvalue, w_values: &r.w_values };
    fs::write(out_dir.join("sbc.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["w", "rank"])?;
    for (v, m) in r.w_values.iter().zip(&r.ranks) {
        w.write_record([num(*v), m.to_string()])?;
    }
    fs::write(out_dir.join("w_values.csv"), finish_csv(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lower", "bin_upper", "count"])?;
    for (b, c) in histogram(&r.w_values, HISTOGRAM_BINS).iter().enumerate() {
        let lo = b as f64 / HISTOGRAM_BINS as f64;
        w.write_record([num(lo), num(lo + 1.0 / HISTOGRAM_BINS as f64), c.to_string()])?;
    }
    fs::write(out_dir.join("histogram.csv"), finish_csv(w)?)?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub linearisation_deviation: f64,
    pub kl_lin_to_nonlin: f64,
    pub kl_nonlin_to_lin: f64,
}

pub fn cmd_diagnose(fit_path: &Path, n_samples: usize, seed: Option<u64>, out: &Path) -> Result<Diagnosis> {
    let f = FitFile::read(fit_path)?.restore()?;
    let seed = seed.unwrap_or(f.model.options().seed);
    let kl = kl_divergences(&f)?;
    let d = Diagnosis {
        linearisation_deviation: linearisation_deviation(&f, n_samples, seed)?,
        kl_lin_to_nonlin: kl.kl_lin_to_nonlin,
        kl_nonlin_to_lin: kl.kl_nonlin_to_lin,
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string_pretty(&d)? + "\n")?;
    Ok(d)
}
