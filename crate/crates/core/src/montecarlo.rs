//! Repeated simulate-and-estimate runs with aggregated statistics.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ident_acov::{estimate_acov_method, AcovOptions};
use crate::ident_mdm::{estimate_mdm, MdmConfig};
use crate::model::{ClockParams, EnsembleModel, EnsembleParams, ThetaVector};
use crate::report::{EstimateReport, Method};
use crate::simulate::{derive_seed, remove_outliers, simulate_measurements};
use crate::stability::log_spaced_grid;

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub params: EnsembleParams,
    pub ts: f64,
    pub n_steps: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    /// Known pivot drift handed to both methods.
    pub d1: f64,
    pub acov: AcovOptions,
    pub mdm: MdmConfig,
    /// Outlier threshold applied to every simulated record; `None` disables the filter.
    pub outlier_k: Option<f64>,
    /// Worker threads; `0` uses the global pool.
    pub jobs: usize,
}

impl McConfig {
    pub fn new(params: EnsembleParams, ts: f64, n_steps: usize, runs: usize) -> Self {
        McConfig {
            params,
            ts,
            n_steps,
            runs,
            master_seed: 0,
            methods: vec![Method::Acov],
            d1: 0.0,
            acov: AcovOptions::default(),
            mdm: MdmConfig::default(),
            outlier_k: None,
            jobs: 0,
        }
    }
}

/// Estimates of one run, one entry per requested method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub estimates: Vec<std::result::Result<EstimateReport, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStat {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two runs.
    pub std: Option<f64>,
    /// `(mean - truth) / |truth|`; `None` when the truth is zero.
    pub rel_error: Option<f64>,
}

/// Analytic AVAR of one clock evaluated on a common averaging-time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvarCurve {
    /// 1-based clock index.
    pub clock: usize,
    pub taus: Vec<f64>,
    pub truth: Vec<f64>,
    /// AVAR of the MC-mean parameters.
    pub mean_estimate: Vec<f64>,
    pub p025: Vec<f64>,
    pub p975: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub parameters: Vec<ParamStat>,
    pub curves: Vec<AvarCurve>,
}

impl McSummary {
    pub fn param(&self, name: &str) -> Option<&ParamStat> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Everything a Monte-Carlo study produced.
#[derive(Debug, Clone, PartialEq)]
pub struct McStudy {
    pub outcomes: Vec<RunOutcome>,
    pub summaries: Vec<McSummary>,
}

fn run_once(config: &McConfig, model: &EnsembleModel, run: usize) -> Result<RunOutcome> {
    let seed = derive_seed(config.master_seed, run as u64);
    let mut record = simulate_measurements(model, config.n_steps, seed, None)?;
    if let Some(k) = config.outlier_k {
        record = remove_outliers(&record, k)?.0;
    }
    let acov = AcovOptions {
        d1: config.d1,
        ..config.acov.clone()
    };
    let estimates = config
        .methods
        .iter()
        .map(|m| {
            let est = match m {
                Method::Acov => estimate_acov_method(&record, &acov),
                Method::Mdm => estimate_mdm(&record, &config.mdm, config.d1),
            };
            est.map_err(|e| format!("run {run} (seed {seed}): {e}"))
        })
        .collect();
    log::info!("Monte-Carlo run {run} finished");
    Ok(RunOutcome { run, seed, estimates })
}

/// Runs the study; results are ordered by run index whatever the thread count.
pub fn run_monte_carlo(config: &McConfig) -> Result<McStudy> {
    if config.runs == 0 {
        return invalid("Monte-Carlo study needs at least one run");
    }
    if config.methods.is_empty() {
        return invalid("no estimation method selected");
    }
    let model = EnsembleModel::assemble(&config.params, config.ts)?;
    let work = || -> Result<Vec<RunOutcome>> {
        (0..config.runs)
            .into_par_iter()
            .map(|run| run_once(config, &model, run))
            .collect()
    };
    let outcomes = if config.jobs == 0 {
        work()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {} workers: {e}", config.jobs)))?
            .install(work)?
    };
    let m_max = config.acov.m_max.unwrap_or(config.n_steps / 2).max(1);
    let taus = log_spaced_grid(config.acov.ell.max(2), m_max, config.ts)?.taus();
    let summaries = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let reports: Vec<&EstimateReport> = outcomes.iter().filter_map(|o| o.estimates[k].as_ref().ok()).collect();
            let failures: Vec<String> = outcomes
                .iter()
                .filter_map(|o| o.estimates[k].as_ref().err().cloned())
                .collect();
            summarize(method, &config.params, &reports, failures, &taus)
        })
        .collect();
    Ok(McStudy { outcomes, summaries })
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-parameter statistics and AVAR curves over successful runs.
pub fn summarize(
    method: Method,
    truth: &EnsembleParams,
    reports: &[&EstimateReport],
    failures: Vec<String>,
    taus: &[f64],
) -> McSummary {
    let n = truth.n();
    let labels = ThetaVector::labels(n);
    let truth_theta = ThetaVector::pack(truth).0;
    let count = reports.len();
    let parameters = labels
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = reports.iter().map(|r| r.theta[i]).collect();
            let mean = if count > 0 {
                values.iter().sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let std = (count > 1)
                .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt());
            let t = truth_theta[i];
            ParamStat {
                name: name.clone(),
                truth: t,
                mean,
                std,
                rel_error: (t != 0.0).then(|| (mean - t) / t.abs()),
            }
        })
        .collect::<Vec<_>>();

    let curves = if count == 0 {
        Vec::new()
    } else {
        (0..n)
            .map(|c| {
                let mean_clock =
                    ClockParams::new(parameters[c].mean, parameters[n + c].mean, parameters[2 * n + c].mean);
                let mut p025 = Vec::with_capacity(taus.len());
                let mut p975 = Vec::with_capacity(taus.len());
                for &tau in taus {
                    let mut vals: Vec<f64> = reports.iter().map(|r| r.clocks[c].avar(tau)).collect();
                    vals.sort_by(f64::total_cmp);
                    p025.push(percentile(&vals, 0.025));
                    p975.push(percentile(&vals, 0.975));
                }
                AvarCurve {
                    clock: c + 1,
                    taus: taus.to_vec(),
                    truth: taus.iter().map(|&t| truth.clocks()[c].avar(t)).collect(),
                    mean_estimate: taus.iter().map(|&t| mean_clock.avar(t)).collect(),
                    p025,
                    p975,
                }
            })
            .collect()
    };
    McSummary {
        method,
        runs: count + failures.len(),
        failed: failures.len(),
        failures,
        parameters,
        curves,
    }
}

/// Writes one `avar_clock{c}.csv` per clock into `dir`, prefixed by `prefix`.
pub fn write_curves(summary: &McSummary, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(summary.curves.len());
    for curve in &summary.curves {
        let path = dir.join(format!("{prefix}avar_clock{}.csv", curve.clock));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["tau_s", "avar_truth", "avar_mean_estimate", "avar_p025", "avar_p975"])?;
        for p in 0..curve.taus.len() {
            w.write_record(
                [
                    curve.taus[p],
                    curve.truth[p],
                    curve.mean_estimate[p],
                    curve.p025[p],
                    curve.p975[p],
                ]
                .iter()
                .map(|v| format!("{v:.16e}")),
            )?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
