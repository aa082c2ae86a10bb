//! `chronident`: simulate clock ensembles, estimate their noise parameters,
//! export Allan covariances and run Monte-Carlo studies.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid input,
//! 3 unidentifiable parameters, 4 numerical failure.

mod scenario;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chronident_core::io::{read_measurements_file, write_acov, write_json, write_measurements};
use chronident_core::montecarlo::{run_monte_carlo, write_curves, McConfig};
use chronident_core::simulate::{remove_outliers, simulate_measurements};
use chronident_core::stability::{acov_grid, log_spaced_grid};
use chronident_core::{estimate_acov_method, estimate_mdm, AcovOptions, EnsembleModel, Error, MdmConfig, Method};
use clap::{Args, Parser, Subcommand};

use scenario::{EstimationOptions, ScenarioConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_UNIDENTIFIABLE: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "chronident",
    version,
    about = "Noise identification for atomic clock ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement record from a scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Number of steps N; the file holds N + 1 rows.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate ensemble parameters from a measurement CSV.
    Estimate {
        input: PathBuf,
        /// Scenario file supplying default estimation options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: EstimateArgs,
        /// Output JSON report; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export empirical Allan (co)variances of every channel pair.
    Avar {
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        ell: usize,
        #[arg(long)]
        m_max: Option<usize>,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat simulation and estimation and summarize the estimates.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: usize,
        /// Master seed; per-run seeds are derived from it.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        opts: EstimateArgs,
        /// Output directory for `summary.json` and the AVAR curve files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct EstimateArgs {
    /// Estimation method; `montecarlo` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Number of log-spaced averaging times (acov).
    #[arg(long)]
    ell: Option<usize>,
    /// Largest averaging factor (acov); defaults to N / 2.
    #[arg(long)]
    m_max: Option<usize>,
    /// Window length (mdm).
    #[arg(long = "L")]
    l: Option<usize>,
    /// Resampling period in seconds (mdm).
    #[arg(long)]
    ts_target: Option<f64>,
    /// Known drift of the pivot clock.
    #[arg(long)]
    d1: Option<f64>,
    /// Outlier threshold in robust standard deviations, or `off`.
    #[arg(long, value_parser = parse_outlier_k)]
    outlier_k: Option<OutlierK>,
}

#[derive(Debug, Clone, Copy)]
enum OutlierK {
    Off,
    K(f64),
}

fn parse_outlier_k(s: &str) -> std::result::Result<OutlierK, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(OutlierK::Off);
    }
    match s.parse::<f64>() {
        Ok(k) if k > 0.0 && k.is_finite() => Ok(OutlierK::K(k)),
        _ => Err(format!("expected a positive number or `off`, got `{s}`")),
    }
}

/// Flags merged over the scenario file's estimation block.
struct Resolved {
    methods: Vec<Method>,
    acov: AcovOptions,
    mdm: MdmConfig,
    d1: f64,
    outlier_k: Option<f64>,
}

impl EstimateArgs {
    fn resolve(&self, file: &EstimationOptions) -> Resolved {
        let methods = if self.method.is_empty() {
            vec![file.method.unwrap_or(Method::Acov)]
        } else {
            self.method.clone()
        };
        let d1 = self.d1.or(file.d1).unwrap_or(0.0);
        let mdm_default = MdmConfig::default();
        let outlier_k = match self.outlier_k {
            Some(OutlierK::Off) => None,
            Some(OutlierK::K(k)) => Some(k),
            None => file.outlier_k,
        };
        Resolved {
            methods,
            acov: AcovOptions {
                ell: self.ell.or(file.ell).unwrap_or(20),
                m_max: self.m_max.or(file.m_max),
                d1,
                ..AcovOptions::default()
            },
            mdm: MdmConfig {
                l: self.l.or(file.l).unwrap_or(mdm_default.l),
                ts_target: self.ts_target.or(file.ts_target_s).unwrap_or(mdm_default.ts_target),
                ..mdm_default
            },
            d1,
            outlier_k,
        }
    }
}

/// Writes to `path`, or to standard output when `path` is `None`.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            let mut w = std::io::BufWriter::new(file);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_simulate(config: &Path, steps: Option<usize>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let scenario = ScenarioConfig::load(config)?;
    let params = scenario.params()?;
    let n_steps = steps
        .or(scenario.n_steps)
        .ok_or_else(|| Error::InvalidArgument("number of steps missing: pass --steps or set `n_steps`".into()))?;
    let seed = seed.or(scenario.seed).unwrap_or(0);
    let model = EnsembleModel::assemble(&params, scenario.ts_seconds)?;
    let record = simulate_measurements(&model, n_steps, seed, None)?;
    with_output(out, |w| Ok(write_measurements(&record, w)?))?;
    eprintln!(
        "simulated n = {} clocks, N = {n_steps} steps, Ts = {} s, seed = {seed}",
        params.n(),
        scenario.ts_seconds
    );
    Ok(())
}

fn cmd_estimate(input: &Path, config: Option<&Path>, opts: &EstimateArgs, out: Option<&Path>) -> Result<()> {
    let file_opts = match config {
        Some(p) => ScenarioConfig::load(p)?.estimation,
        None => EstimationOptions::default(),
    };
    let resolved = opts.resolve(&file_opts);
    let [method] = resolved.methods[..] else {
        bail!(Error::InvalidArgument("estimate takes exactly one --method".into()));
    };
    let mut record = read_measurements_file(input)?;
    let mut removed = None;
    if let Some(k) = resolved.outlier_k {
        let (cleaned, report) = remove_outliers(&record, k)?;
        log::info!("outlier filter replaced {} samples", report.total());
        removed = Some(report.total());
        record = cleaned;
    }
    let mut report = match method {
        Method::Acov => estimate_acov_method(&record, &resolved.acov)?,
        Method::Mdm => estimate_mdm(&record, &resolved.mdm, resolved.d1)?,
    };
    report.diagnostics.outliers_removed = removed;
    with_output(out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })
}

fn cmd_avar(input: &Path, ell: usize, m_max: Option<usize>, out: Option<&Path>) -> Result<()> {
    let record = read_measurements_file(input)?;
    let grid = log_spaced_grid(ell, m_max.unwrap_or(record.n_steps() / 2), record.ts())?;
    let acov = acov_grid(&record, &grid)?;
    with_output(out, |w| Ok(write_acov(&acov, w)?))
}

#[allow(clippy::too_many_arguments)]
fn cmd_montecarlo(
    config: &Path,
    runs: usize,
    seed: Option<u64>,
    steps: Option<usize>,
    jobs: usize,
    opts: &EstimateArgs,
    out: &Path,
) -> Result<()> {
    let scenario = ScenarioConfig::load(config)?;
    let params = scenario.params()?;
    let n_steps = steps
        .or(scenario.n_steps)
        .ok_or_else(|| Error::InvalidArgument("number of steps missing: pass --steps or set `n_steps`".into()))?;
    let resolved = opts.resolve(&scenario.estimation);
    let mut mc = McConfig::new(params, scenario.ts_seconds, n_steps, runs);
    mc.master_seed = seed.or(scenario.seed).unwrap_or(0);
    mc.methods = resolved.methods;
    mc.d1 = resolved.d1;
    mc.acov = resolved.acov;
    mc.mdm = resolved.mdm;
    mc.outlier_k = resolved.outlier_k;
    mc.jobs = jobs;
    let study = run_monte_carlo(&mc)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let single = study.summaries.len() == 1;
    for summary in &study.summaries {
        let prefix = if single {
            String::new()
        } else {
            format!("{}_", summary.method)
        };
        write_curves(summary, out, &prefix)?;
        eprintln!("{}: {} runs, {} failed", summary.method, summary.runs, summary.failed);
    }
    write_json(&study.summaries, &out.join("summary.json"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            steps,
            seed,
            out,
        } => cmd_simulate(&config, steps, seed, out.as_deref()),
        Command::Estimate {
            input,
            config,
            opts,
            out,
        } => cmd_estimate(&input, config.as_deref(), &opts, out.as_deref()),
        Command::Avar { input, ell, m_max, out } => cmd_avar(&input, ell, m_max, out.as_deref()),
        Command::Montecarlo {
            config,
            runs,
            seed,
            steps,
            jobs,
            opts,
            out,
        } => cmd_montecarlo(&config, runs, seed, steps, jobs, &opts, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        if e.is_input_error() {
            EXIT_INPUT
        } else if e.is_unidentifiable() {
            EXIT_UNIDENTIFIABLE
        } else {
            EXIT_NUMERICAL
        }
    } else if err
        .chain()
        .any(|c| c.is::<serde_json::Error>() || c.is::<std::io::Error>())
    {
        EXIT_INPUT
    } else {
        EXIT_FAILURE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHRONIDENT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
