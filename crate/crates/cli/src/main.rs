//! `emsim`: batch simulation, forecasting, metrics export, trajectory
//! discretization and the HTTP service.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 1 anything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emsim::forecast::{aggregate, fit_smoothed, SolverOptions, TimePartition};
use emsim::io::config::history_span;
use emsim::io::{self, parse_config, ForecastArtifacts, RunConfig, RunFolder};
use emsim::metrics::{ecdf_values, export_table, histogram_values, select, summarize_outputs, MetricFilter};
use emsim::sim::run_batch;

#[derive(Parser, Debug)]
#[command(name = "emsim", version, about = "Ambulance fleet simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(short = 'f', long = "file", required = true)]
    file: PathBuf,
    /// `key=value` overrides; they take precedence over the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Report {
    Summary,
    Ecdf,
    Histogram,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every policy on every scenario and write all output files.
    Simulate(ConfigArgs),
    /// Fit the arrival model to the configured historical calls.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weight of the penalty on rate differences between neighbouring zones.
        #[arg(long, default_value_t = 0.0)]
        smooth: f64,
    },
    /// Draw call scenarios from the arrival model and write calls.txt.
    Generate(ConfigArgs),
    /// Response-time summaries of a finished run folder.
    Metrics {
        run_dir: PathBuf,
        /// Weekdays, comma separated, 0 = Monday.
        #[arg(long)]
        days: Option<String>,
        /// Intraday window `HH:MM-HH:MM` on 30-minute boundaries.
        #[arg(long)]
        window: Option<String>,
        /// `raw` or `penalized`.
        #[arg(long)]
        kind: Option<String>,
        /// Priorities, comma separated.
        #[arg(long)]
        priority: Option<String>,
        /// One row per policy and scenario instead of pooling scenarios.
        #[arg(long)]
        per_scenario: bool,
        #[arg(long, value_enum, default_value_t = Report::Summary)]
        report: Report,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discretize the trajectories of a run folder every `t_step` seconds.
    Trace {
        run_dir: PathBuf,
        #[arg(long = "t-step")]
        t_step: f64,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        scenario: Option<u64>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "emsim-runs")]
        data_dir: PathBuf,
        /// Static assets of the playback UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 64)]
        max_pending: usize,
    },
}

enum Failure {
    Config(String),
    Other(String),
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let overrides = args
        .overrides
        .iter()
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Failure::Config(format!("override '{kv}' is not key=value"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let parsed = parse_config(&args.file, &overrides).map_err(config_err)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok(parsed.config)
}

fn output_folder(cfg: &RunConfig) -> RunFolder {
    RunFolder::new(cfg.output_folder.clone().expect("parse_config requires output_folder"))
}

fn simulate(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let run = cfg.prepare().map_err(config_err)?;
    let outputs = run_batch(&run.sim, &run.scenarios, &run.policies, &run.router);
    for o in outputs.iter().filter(|o| o.error.is_some()) {
        eprintln!("error: {} scenario {}: {}", o.label(), o.scenario, o.error.as_deref().unwrap_or_default());
    }
    let folder = output_folder(&cfg);
    let written = folder.save(&cfg, &run, &outputs).map_err(other)?;
    println!("wrote {} files to {}", written.len(), folder.path.display());
    print!("{}", export_table(&summarize_outputs(&outputs, &MetricFilter::default(), false)));
    if outputs.iter().any(|o| o.error.is_some()) {
        return Err(Failure::Other("some runs failed".into()));
    }
    Ok(())
}

fn fit(args: &ConfigArgs, smooth: f64) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let path = cfg.history_file.as_ref().ok_or_else(|| Failure::Config("fit needs history_file".into()))?;
    let records = io::parse_historical(&fs::read_to_string(path).map_err(other)?).map_err(other)?;
    let (from, to) = history_span(&records).ok_or_else(|| other("the historical file has no calls"))?;
    let partition = emsim::forecast::build_rect_partition(cfg.region(), cfg.grid[0], cfg.grid[1]).map_err(config_err)?;
    let time_partition = TimePartition::daily_slots(30).expect("30 divides a day");
    let obs: Vec<_> = records.iter().map(|r| r.observed()).collect();
    let agg = aggregate(&obs, &partition, &time_partition, 3, from, to);
    let (model, report) =
        fit_smoothed(&agg.cube, &time_partition, &partition.neighbors(), smooth, SolverOptions::default()).map_err(other)?;
    let folder = output_folder(&cfg);
    let path = folder
        .save_forecast(&ForecastArtifacts { partition, time_partition, model: Some(model) })
        .map_err(other)?;
    println!(
        "fitted {} calls ({} outside the partition) over {} days; objective {} after {} iterations; wrote {}",
        records.len() - agg.rejected,
        agg.rejected,
        (to - from) / 86_400.0,
        report.objective,
        report.iterations,
        path.display()
    );
    Ok(())
}

fn generate(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    if cfg.calls_file.is_some() {
        return Err(Failure::Config("generate draws calls from a model; unset calls_file".into()));
    }
    let run = cfg.prepare().map_err(config_err)?;
    let folder = output_folder(&cfg);
    fs::create_dir_all(&folder.path).map_err(other)?;
    let path = io::write_calls(&run.scenarios, &folder.path).map_err(other)?;
    folder
        .save_forecast(&ForecastArtifacts {
            partition: run.partition,
            time_partition: run.time_partition,
            model: run.model,
        })
        .map_err(other)?;
    let n: usize = run.scenarios.iter().map(|s| s.calls.len()).sum();
    println!("wrote {} scenarios with {n} calls to {}", run.scenarios.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn metrics(
    run_dir: &Path,
    days: Option<&str>,
    window: Option<&str>,
    kind: Option<&str>,
    priority: Option<&str>,
    per_scenario: bool,
    report: Report,
    bins: usize,
) -> Result<String, Failure> {
    let filter = MetricFilter::parse(days, window, kind, priority).map_err(config_err)?;
    let outputs = RunFolder::new(run_dir).load_outputs().map_err(other)?;
    let rows = summarize_outputs(&outputs, &filter, per_scenario);
    if rows.is_empty() {
        return Err(other("no records match the filter"));
    }
    if let Report::Summary = report {
        return Ok(export_table(&rows));
    }
    let mut s = String::new();
    match report {
        Report::Ecdf => s.push_str("policy,value,probability\n"),
        _ => s.push_str("policy,lower,upper,count\n"),
    }
    for row in &rows {
        let records: Vec<_> = outputs
            .iter()
            .filter(|o| o.label() == row.policy && row.scenario.is_none_or(|id| id == o.scenario))
            .flat_map(|o| o.records.iter().cloned())
            .collect();
        let label = match row.scenario {
            Some(id) => format!("{}@{id}", row.policy),
            None => row.policy.clone(),
        };
        let mut values = select(&records, &filter);
        values.sort_by(f64::total_cmp);
        match report {
            Report::Ecdf => {
                for (v, p) in ecdf_values(&values) {
                    let _ = writeln!(s, "{label},{v},{p}");
                }
            }
            _ => {
                let h = histogram_values(&values, bins).map_err(config_err)?;
                for (k, c) in h.counts.iter().enumerate() {
                    let _ = writeln!(s, "{label},{},{},{c}", h.edges[k], h.edges[k + 1]);
                }
            }
        }
    }
    Ok(s)
}

fn trace(run_dir: &Path, t_step: f64, policy: Option<&str>, scenario: Option<u64>) -> Result<(), Failure> {
    if !(t_step > 0.0 && t_step.is_finite()) {
        return Err(Failure::Config("--t-step must be positive".into()));
    }
    let outputs = RunFolder::new(run_dir).load_outputs().map_err(other)?;
    let mut n = 0;
    for o in outputs
        .iter()
        .filter(|o| policy.is_none_or(|p| p == o.label()) && scenario.is_none_or(|s| s == o.scenario))
    {
        n += io::write_traces(o, t_step, run_dir).map_err(other)?.len();
    }
    if n == 0 {
        return Err(other("no run matches the policy/scenario selection"));
    }
    println!("wrote {n} trace files");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Fit { config, smooth } => fit(&config, smooth),
        Command::Generate(args) => generate(&args),
        Command::Metrics { run_dir, days, window, kind, priority, per_scenario, report, bins, out } => {
            let text = metrics(
                &run_dir,
                days.as_deref(),
                window.as_deref(),
                kind.as_deref(),
                priority.as_deref(),
                per_scenario,
                report,
                bins,
            )?;
            match out {
                Some(p) => fs::write(p, text).map_err(other),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Trace { run_dir, t_step, policy, scenario } => trace(&run_dir, t_step, policy.as_deref(), scenario),
        Command::Serve { port, data_dir, ui_dir, workers, max_pending } => {
            let mut opts = emsim_api::ServeOptions::new(data_dir);
            opts.port = port;
            opts.ui_dir = ui_dir;
            opts.max_pending = max_pending;
            if let Some(w) = workers {
                opts.workers = w;
            }
            let rt = tokio::runtime::Runtime::new().map_err(other)?;
            eprintln!("listening on port {port}");
            rt.block_on(emsim_api::serve(opts)).map_err(other)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
