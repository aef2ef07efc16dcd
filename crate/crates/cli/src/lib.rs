//! Batch front-end: `solve`, `train`, `sweep` and `report` over a single JSON
//! experiment config.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use guardrl_core::mdp::{max_norm_distance, solve_guarded_value_iteration, PrunedMdp};
use guardrl_core::trainer::{median, run_training, EnvConfig, RunConfig, RunSummary, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::path::{Path, PathBuf};

/// Configuration or command-line problem; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and parse failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_gap_tol() -> f64 {
    1e-6
}

fn default_max_iters() -> usize {
    1_000_000
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            gap_tol: default_gap_tol(),
            max_iters: default_max_iters(),
        }
    }
}

/// A run config plus output location, verbosity and sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
}

fn default_log_level() -> String {
    "warn".into()
}

/// Just the parts `solve` needs; other keys are ignored.
#[derive(Debug, Clone, Deserialize)]
struct SolveFile {
    env: EnvConfig,
    #[serde(default)]
    solve: SolveSettings,
    output_dir: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("malformed config {}: {e}", path.display())))
}

/// Applies `a.b.c=value` overrides; values parse as JSON and fall back to strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("override '{item}' is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| usage(format!("override '{key}': '{part}' is not inside an object")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn config_dir(path: &Path) -> PathBuf {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        dir
    }
}

/// Resolves paths in the config against the directory holding it.
fn resolve_paths(cfg: &mut ExperimentConfig, base: &Path) {
    if let Some(p) = cfg.run.offline_path.as_mut() {
        absolutize(base, p);
    }
    if let EnvConfig::File { path } = &mut cfg.run.env {
        absolutize(base, path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub sets: Vec<String>,
}

/// Parses an experiment config and applies overrides in order: key=value
/// items first, then the dedicated flags.
pub fn load_experiment(path: &Path, ov: &TrainOverrides) -> Result<ExperimentConfig> {
    let mut doc = read_json(path)?;
    apply_overrides(&mut doc, &ov.sets)?;
    let mut cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(seed) = ov.seed {
        cfg.run.seed = seed;
    }
    if let Some(v) = ov.variant {
        cfg.run.variant = v;
    }
    if let Some(steps) = ov.steps {
        cfg.run.set_total_steps(steps);
    }
    if let Some(out) = &ov.out {
        cfg.output_dir = out.clone();
    }
    resolve_paths(&mut cfg, &config_dir(path));
    cfg.run = cfg.run.normalized();
    cfg.run
        .validate()
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(s) = &cfg.sweep {
        if s.variants.is_empty() || s.seeds.is_empty() {
            return Err(usage("sweep axes must be non-empty"));
        }
    }
    Ok(cfg)
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Warn);
    let _ = env_logger::Builder::new().filter_level(filter).try_init();
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes the per-interval series as CSV, one row per log record.
pub fn write_log_csv(records: &[guardrl_core::trainer::IntervalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one training job and writes its log, summary, CSV and effective config.
pub fn train_to_dir(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_pretty(&dir.join("effective_config.json"), cfg)?;
    log::info!("training {} seed {} into {}", cfg.run.variant, cfg.run.seed, dir.display());
    let log = run_training(&cfg.run)?;
    log.save(dir)?;
    write_log_csv(&log.records, &dir.join("log.csv"))?;
    Ok(log.summary)
}

pub fn cmd_train(config: &Path, ov: &TrainOverrides) -> Result<RunSummary> {
    let cfg = load_experiment(config, ov)?;
    init_logging(&cfg.log_level);
    train_to_dir(&cfg)
}

/// Runs every (variant, seed) pair into `<output_dir>/<variant>/seed_<n>`.
pub fn cmd_sweep(config: &Path, ov: &TrainOverrides, jobs: usize) -> Result<Vec<PathBuf>> {
    let base = load_experiment(config, ov)?;
    init_logging(&base.log_level);
    let axes = base.sweep.clone().unwrap_or(SweepAxes {
        variants: vec![base.run.variant],
        seeds: vec![base.run.seed],
    });
    let mut runs = Vec::new();
    for v in &axes.variants {
        for seed in &axes.seeds {
            let mut c = base.clone();
            c.run.variant = *v;
            c.run.seed = *seed;
            c.run = c.run.normalized();
            c.output_dir = base.output_dir.join(v.name()).join(format!("seed_{seed}"));
            c.sweep = None;
            runs.push(c);
        }
    }
    let results = run_jobs(&runs, jobs.max(1))?;
    let mut dirs = Vec::new();
    for (c, r) in runs.iter().zip(results) {
        r.with_context(|| format!("run in {}", c.output_dir.display()))?;
        dirs.push(c.output_dir.clone());
    }
    Ok(dirs)
}

#[cfg(feature = "parallel")]
fn run_jobs(runs: &[ExperimentConfig], jobs: usize) -> Result<Vec<Result<RunSummary>>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(|| runs.par_iter().map(train_to_dir).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs(runs: &[ExperimentConfig], _jobs: usize) -> Result<Vec<Result<RunSummary>>> {
    Ok(runs.iter().map(train_to_dir).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub pruned_iterations: usize,
    pub gap: f64,
    pub gap_tol: f64,
    pub tol: f64,
}

/// Solves the configured MDP both ways and writes `solve.json`,
/// `q_star.json` and `pruned.json`. Fails when the gap exceeds `gap_tol`.
pub fn cmd_solve(config: &Path, out: Option<&Path>) -> Result<SolveReport> {
    let doc = read_json(config)?;
    let mut file: SolveFile = serde_json::from_value(doc)
        .map_err(|e| usage(format!("invalid config {}: {e}", config.display())))?;
    if let EnvConfig::File { path } = &mut file.env {
        absolutize(&config_dir(config), path);
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .or(file.output_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set output_dir"))?;
    let (mdp, spec) = file.env.build().map_err(|e| usage(format!("invalid environment: {e}")))?;
    let s = file.solve;
    let vi = solve_guarded_value_iteration(&mdp, &spec, s.tol, s.max_iters)?;
    let pruned = PrunedMdp::new(&mdp, &spec)?.solve(&mdp, s.tol, s.max_iters)?;
    let gap = max_norm_distance(&vi.q, &pruned.q)?;
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_pretty(&out_dir.join("q_star.json"), &vi.q.to_rows())?;
    write_pretty(
        &out_dir.join("pruned.json"),
        &serde_json::json!({ "values": pruned.values, "q": pruned.q.to_rows() }),
    )?;
    let report = SolveReport {
        iterations: vi.iterations,
        pruned_iterations: pruned.iterations,
        gap,
        gap_tol: s.gap_tol,
        tol: s.tol,
    };
    write_pretty(&out_dir.join("solve.json"), &report)?;
    if !(gap <= s.gap_tol) {
        bail!("solver gap {gap:e} exceeds tolerance {:e}", s.gap_tol);
    }
    Ok(report)
}

/// One output row of `report`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub runs: usize,
    pub final_td_error: Option<f64>,
    pub final_ensemble_variance: Option<f64>,
    pub ttfv: Option<f64>,
    pub eval_return: Option<f64>,
    pub coverage: Option<f64>,
    pub support_kl: Option<f64>,
    pub action_novelty_rate: Option<f64>,
}

fn load_summary(dir: &Path) -> Result<RunSummary> {
    let log = dir.join("log.jsonl");
    let text = std::fs::read_to_string(&log).with_context(|| format!("missing log {}", log.display()))?;
    guardrl_core::trainer::RunLog::read_jsonl(&text)
        .with_context(|| format!("corrupt log {}", log.display()))?;
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("missing summary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("corrupt summary {}", path.display()))
}

fn median_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| median(&mut v))
}

/// Per-variant medians over the given run directories.
pub fn build_report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if dirs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    let summaries = dirs.iter().map(|d| load_summary(d)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let group: Vec<&RunSummary> = summaries.iter().filter(|s| s.variant == v).collect();
        if group.is_empty() {
            continue;
        }
        let g = || group.iter();
        rows.push(ReportRow {
            variant: v,
            runs: group.len(),
            final_td_error: median_of(g().map(|s| s.final_td_error)),
            final_ensemble_variance: median_of(g().map(|s| s.final_ensemble_variance)),
            ttfv: median_of(g().map(|s| Some(s.ttfv))),
            eval_return: median_of(g().map(|s| Some(s.eval_return))),
            coverage: median_of(g().map(|s| Some(s.coverage as f64))),
            support_kl: median_of(g().map(|s| s.support_kl)),
            action_novelty_rate: median_of(g().map(|s| Some(s.action_novelty_rate))),
        });
    }
    Ok(rows)
}

pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<Vec<ReportRow>> {
    let rows = build_report(dirs)?;
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "guardrl", version, about = "Guarded offline-to-online RL experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `dotted.key=value` overrides.
    pub overrides: Vec<String>,
}

impl TrainArgs {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            seed: self.seed,
            variant: self.variant,
            steps: self.steps,
            out: self.out.clone(),
            sets: self.overrides.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured MDP exactly and compare against the pruned-MDP oracle.
    Solve {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training job.
    Train(TrainArgs),
    /// Run every variant and seed listed under `sweep`.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Number of concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate run directories into a per-variant CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { config, out } => {
            let r = cmd_solve(&config, out.as_deref())?;
            println!("gap {:e} after {} iterations", r.gap, r.iterations);
        }
        Command::Train(args) => {
            let s = cmd_train(&args.config, &args.overrides())?;
            println!(
                "{} seed {}: return {:.3}, executed violations {}",
                s.variant, s.seed, s.eval_return, s.executed_violations
            );
        }
        Command::Sweep { train, jobs } => {
            let dirs = cmd_sweep(&train.config, &train.overrides(), jobs)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Report { runs, out } => {
            cmd_report(&runs, out.as_deref())?;
        }
    }
    Ok(())
}
