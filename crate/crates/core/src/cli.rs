//! Command-line front end: `run`, `score`, `bench` and `sweep`.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! runtime failures. Errors go to stderr as a single JSON object:
//! `{"error": {"code": 2, "kind": "config", "message": "..."}}`.
//!
//! Output files of `run` (and of each sweep point):
//!
//! | file | contents |
//! |---|---|
//! | `samples.csv` | `index,prompt_id,x,y` (`x0..x{d-1}` when `d != 2`) |
//! | `guidance.csv` | `index,t,grad_norm,update_norm,terms_used`, one row per applied update |
//! | `report.json` | [`RunReport`] |
//! | `history.json` | final [`HistorySnapshot`](crate::guidance::HistorySnapshot) |
//! | `config.resolved.json` | the effective [`ExperimentConfig`] |
//!
//! A sweep adds `sweep.csv` with one row per point and writes every point
//! under `points/<nn>_<label>/`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{bench_method, bench_pipeline_overhead, write_bench_csv, BenchMethod, BenchResult, OverheadRow};
use crate::config::{ExperimentConfig, KernelKind};
use crate::entropy::{cond_rke_score, cond_vendi_score, rke_score, vendi_score};
use crate::error::SparkeError;
use crate::guidance::GuidanceMode;
use crate::kernel::{build_kernel_matrix, KernelSpec};
use crate::metrics::{capture_fraction, evaluate_samples, EvalReport};
use crate::sampler::{reference_from_modes, run_with_history, RunRecord};

/// Version of the CSV and JSON layouts written by this module.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "sparke", version, about = "Kernel-entropy diversity guidance on analytic diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate samples and score them (runs every point when the config has a sweep).
    Run(Overrides),
    /// Score a set of vectors, optionally with aligned conditions.
    Score(ScoreArgs),
    /// Time the scoring and gradient paths and the sampler overhead.
    Bench(Overrides),
    /// Run the cross product of the config's sweep axes.
    Sweep(Overrides),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Off,
    Rke,
    Sparke,
}

impl From<ModeArg> for GuidanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Off => GuidanceMode::Off,
            ModeArg::Rke => GuidanceMode::UnconditionalRke,
            ModeArg::Sparke => GuidanceMode::ConditionalRke,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Cosine,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON experiment config; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (beats the environment override and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Latent kernel used by the guidance.
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Bandwidth of the Gaussian latent kernel.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Vectors as CSV rows (an optional header is skipped) or a JSON array of arrays.
    #[arg(long)]
    pub vectors: PathBuf,
    /// Conditions aligned with `--vectors`, same formats.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 0.8)]
    pub bandwidth: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub cond_kernel: KernelArg,
    #[arg(long, default_value_t = 0.3)]
    pub cond_bandwidth: f64,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": { "code": self.code(), "kind": kind, "message": message } }).to_string()
    }
}

impl From<SparkeError> for CliError {
    fn from(e: SparkeError) -> Self {
        match e {
            SparkeError::Io(_) | SparkeError::Csv(_) | SparkeError::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn kernel_spec(kind: KernelArg, bandwidth: f64) -> KernelSpec {
    match kind {
        KernelArg::Gaussian => KernelSpec::gaussian(bandwidth),
        KernelArg::Cosine => KernelSpec::Cosine,
    }
}

/// Loads the config and applies command-line overrides.
pub fn load_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
        cfg.bench.settings.seed = seed;
    }
    if let Some(eta) = o.eta {
        cfg.guidance.eta = eta;
    }
    if let Some(mode) = o.mode {
        cfg.guidance.mode = mode.into();
    }
    match (o.kernel, o.bandwidth) {
        (Some(KernelArg::Cosine), Some(_)) => {
            return Err(CliError::Config("--bandwidth does not apply to the cosine kernel".into()));
        }
        (Some(KernelArg::Cosine), None) => cfg.guidance.kernel_z = KernelSpec::Cosine,
        (Some(KernelArg::Gaussian), None) => {
            cfg.guidance.kernel_z = KernelKind::Gaussian.with_bandwidth_of(&cfg.guidance.kernel_z);
        }
        (Some(KernelArg::Gaussian), Some(b)) => cfg.guidance.kernel_z = KernelSpec::gaussian(b),
        (None, Some(b)) => match cfg.guidance.kernel_z {
            KernelSpec::Gaussian { .. } => cfg.guidance.kernel_z = KernelSpec::gaussian(b),
            KernelSpec::Cosine => return Err(CliError::Config("--bandwidth does not apply to the cosine kernel".into())),
        },
        (None, None) => {}
    }
    if let Some(out) = &o.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(o: &Overrides, cfg: &ExperimentConfig) -> PathBuf {
    match &o.out {
        Some(p) => p.clone(),
        None => cfg.effective_output_dir(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: GuidanceMode,
    pub eta: f64,
    pub cfg_scale: f64,
    pub kernel_z: KernelSpec,
    pub metrics: EvalReport,
    /// Fraction of samples captured by the novelty reference modes, when configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novelty_capture: Option<f64>,
    pub guidance_updates: usize,
    pub mean_secs_per_sample: f64,
}

/// Runs one experiment (ignoring any sweep) and scores it.
pub fn execute_run(cfg: &ExperimentConfig) -> crate::Result<(RunRecord, RunReport)> {
    let run = cfg.run_config()?;
    let mut history = run.new_history();
    if let Some(n) = &cfg.novelty {
        let (points, conds) = reference_from_modes(&run.gmm, &n.modes, n.per_mode, cfg.seed)?;
        history.seed_novelty_reference(&points, &conds)?;
    }
    let record = run_with_history(&run, history)?;
    let (latents, conditions) = (record.latents(), record.conditions());
    let m = &cfg.metrics;
    let metrics = evaluate_samples(&latents, &conditions, &run.gmm, &m.kernel_z, &m.kernel_y, m.radius_mult)?;
    let novelty_capture = cfg.novelty.as_ref().map(|n| capture_fraction(&latents, &run.gmm, &n.modes, m.radius_mult));
    let total_secs: f64 = record.samples.iter().map(|s| s.wall_time_secs).sum();
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        mode: run.guidance.mode,
        eta: run.guidance.eta,
        cfg_scale: run.cfg_scale,
        kernel_z: run.guidance.kernel_z,
        metrics,
        novelty_capture,
        guidance_updates: record.samples.iter().map(|s| s.guidance_steps.len()).sum(),
        mean_secs_per_sample: total_secs / record.samples.len() as f64,
    };
    Ok((record, report))
}

/// Writes `samples.csv` for a finished run.
pub fn write_samples_csv<W: Write>(record: &RunRecord, out: W) -> crate::Result<()> {
    let d = record.config.gmm.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string(), "prompt_id".to_string()];
    if d == 2 {
        header.extend(["x".to_string(), "y".to_string()]);
    } else {
        header.extend((0..d).map(|i| format!("x{i}")));
    }
    w.write_record(&header)?;
    for s in &record.samples {
        let mut row = vec![s.index.to_string(), s.prompt_id.to_string()];
        row.extend(s.latent.as_slice().iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_guidance_csv<W: Write>(record: &RunRecord, out: W) -> crate::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "t", "grad_norm", "update_norm", "terms_used"])?;
    for s in &record.samples {
        for g in &s.guidance_steps {
            let gn = g.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.write_record([
                s.index.to_string(),
                g.t.to_string(),
                format!("{gn:?}"),
                format!("{:?}", g.update_norm),
                g.terms_used.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig) -> CliResult<RunReport> {
    create_dir(dir)?;
    let (record, report) = execute_run(cfg)?;
    let mut buf = Vec::new();
    write_samples_csv(&record, &mut buf)?;
    write_file(&dir.join("samples.csv"), &buf)?;
    buf.clear();
    write_guidance_csv(&record, &mut buf)?;
    write_file(&dir.join("guidance.csv"), &buf)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("history.json"), &record.history)?;
    write_file(&dir.join("config.resolved.json"), (cfg.resolved(dir).to_json()? + "\n").as_bytes())?;
    Ok(report)
}

fn cmd_run(o: &Overrides) -> CliResult<()> {
    let cfg = load_config(o)?;
    if cfg.sweep.is_some() {
        return run_sweep(o, cfg);
    }
    let dir = output_dir(o, &cfg);
    let report = write_run_outputs(&dir, &cfg)?;
    log::info!("run finished: rke {:.4}, written to {}", report.metrics.rke, dir.display());
    Ok(())
}

fn cmd_sweep(o: &Overrides) -> CliResult<()> {
    let cfg = load_config(o)?;
    if cfg.sweep.is_none() {
        return Err(CliError::Config("config declares no sweep".into()));
    }
    run_sweep(o, cfg)
}

fn run_sweep(o: &Overrides, cfg: ExperimentConfig) -> CliResult<()> {
    let dir = output_dir(o, &cfg);
    create_dir(&dir)?;
    write_file(&dir.join("config.resolved.json"), (cfg.resolved(&dir).to_json()? + "\n").as_bytes())?;
    let mut rows = Vec::new();
    for (i, p) in cfg.sweep_points().iter().enumerate() {
        let point_dir = dir.join("points").join(format!("{i:02}_{}", p.label()));
        let report = write_run_outputs(&point_dir, &cfg.at_point(p))?;
        log::info!("sweep point {i} ({}) rke {:.4}", p.label(), report.metrics.rke);
        rows.push((i, p.clone(), report.metrics));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "point",
        "mode",
        "eta",
        "cfg_scale",
        "kernel",
        "bandwidth",
        "num_samples",
        "vendi",
        "rke",
        "cond_vendi",
        "cond_rke",
        "in_batch_similarity",
        "mode_coverage",
        "high_quality_fraction",
    ])
    .map_err(runtime)?;
    for (i, p, m) in rows {
        let bw = match p.kernel {
            KernelSpec::Gaussian { bandwidth } => bandwidth.to_string(),
            KernelSpec::Cosine => String::new(),
        };
        w.write_record([
            i.to_string(),
            p.mode.short_name().to_string(),
            p.eta.to_string(),
            p.cfg_scale.to_string(),
            p.kernel.name().to_string(),
            bw,
            m.num_samples.to_string(),
            format!("{:?}", m.vendi),
            format!("{:?}", m.rke),
            format!("{:?}", m.cond_vendi),
            format!("{:?}", m.cond_rke),
            format!("{:?}", m.in_batch_similarity),
            format!("{:?}", m.mode_coverage),
            format!("{:?}", m.high_quality_fraction),
        ])
        .map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(runtime)?;
    write_file(&dir.join("sweep.csv"), &bytes)
}

#[derive(Debug, Serialize)]
struct SkippedBench {
    method: BenchMethod,
    reason: String,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    schema_version: u32,
    results: Vec<BenchResult>,
    skipped: Vec<SkippedBench>,
    overhead: Vec<OverheadRow>,
}

fn cmd_bench(o: &Overrides) -> CliResult<()> {
    let cfg = load_config(o)?;
    let dir = output_dir(o, &cfg);
    create_dir(&dir)?;
    let b = &cfg.bench;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for &method in &b.methods {
        match bench_method(method, &b.sizes_for(method), &b.settings) {
            Ok(r) => {
                log::info!("{method}: exponent {:.3}", r.fitted_exponent);
                results.push(r);
            }
            Err(e @ SparkeError::EigenCap { .. }) => {
                log::warn!("skipping {method}: {e}");
                skipped.push(SkippedBench { method, reason: e.to_string() });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let overhead = if b.pipeline { bench_pipeline_overhead(&cfg.run_config()?, &b.overhead)? } else { Vec::new() };
    let mut buf = Vec::new();
    write_bench_csv(&results, &mut buf)?;
    write_file(&dir.join("bench.csv"), &buf)?;
    write_json(&dir.join("bench.json"), &BenchReport { schema_version: SCHEMA_VERSION, results, skipped, overhead })?;
    write_file(&dir.join("config.resolved.json"), (cfg.resolved(&dir).to_json()? + "\n").as_bytes())
}

/// Reads rows of numbers from a JSON array of arrays or a CSV file.
pub fn read_vectors(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) => rows.push(v),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(CliError::Config(format!("{} row {}: {e}", path.display(), i + 1))),
            }
        }
        rows
    };
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} holds no vectors", path.display())));
    }
    let d = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(CliError::Config(format!("{}: row {} has {} values, expected {d}", path.display(), i + 1, rows[i].len())));
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    n: usize,
    kernel: KernelSpec,
    vendi: f64,
    rke: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cond_kernel: Option<KernelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cond_vendi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cond_rke: Option<f64>,
}

fn cmd_score<W: Write>(a: &ScoreArgs, stdout: &mut W) -> CliResult<()> {
    let vectors = read_vectors(&a.vectors)?;
    let kz_spec = kernel_spec(a.kernel, a.bandwidth);
    let kz = build_kernel_matrix(&kz_spec, &vectors)?;
    let mut report = ScoreReport {
        n: vectors.len(),
        kernel: kz_spec,
        vendi: vendi_score(&kz)?.value,
        rke: rke_score(&kz)?.value,
        cond_kernel: None,
        cond_vendi: None,
        cond_rke: None,
    };
    if let Some(path) = &a.conditions {
        let conds = read_vectors(path)?;
        if conds.len() != vectors.len() {
            return Err(SparkeError::LengthMismatch { left: vectors.len(), right: conds.len() }.into());
        }
        let ky_spec = kernel_spec(a.cond_kernel, a.cond_bandwidth);
        let ky = build_kernel_matrix(&ky_spec, &conds)?;
        report.cond_kernel = Some(ky_spec);
        report.cond_vendi = Some(cond_vendi_score(&kz, &ky)?.value);
        report.cond_rke = Some(cond_rke_score(&kz, &ky)?.value);
    }
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    writeln!(stdout, "{text}").map_err(runtime)
}

/// Dispatches a parsed command.
pub fn execute<W: Write>(cli: &Cli, stdout: &mut W) -> CliResult<()> {
    match &cli.command {
        Command::Run(o) => cmd_run(o),
        Command::Score(a) => cmd_score(a, stdout),
        Command::Bench(o) => cmd_bench(o),
        Command::Sweep(o) => cmd_sweep(o),
    }
}

/// Full entry point: parses `args`, runs, reports errors, returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.code();
        }
    };
    match execute(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code()
        }
    }
}
