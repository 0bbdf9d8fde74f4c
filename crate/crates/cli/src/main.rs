//! `pimsim` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 a check ran
//! and failed.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pimsim::check::{run_battery, BatteryConfig, Precision};
use pimsim::config::RunConfig;
use pimsim::convert::{convert_blob, manifest, verify_blob};
use pimsim::cost::{rearrangement_overhead_table, render_overhead_table};
use pimsim::memory::write_trace_ndjson;
use pimsim::pim::EngineFault;
use pimsim::report::{run_report, sweep, write_csv, SweepAxis};

#[derive(Parser)]
#[command(name = "pimsim", version, about = "PIM-enabled LPDDR simulator for on-device LLM inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a host-friendly weight blob into a PIM-aware image.
    Convert(ConvertArgs),
    /// Check that an image swizzle-copies back to the original blob.
    Verify(VerifyArgs),
    /// Evaluate one configuration and write its report.
    Run(RunArgs),
    /// Evaluate a configuration along one axis and write CSV.
    Sweep(SweepArgs),
    /// Run a seeded GEMV battery against the host oracle.
    GemvCheck(GemvCheckArgs),
    /// Print the analytical rearrangement overhead table.
    OverheadTable(ConfigSource),
}

/// A configuration file, or model and map presets.
#[derive(Args, Clone)]
struct ConfigSource {
    #[arg(long, conflicts_with_all = ["model", "map"])]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    map: Option<String>,
}

impl ConfigSource {
    fn load(&self, default_model: Option<&str>) -> anyhow::Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(RunConfig::from_toml(&text)?);
        }
        let Some(model) = self.model.as_deref().or(default_model) else {
            bail!("either --config or --model is required");
        };
        let map = self.map.as_deref().unwrap_or("s24plus");
        Ok(RunConfig::from_toml(&format!("[model]\npreset = {model:?}\n[map]\npreset = {map:?}\n"))?)
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Raw little-endian BF16 weights, every matrix column-major.
    #[arg(long, required_unless_present = "manifest_only")]
    blob: Option<PathBuf>,
    /// Image output path; the manifest goes to `<out>.manifest.json`.
    #[arg(long, required_unless_present = "manifest_only")]
    out: Option<PathBuf>,
    /// Print the manifest without reading or writing weights.
    #[arg(long)]
    manifest_only: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    blob: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct Parallelism {
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prefill timeline as JSON.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Integrity-check command trace as NDJSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    par: Parallelism,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// in_len, out_len or scenario.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    par: Parallelism,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Exact,
    Bf16,
}

#[derive(Args)]
struct GemvCheckArgs {
    /// Seed and input width are taken from here when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    jobs: u64,
    #[arg(long, value_enum, default_value = "exact")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 512)]
    max_m: u64,
    #[arg(long, default_value_t = 1024)]
    max_k: u64,
    /// Map the weights cacheable instead of non-cacheable.
    #[arg(long)]
    cacheable_weights: bool,
    #[arg(long, hide = true)]
    inject_mac_fault: bool,
    #[command(flatten)]
    par: Parallelism,
}

enum Failure {
    Invalid(anyhow::Error),
    Check(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Invalid(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn set_threads(par: &Parallelism) -> anyhow::Result<()> {
    if let Some(n) = par.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    let cfg = a.source.load(None)?;
    let map = cfg.map.address_map()?;
    if a.manifest_only {
        let (m, _) = manifest(&cfg.model, &map, cfg.map.policy())?;
        write_json(None, &m)?;
        return Ok(());
    }
    let (blob_path, out) = (a.blob.expect("required by clap"), a.out.expect("required by clap"));
    let (image, m) = convert_blob(&cfg.model, &map, cfg.map.policy(), &read(&blob_path)?)?;
    fs::write(&out, image).with_context(|| format!("writing {}", out.display()))?;
    let mut manifest_path = out.into_os_string();
    manifest_path.push(".manifest.json");
    write_json(Some(Path::new(&manifest_path)), &m)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let cfg = a.source.load(None)?;
    let map = cfg.map.address_map()?;
    let report = verify_blob(&cfg.model, &map, cfg.map.policy(), &read(&a.blob)?, &read(&a.image)?)?;
    write_json(None, &report)?;
    match &report.first_mismatch {
        None => Ok(()),
        Some((tag, m, k)) => Err(Failure::Check(format!("round trip differs at {tag} m={m} k={k}"))),
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    ConfigSource { config: Some(path.to_path_buf()), model: None, map: None }.load(None)
}

fn cmd_run(a: RunArgs) -> CmdResult {
    set_threads(&a.par)?;
    let cfg = load_config(&a.config)?;
    let artifacts = run_report(&cfg)?;
    write_json(a.out.as_deref(), &artifacts.report)?;
    if let Some(p) = &a.timeline {
        write_json(Some(p), &artifacts.timeline)?;
    }
    if let Some(p) = &a.trace {
        let mut out = output(Some(p))?;
        write_trace_ndjson(&artifacts.trace, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    set_threads(&a.par)?;
    let cfg = load_config(&a.config)?;
    let rows = sweep(&cfg, SweepAxis::parse(&a.axis)?, &a.values)?;
    write_csv(&rows, output(a.out.as_deref())?)?;
    Ok(())
}

fn cmd_gemv_check(a: GemvCheckArgs) -> CmdResult {
    set_threads(&a.par)?;
    let mut battery = BatteryConfig {
        seed: a.seed.unwrap_or(0),
        jobs: a.jobs,
        max_m: a.max_m,
        max_k: a.max_k,
        precision: match a.precision {
            PrecisionArg::Exact => Precision::Exact,
            PrecisionArg::Bf16 => Precision::Bf16,
        },
        cacheable_weights: a.cacheable_weights,
        fault: a.inject_mac_fault.then_some(EngineFault::RotateMacInput),
    };
    if let Some(path) = &a.config {
        let cfg = load_config(path)?;
        if cfg.model.hidden > 1024 {
            return Err(anyhow::anyhow!("model.hidden = {} exceeds the desk-scale limit of 1024", cfg.model.hidden).into());
        }
        battery.seed = a.seed.unwrap_or(cfg.run.seed);
        battery.max_k = battery.max_k.min(cfg.model.hidden);
    }
    if battery.max_m == 0 || battery.max_k == 0 {
        return Err(anyhow::anyhow!("--max-m and --max-k must be >= 1").into());
    }
    let report = run_battery(&battery)?;
    write_json(None, &report)?;
    match report.failures.first() {
        None => Ok(()),
        Some(f) => {
            let row = f.first_bad_m.map_or("outputs match".to_string(), |m| format!("first bad row m={m}"));
            Err(Failure::Check(format!(
                "{} of {} jobs failed; first: job {} (seed {}) {row}, trigger integrity {:?}",
                report.jobs - report.passed,
                report.jobs,
                f.spec.index,
                report.seed,
                f.integrity.status
            )))
        }
    }
}

fn cmd_overhead_table(source: ConfigSource) -> CmdResult {
    let cfg = source.load(Some("llama3.2-1b"))?;
    print!("{}", render_overhead_table(&rearrangement_overhead_table(&cfg.hw)));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GemvCheck(a) => cmd_gemv_check(a),
        Command::OverheadTable(a) => cmd_overhead_table(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
