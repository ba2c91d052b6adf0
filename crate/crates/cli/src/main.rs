use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use histobench::corruption::parse_param_overrides;
use histobench::harness::{
    corrupt_stream, load_manifest, render, replay, run_benchmark, write_dataset, BenchmarkConfig, BenchmarkPlan,
    CalibrationSetup, CorruptionChain, Method, ReportFormat, RunReport, TemplateSource,
};
use histobench::latte::{CalibrationConfig, TemplateSet};
use histobench::synthetic::{class_names, texture_dataset, TextureParams};
use histobench::{CorruptionKind, CorruptionSpec};

#[derive(Parser)]
#[command(
    name = "histobench",
    version,
    about = "Histopathology corruption benchmark with test-time adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt every image of a manifest and write PNGs plus a new manifest.
    Corrupt(CorruptArgs),
    /// Evaluate a grid of corruptions x methods.
    Benchmark(BenchmarkArgs),
    /// Run one corruption with one method and print its loss trace.
    Adapt(AdaptArgs),
    /// Render a report as an accuracy grid.
    Report(ReportArgs),
    /// Re-run a report from its echo and check every cell matches.
    Replay(ReplayArgs),
    /// Write the synthetic checker/blob dataset, a calibration set and a config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long)]
    seed: u64,
    /// Parameter override `name=value`; repeatable.
    #[arg(long = "param", value_name = "K=V")]
    params: Vec<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated kinds, `a+b` for a chain, or `all` (clean plus the ten kinds).
    #[arg(long, default_value = "all")]
    kinds: String,
    #[arg(long, default_value = "source,tent,latte")]
    methods: String,
    #[arg(long)]
    seed: u64,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "latte")]
    method: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    calibration: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

enum Outcome {
    Clean,
    Partial,
}

fn parse_kinds(kinds: &str, seed: u64) -> Result<Vec<CorruptionChain>> {
    if kinds.trim() == "all" {
        return Ok(std::iter::once(CorruptionKind::None)
            .chain(CorruptionKind::ALL)
            .map(|k| CorruptionSpec::new(k, seed).into())
            .collect());
    }
    Ok(kinds
        .split(',')
        .map(|k| CorruptionChain::parse(k, seed))
        .collect::<Result<Vec<_>, _>>()?)
}

fn parse_methods(methods: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for m in methods.split(',') {
        let m = m.trim().parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn load_config(path: Option<&Path>) -> Result<BenchmarkConfig> {
    match path {
        Some(p) => Ok(BenchmarkConfig::load(p)?),
        None => Ok(BenchmarkConfig::default()),
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).with_context(|| format!("cannot resolve {}", path.display()))
}

fn finish(report: &RunReport, path: &Path) -> Result<Outcome> {
    report.write(path)?;
    print!("{}", render(report, ReportFormat::Table));
    Ok(if report.has_failures() {
        Outcome::Partial
    } else {
        Outcome::Clean
    })
}

fn corrupt(a: CorruptArgs) -> Result<Outcome> {
    let manifest = load_manifest(&a.manifest)?;
    let mut spec = CorruptionSpec::new(a.kind.parse()?, a.seed);
    spec.params = parse_param_overrides(&a.params)?;
    let mut errors = Vec::new();
    let samples = corrupt_stream(&manifest, spec)?.filter_map(|item| match item {
        Ok(s) => Some(s),
        Err(e) => {
            errors.push(e);
            None
        }
    });
    let written = write_dataset(&a.out, &manifest.class_names, samples)?;
    println!("wrote {} images to {}", written.len(), a.out.display());
    for e in &errors {
        eprintln!("skipped '{}': {}", e.id, e.message);
    }
    Ok(if errors.is_empty() {
        Outcome::Clean
    } else {
        Outcome::Partial
    })
}

fn benchmark(a: BenchmarkArgs) -> Result<Outcome> {
    let manifest = load_manifest(&a.manifest)?;
    let plan = BenchmarkPlan {
        manifest: absolute(&a.manifest)?,
        corruptions: parse_kinds(&a.kinds, a.seed)?,
        methods: parse_methods(&a.methods)?,
        config: load_config(a.config.as_deref())?,
    };
    let report = run_benchmark(&manifest, &plan, a.seed)?;
    finish(&report, &a.report)
}

fn adapt(a: AdaptArgs) -> Result<Outcome> {
    let manifest = load_manifest(&a.manifest)?;
    let plan = BenchmarkPlan {
        manifest: absolute(&a.manifest)?,
        corruptions: vec![CorruptionChain::parse(&a.kind, a.seed)?],
        methods: vec![a.method.parse()?],
        config: load_config(a.config.as_deref())?,
    };
    let report = run_benchmark(&manifest, &plan, a.seed)?;
    let cell = &report.cells[0];
    for (i, loss) in cell.loss_trace.iter().enumerate() {
        println!("iteration {i:>3}  loss {loss:.6}");
    }
    finish(&report, &a.report)
}

fn show(a: ReportArgs) -> Result<Outcome> {
    let report = RunReport::load(&a.input)?;
    print!("{}", render(&report, a.format.parse()?));
    Ok(Outcome::Clean)
}

fn rerun(a: ReplayArgs) -> Result<Outcome> {
    let original = RunReport::load(&a.input)?;
    let again = replay(&original)?;
    let mismatched: Vec<String> = original
        .cells
        .iter()
        .zip(&again.cells)
        .filter(|(x, y)| !x.same_result(y))
        .map(|(x, _)| format!("{} / {}", x.corruption, x.method))
        .collect();
    if !mismatched.is_empty() || !original.same_results(&again) {
        bail!("replay differs from the report: {}", mismatched.join(", "));
    }
    println!("replay matches all {} cells", original.cells.len());
    Ok(Outcome::Clean)
}

fn synth(a: SynthArgs) -> Result<Outcome> {
    let params = TextureParams::default();
    let names = class_names();
    let data = texture_dataset(a.count, &params, a.seed, "tex")?;
    write_dataset(a.out.join("data"), &names, data.into_iter().map(Into::into))?;
    let held_out = texture_dataset(a.calibration, &params, a.seed.wrapping_add(1), "cal")?;
    write_dataset(a.out.join("calibration"), &names, held_out.into_iter().map(Into::into))?;
    let config = BenchmarkConfig {
        templates: Some(TemplateSource::Inline(
            TemplateSet::default_set().take(4)?.templates().to_vec(),
        )),
        calibration: Some(CalibrationSetup {
            manifest: PathBuf::from("calibration/manifest.jsonl"),
            fit: CalibrationConfig {
                steps: 150,
                label_smoothing: 0.5,
                ..CalibrationConfig::default()
            },
        }),
        ..BenchmarkConfig::default()
    };
    let path = a.out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    println!(
        "wrote {} images to {}, {} calibration images and {}",
        a.count,
        a.out.join("data").display(),
        a.calibration,
        path.display()
    );
    Ok(Outcome::Clean)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Corrupt(a) => corrupt(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Adapt(a) => adapt(a),
        Command::Report(a) => show(a),
        Command::Replay(a) => rerun(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => {
            eprintln!("some items or cells failed; see the report");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
