//! `lab`: run, list and validate experiment specs.

mod output;
mod scenarios;
mod spec;

use std::env;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use output::{sha256_hex, write_all, Manifest, Versions};
use scenarios::{registry, RunContext};
use spec::ExperimentSpec;

/// Output directory used when neither `--out` nor the experiment file names one.
const OUTPUT_ENV: &str = "LAB_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "lab-output";

const EXIT_ERROR: u8 = 1;
const EXIT_VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(name = "lab", version, about = "Run diffusion-on-manifold experiments from TOML specs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a spec and write CSV/JSON artifacts plus manifest.json.
    Run {
        spec: PathBuf,
        /// Output directory; overrides the experiment file and LAB_OUTPUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate independent sweep points in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Print scenario names with one-line descriptions.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Check a spec without running it.
    Validate { spec: PathBuf },
}

fn load(path: &Path) -> Result<(ExperimentSpec, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).context("spec is not UTF-8")?;
    Ok((ExperimentSpec::parse(&text)?, bytes))
}

fn output_dir(flag: Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    flag.or_else(|| spec.output_dir.clone())
        .or_else(|| env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn run(path: &Path, out: Option<PathBuf>, parallel: bool) -> Result<bool> {
    let (spec, raw) = load(path)?;
    let scenario = scenarios::validate(&spec)?;
    let dir = output_dir(out, &spec);
    let start = Instant::now();
    let mut artifacts = scenario.run(&spec, &RunContext { parallel })?;
    artifacts.add("spec.toml", raw.clone());
    let files = write_all(&dir, &artifacts)?;
    let manifest = Manifest {
        scenario: spec.scenario.clone(),
        schema_version: spec.schema_version,
        spec_sha256: sha256_hex(&raw),
        seed: spec.seed,
        versions: Versions::current(),
        parallel,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        verdict: if artifacts.violated { "bound_violation" } else { "ok" },
        files,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes).context("writing manifest.json")?;
    println!("{}: {} files in {} ({})", spec.scenario, manifest.files.len() + 1, dir.display(), manifest.verdict);
    Ok(artifacts.violated)
}

fn list(as_json: bool) -> Result<()> {
    let reg = registry();
    let mut out = io::stdout().lock();
    let written = if as_json {
        let items: Vec<_> = reg.iter().map(|(name, s)| json!({ "name": name, "description": s.description() })).collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&items)?)
    } else {
        let width = reg.names().iter().map(String::len).max().unwrap_or(0);
        reg.iter().try_for_each(|(name, s)| writeln!(out, "{name:width$}  {}", s.description()))
    };
    match written {
        // A closed pipe (`lab list | head`) is not an error.
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { spec, out, parallel } => run(&spec, out, parallel),
        Command::List { json } => list(json).map(|_| false),
        Command::Validate { spec } => load(&spec).and_then(|(s, _)| scenarios::validate(&s)).map(|s| {
            println!("{}: ok", s.name());
            false
        }),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_VIOLATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
