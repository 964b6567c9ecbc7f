//! `lcfl` experiment runner.
//!
//! Exit status: 0 on success, 2 when a configuration or the command line is
//! rejected, 1 when a run fails after validation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use lcfl::scenario::{self, ScenarioConfig, PRESETS};
use lcfl::LcflError;

#[derive(Parser)]
#[command(
    name = "lcfl",
    version,
    about = "Loosely coupled federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in preset.
    Run {
        /// Path to a TOML scenario, or the name of a preset.
        config: String,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of repeats.
        #[arg(long)]
        repeats: Option<usize>,
        /// Output directory. Defaults to `output` from the config, else
        /// `$LCFL_OUT_ROOT/<name>`, else `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs side by side.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Inspect built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset's TOML source.
    Show {
        name: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<LcflError> for Failure {
    fn from(e: LcflError) -> Self {
        match e {
            LcflError::Config(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn load(config: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(config);
    if path.exists() {
        return Ok(ScenarioConfig::from_path(path)?);
    }
    if PRESETS.iter().any(|p| p.name == config) {
        return Ok(ScenarioConfig::preset(config)?);
    }
    Err(Failure::Config(anyhow::anyhow!(
        "'{config}' is neither a readable file nor a preset (see `lcfl presets list`)"
    )))
}

fn run(
    config: &str,
    seed: Option<u64>,
    repeats: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(r) = repeats {
        if r == 0 {
            return Err(Failure::Config(anyhow::anyhow!(
                "--repeats must be positive"
            )));
        }
        cfg.repeats = r;
    }
    let out = out.unwrap_or_else(|| cfg.default_output());
    let summary = scenario::run(&cfg, &out)
        .with_context(|| format!("running '{}'", cfg.name))
        .map_err(Failure::Runtime)?;
    print!("{}", summary.to_text());
    println!("output = {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            seed,
            repeats,
            out,
        } => run(&config, seed, repeats, out),
        Command::Compare { dirs, format } => {
            let rows = scenario::compare(&dirs).map_err(|e| Failure::Runtime(e.into()))?;
            match format {
                Format::Csv => print!("{}", scenario::render_csv(&rows)),
                Format::Table => print!("{}", scenario::render_table(&rows)),
            }
            Ok(())
        }
        Command::Presets { action } => {
            match action {
                PresetAction::List => {
                    let width = PRESETS.iter().map(|p| p.name.len()).max().unwrap_or(0);
                    for p in PRESETS {
                        println!("{:<width$}  {}", p.name, p.summary);
                    }
                }
                PresetAction::Show { name } => {
                    let p = PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
                        Failure::Config(anyhow::anyhow!("unknown preset '{name}'"))
                    })?;
                    print!("{}", p.source);
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
