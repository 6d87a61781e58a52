use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use claeo_cli::{execute, scenarios, CliError, RunSpec, Scenario};

#[derive(Parser)]
#[command(name = "claeo", version, about = "Concurrent-learning observer and actor-critic simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario or a config file.
    Run {
        target: String,
        /// Output directory; overrides CLAEO_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { path: PathBuf },
    /// List the built-in scenarios.
    ListScenarios,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("CLAEO_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("claeo-out"))
}

fn load(target: &str) -> Result<RunSpec, CliError> {
    match Scenario::from_id(target) {
        Some(s) if !Path::new(target).exists() => Ok(RunSpec::preset(s)),
        _ => Ok(RunSpec::from_file(Path::new(target))?),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::ListScenarios => {
            for s in Scenario::ALL {
                println!("{:<13} {}", s.id(), s.description());
            }
            Ok(0)
        }
        Command::Validate { path } => {
            let spec = RunSpec::from_file(&path)?;
            scenarios::validate(&spec)?;
            println!("{}: ok ({})", path.display(), spec.scenario);
            Ok(0)
        }
        Command::Run { target, out } => {
            let spec = load(&target)?;
            let report = execute(&spec, &out_dir(out))?;
            for (k, v) in &report.manifest.metrics {
                println!("{k} = {v}");
            }
            for w in &report.manifest.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(e) = &report.manifest.error {
                eprintln!("error: {}", e.message);
            }
            if let Some(path) = report.manifest.outputs.get("manifest") {
                println!("manifest: {path}");
            }
            Ok(report.exit_code())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
