use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pbo_core::config::Preset;
use pbo_lab::figure::{figure, FigureName};
use pbo_lab::run::{run, RunArgs};
use pbo_lab::verify::run_checks;
use pbo_lab::CliError;

#[derive(Parser)]
#[command(
    name = "pbo-lab",
    version,
    about = "Projected Bellman operator experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a configuration.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// quick or paper; overrides the configuration's preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Write plot data (CSV and SVG) for fig4, fig6, fig7 or fig8.
    Figure {
        name: String,
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            preset,
        } => {
            let preset = match preset.as_deref() {
                None => None,
                Some(p) => Some(Preset::parse(p).ok_or_else(|| {
                    CliError::Usage(format!("unknown preset `{p}`; expected quick or paper"))
                })?),
            };
            let dir = run(&RunArgs {
                config,
                seed,
                out,
                preset,
            })?;
            println!("wrote {}", dir.display());
        }
        Command::Figure { name, results, out } => {
            let fig = FigureName::parse(&name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown figure `{name}`; expected fig4, fig6, fig7 or fig8"
                ))
            })?;
            let written = figure(fig, &results, out.as_deref())?;
            println!(
                "wrote {} rows to {} and {}",
                written.rows,
                written.csv.display(),
                written.svg.display()
            );
        }
        Command::Verify => {
            let checks = run_checks();
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(CliError::Failed(format!(
                    "{failed} of {} checks failed",
                    checks.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
