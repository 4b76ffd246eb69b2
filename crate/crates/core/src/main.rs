//! `databright` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use databright::cli::{run_scenario, verify_report, CliError, RunReport};

#[derive(Parser)]
#[command(
    name = "databright",
    version,
    about = "Data and compute market simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and print its report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check the invariants of a saved report.
    Verify { report: PathBuf },
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
        } => {
            let text = read(&scenario)?;
            let rendered = run_scenario(&text, seed)?.render();
            match out {
                Some(path) => std::fs::write(&path, rendered)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
        Command::Verify { report } => {
            let text = read(&report)?;
            let parsed = RunReport::parse(&text)
                .map_err(|e| CliError::Io(format!("{}: {e}", report.display())))?;
            let violations = verify_report(&parsed);
            if violations.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for v in &violations {
                    println!("violation: {v}");
                }
                Err(CliError::Io(format!("{} violation(s)", violations.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
