use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdma_core::scenario::{self, Axis, ScenarioConfig, ScenarioError};
use tdma_core::trace::write_atomic;
use tdma_core::verifier::{verify_trace, VerifyError};

/// Self-stabilizing TDMA slot assignment over a write-all-with-collision channel.
#[derive(Parser)]
#[command(name = "wac-tdma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its summary.
    Run {
        config: PathBuf,
        /// Trace destination, overriding the scenario's `trace_path`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Summary destination, overriding the scenario's `summary_path`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run the cartesian product of parameter overrides and emit CSV.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...` or `key=lo..hi`; repeatable.
        #[arg(long, value_name = "KEY=VALUES")]
        vary: Vec<String>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a trace offline and print its summary.
    Verify { trace: PathBuf },
    /// Print the topology a scenario builds.
    DumpTopology { config: PathBuf },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Self {
        let code = match e {
            VerifyError::Io(_) => 3,
            VerifyError::Parse { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("i/o: {e}"),
    }
}

fn print(s: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes())
        .and_then(|_| out.flush())
        .map_err(io_failure)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wac-tdma: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, trace, summary } => {
            let mut c = ScenarioConfig::load(&config)?;
            if trace.is_some() {
                c.trace_path = trace;
            }
            if summary.is_some() {
                c.summary_path = summary;
            }
            let s = scenario::run(&c)?;
            print(&(serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"))?;
            if let Some(reason) = s.aborted {
                return Err(Failure {
                    code: 2,
                    message: format!("aborted: {reason}"),
                });
            }
            Ok(())
        }
        Command::Sweep { config, vary, out } => {
            let base = ScenarioConfig::load(&config)?;
            let axes = vary.iter().map(|v| v.parse::<Axis>()).collect::<Result<Vec<_>, _>>()?;
            let rows = scenario::sweep(&base, &axes);
            let csv = scenario::sweep_csv(&rows);
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes()).map_err(io_failure),
                None => print(&csv),
            }
        }
        Command::Verify { trace } => {
            let f = std::fs::File::open(&trace).map_err(io_failure)?;
            let s = verify_trace(BufReader::new(f))?;
            print(&(serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"))
        }
        Command::DumpTopology { config } => {
            let c = ScenarioConfig::load(&config)?;
            print(&c.topology()?.dump())
        }
    }
}
