use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use synthsat_core::pipeline::{
    apply_env_overrides, describe_scenario, parse_config, run_scenario, PipelineError, ScenarioConfig,
};
use synthsat_core::synthesis::MockServer;

/// Synthetic overhead imagery of notional nuclear facilities.
#[derive(Parser)]
#[command(name = "synthsat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write products plus manifest.
    Generate {
        config: PathBuf,
        /// Override the configured event worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the acquisition plan without writing anything.
    Plan { config: PathBuf },
    /// Parse and validate a scenario config.
    Validate { config: PathBuf },
    /// Serve the deterministic mock synthesis backend over HTTP.
    ServeMock {
        #[arg(long, default_value_t = 8731)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

const USER_ERROR: u8 = 1;
const SYSTEM_ERROR: u8 = 2;

fn exit_for(e: &PipelineError) -> ExitCode {
    match e {
        PipelineError::FatalIo { .. } => ExitCode::from(SYSTEM_ERROR),
        _ => ExitCode::from(USER_ERROR),
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(USER_ERROR)
    })?;
    let mut cfg = parse_config(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        exit_for(&e)
    })?;
    apply_env_overrides(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            load(&config)?;
            println!("{}: ok", config.display());
        }
        Command::Plan { config } => {
            let cfg = load(&config)?;
            let plan = describe_scenario(&cfg).map_err(|e| {
                eprintln!("error: {e}");
                exit_for(&e)
            })?;
            print!("{plan}");
        }
        Command::Generate { config, workers, output } => {
            let mut cfg = load(&config)?;
            if workers.is_some() {
                cfg.workers = workers;
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            let out = run_scenario(&cfg).map_err(|e| {
                eprintln!("error: {e}");
                exit_for(&e)
            })?;
            for ev in out.manifest.events.iter().filter(|e| e.error.is_some()) {
                eprintln!("warning: event {}: {}", ev.event.index, ev.error.as_deref().unwrap_or_default());
            }
            println!(
                "{} events ({} reused, {} failed); manifest {} sha256 {}",
                out.manifest.events.len(),
                out.reused_events,
                out.failed_events,
                cfg.output_dir.join("manifest.json").display(),
                out.manifest_digest
            );
        }
        Command::ServeMock { port, host, threads } => {
            let server = MockServer::start(&format!("{host}:{port}"), threads.max(1)).map_err(|e| {
                eprintln!("error: cannot bind {host}:{port}: {e}");
                ExitCode::from(SYSTEM_ERROR)
            })?;
            println!("mock backend listening on {}", server.url());
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
