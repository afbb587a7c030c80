use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use homeagent_core::eval::{
    load_dataset, report_json, report_table, run_experiment, Ablation, ExperimentSetup, LatencyClock, RunMode,
};
use homeagent_core::memory::TaskMemory;
use homeagent_core::pipeline::RunContext;
use homeagent_service::api::{router, AppState};
use homeagent_service::settings::{AssetArgs, ProviderArgs};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "homeagent", version, about = "Natural-language smart-home agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "HOMEAGENT_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Snapshot restored at startup (if present) and rewritten after every approval.
        #[arg(long, env = "HOMEAGENT_MEMORY")]
        memory_file: Option<PathBuf>,
        /// Static files served under /console.
        #[arg(long)]
        console_dir: Option<PathBuf>,
        #[command(flatten)]
        assets: AssetArgs,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Build a proposal for one instruction and print it as JSON.
    Run {
        instruction: String,
        /// Memory snapshot to consult.
        #[arg(long)]
        memory_file: Option<PathBuf>,
        #[command(flatten)]
        assets: AssetArgs,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Run evaluation experiments.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Inspect and move memory snapshots.
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Run a dataset in one mode and ablation.
    Run {
        /// JSONL dataset; defaults to <fixtures>/dataset/tasks.jsonl.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cold")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        #[arg(long, value_enum, default_value = "simulated")]
        clock: ClockArg,
        /// Where to write the JSON report; the table always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Snapshot read in warm mode; the final memory is written back to it.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[command(flatten)]
        assets: AssetArgs,
        #[command(flatten)]
        provider: ProviderArgs,
    },
}

#[derive(Debug, Subcommand)]
enum MemoryCommand {
    /// Write the node/edge graph view of a snapshot as JSON.
    Export {
        snapshot: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a snapshot and install it at a destination path.
    Import { source: PathBuf, destination: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Cold,
    Warm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    Nodecomp,
    Nomem,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClockArg {
    Simulated,
    Monotonic,
}

fn restore_or_empty(path: Option<&PathBuf>) -> Result<TaskMemory> {
    match path {
        Some(p) if p.exists() => TaskMemory::restore(p).with_context(|| format!("restoring {}", p.display())),
        _ => Ok(TaskMemory::new()),
    }
}

async fn serve(
    addr: SocketAddr,
    memory_file: Option<PathBuf>,
    console_dir: Option<PathBuf>,
    asset_args: AssetArgs,
    provider: ProviderArgs,
) -> Result<()> {
    let assets = asset_args.load()?;
    let config = asset_args.pipeline_config()?;
    let pipeline = match provider.gateway(&assets, &asset_args.fixtures)? {
        Some(gateway) => Some(assets.pipeline(config, gateway)?),
        None => {
            tracing::warn!("no model provider configured; instructions will be refused");
            None
        }
    };
    let memory = restore_or_empty(memory_file.as_ref())?;
    let state = Arc::new(AppState::new(pipeline, &assets, memory, memory_file));
    let mut app = router(state);
    if let Some(dir) = console_dir {
        app = app.nest_service("/console", tower_http::services::ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn run_once(
    instruction: &str,
    memory_file: Option<&PathBuf>,
    asset_args: &AssetArgs,
    provider: &ProviderArgs,
) -> Result<()> {
    let assets = asset_args.load()?;
    let gateway = provider.require_gateway(&assets, &asset_args.fixtures)?;
    let pipeline = assets.pipeline(asset_args.pipeline_config()?, gateway)?;
    let memory = restore_or_empty(memory_file)?;
    let mut prefs = assets.prefs.clone();
    let tables = prefs.tables(&assets.effects, &assets.bins, &assets.corpus).clone();
    let ctx = RunContext {
        home: &assets.home,
        memory: &memory,
        tables: &tables,
    };
    let proposal = pipeline.run("cli", instruction, ctx, &mut |e| {
        tracing::info!(stage = %e.stage, status = ?e.status, "{}", e.detail);
    });
    println!("{}", serde_json::to_string_pretty(&proposal)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_run(
    dataset: Option<PathBuf>,
    mode: ModeArg,
    ablation: AblationArg,
    clock: ClockArg,
    report: Option<PathBuf>,
    memory: Option<PathBuf>,
    asset_args: &AssetArgs,
    provider: &ProviderArgs,
) -> Result<()> {
    let assets = asset_args.load()?;
    let dataset_path = dataset.unwrap_or_else(|| asset_args.fixtures.join("dataset/tasks.jsonl"));
    let tasks = load_dataset(&dataset_path).with_context(|| format!("loading {}", dataset_path.display()))?;
    let setup = ExperimentSetup {
        assets: &assets,
        gateway: provider.require_gateway(&assets, &asset_args.fixtures)?,
        config: asset_args.pipeline_config()?,
        clock: match clock {
            ClockArg::Simulated => LatencyClock::Simulated,
            ClockArg::Monotonic => LatencyClock::Monotonic,
        },
    };
    let mode = match mode {
        ModeArg::Cold => RunMode::Cold,
        ModeArg::Warm => RunMode::Warm,
    };
    let ablation = match ablation {
        AblationArg::Full => Ablation::Full,
        AblationArg::Nodecomp => Ablation::NoDecomp,
        AblationArg::Nomem => Ablation::NoMem,
    };
    let snapshot = match (&memory, mode) {
        (Some(p), RunMode::Warm) => Some(TaskMemory::restore(p).with_context(|| format!("restoring {}", p.display()))?),
        _ => None,
    };
    let (result, final_memory) = run_experiment(&tasks, mode, ablation, &setup, snapshot)?;
    print!("{}", report_table(&result));
    if let Some(path) = report {
        std::fs::write(&path, report_json(&result)).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = memory {
        final_memory.persist(&path)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            addr,
            memory_file,
            console_dir,
            assets,
            provider,
        } => tokio::runtime::Runtime::new()?.block_on(serve(addr, memory_file, console_dir, assets, provider)),
        Command::Run {
            instruction,
            memory_file,
            assets,
            provider,
        } => run_once(&instruction, memory_file.as_ref(), &assets, &provider),
        Command::Eval {
            command:
                EvalCommand::Run {
                    dataset,
                    mode,
                    ablation,
                    clock,
                    report,
                    memory,
                    assets,
                    provider,
                },
        } => eval_run(dataset, mode, ablation, clock, report, memory, &assets, &provider),
        Command::Memory { command } => match command {
            MemoryCommand::Export { snapshot, out } => {
                let memory = TaskMemory::restore(&snapshot)?;
                let text = serde_json::to_string_pretty(&memory.export_graph())?;
                match out {
                    Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                    None => writeln!(std::io::stdout(), "{text}")?,
                }
                Ok(())
            }
            MemoryCommand::Import { source, destination } => {
                let memory =
                    TaskMemory::restore(&source).with_context(|| format!("validating {}", source.display()))?;
                memory.persist(&destination)?;
                let counts = memory.counts();
                eprintln!("installed snapshot with {} task node(s)", counts.tasks);
                Ok(())
            }
        },
    }
}
