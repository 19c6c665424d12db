//! `fedsim`: generate graphs, partition them, run federations and analyze the results.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{GenArgs, PartitionArgs, TrainArgs};
use crate::config::{split_overrides, Override};
use crate::error::{CliError, Result};

/// Any `--section.key=value` flag overrides the matching config entry.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Graph federated learning simulator")]
struct Cli {
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a cSBM graph from the `[csbm]` config section.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a graph into client node sets.
    Partition {
        #[arg(long)]
        graph: PathBuf,
        /// `non_overlapping` or `overlapping`.
        #[arg(long, default_value = "non_overlapping")]
        mode: String,
        /// Number of clients M.
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write each client subgraph as `client_<i>.json`.
        #[arg(long)]
        write_clients: bool,
    },
    /// Run a federation from the `[federation]` and `[data]` config sections.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write basis angles, clamp flags and signatures per client.
        #[arg(long)]
        dump_bases: bool,
        /// Write every round's collaboration matrices.
        #[arg(long)]
        dump_collab: bool,
    },
    /// Diagnostics on graphs, clients and trained models.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Edge, node, adjusted and train-estimated homophily of a graph.
    Homophily {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity matrix and similar/complementary pair ratios of the configured clients.
    Ratios {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectral energy profile of a trained client model, as CSV.
    Profile {
        /// The client's own graph.
        #[arg(long)]
        graph: PathBuf,
        /// `models.json` from a training run.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Laplacian frequency component and heterogeneity of trained models.
    Heterogeneity {
        #[arg(long)]
        models: PathBuf,
        /// JSON `M x M` collaboration matrix; uniform when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging() {
    let level = match std::env::var("FEDSIM_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn dispatch(command: Command, overrides: &[Override]) -> Result<()> {
    match command {
        Command::Gen { config, seed, out } => {
            let path = commands::cmd_gen(GenArgs {
                config: config.as_deref(),
                overrides,
                seed,
                out: &out,
            })?;
            log::info!("wrote {}", path.display());
        }
        Command::Partition {
            graph,
            mode,
            clients,
            seed,
            out,
            write_clients,
        } => {
            let path = commands::cmd_partition(PartitionArgs {
                graph: &graph,
                mode: &mode,
                clients,
                seed,
                out: &out,
                write_clients,
            })?;
            log::info!("wrote {}", path.display());
        }
        Command::Train {
            config,
            seed,
            out,
            dump_bases,
            dump_collab,
        } => {
            commands::cmd_train(TrainArgs {
                config: &config,
                overrides,
                seed,
                out: &out,
                dump_bases,
                dump_collab,
            })?;
        }
        Command::Analyze { what } => match what {
            Analysis::Homophily { graph, out } => {
                commands::cmd_analyze_homophily(&graph, out.as_deref())?
            }
            Analysis::Ratios { config, out } => {
                commands::cmd_analyze_ratios(&config, overrides, out.as_deref())?
            }
            Analysis::Profile {
                graph,
                models,
                client,
                out,
            } => commands::cmd_analyze_profile(&graph, &models, client, out.as_deref())?,
            Analysis::Heterogeneity {
                models,
                weights,
                out,
            } => commands::cmd_analyze_heterogeneity(&models, weights.as_deref(), out.as_deref())?,
        },
    }
    Ok(())
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text).trim_end();
            return Err(CliError::Usage(text.to_string()));
        }
    };
    let uses_overrides = matches!(
        cli.command,
        Command::Gen { .. }
            | Command::Train { .. }
            | Command::Analyze {
                what: Analysis::Ratios { .. }
            }
    );
    if !overrides.is_empty() && !uses_overrides {
        return Err(CliError::Usage(
            "this command takes no config overrides".into(),
        ));
    }
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?
            .install(|| dispatch(cli.command, &overrides)),
        None => dispatch(cli.command, &overrides),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
