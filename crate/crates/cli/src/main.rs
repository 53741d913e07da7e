use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compiso_core::pipeline::Method;
use compiso_core::Metric;

mod commands;
mod error;

use error::{exit, CliError};

/// Competitive-isolation experiment design and DID estimation.
#[derive(Debug, Parser)]
#[command(name = "compiso", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Run config (or campaign spec for `campaign`). Defaults to
    /// `<output>/config.json` once `simulate` has written it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Market seed for `simulate`, base seed for `campaign`, KL seed for
    /// `partition` on a bare graph. Later phases reuse the simulated seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Working directory for artifacts.
    #[arg(long, short, global = true, default_value = "compiso-out")]
    pub output: PathBuf,

    /// Outcome metric: orders or gmv.
    #[arg(long, global = true)]
    pub metric: Option<Metric>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a market and write the catalog and panels.
    Simulate {
        /// Bundled scenario name or scenario JSON path, used when no
        /// `--config` is given.
        #[arg(long)]
        scenario: Option<String>,
        /// Skip the configured price treatment.
        #[arg(long)]
        untreated: bool,
    },
    /// Build the competition graph from the simulated history.
    BuildGraph {
        /// Panel directory (default `<output>/panel`).
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Bipartition the competition graph.
    Partition {
        /// Graph directory (default `<output>/graph`).
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Mutual-exclusion threshold on normalized cut capacity
        /// (default from the config, else 0.001).
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Match every target with homogeneous items from the opposite side.
    Match {
        #[arg(long, default_value = "ci_ctcvr")]
        method: Method,
        /// Partition CSV (default `<output>/partition.csv`).
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Run the experiment and estimate the effect for each method.
    Estimate {
        #[arg(long = "method", default_value = "ci_ctcvr")]
        methods: Vec<Method>,
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Match CSV used for ci_ctcvr (default `<output>/matches.csv`).
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Run a multi-seed campaign from a spec file.
    Campaign,
    /// Re-check a campaign report and re-emit its tables.
    Report {
        /// `report.json` written by `campaign`.
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.workers.filter(|n| *n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Simulate { scenario, untreated } => commands::simulate(g, scenario.as_deref(), untreated),
        Command::BuildGraph { panel } => commands::build_graph(g, panel),
        Command::Partition { graph, epsilon } => commands::partition(g, graph, epsilon),
        Command::Match { method, partition } => commands::match_targets(g, method, partition),
        Command::Estimate { methods, partition, matches } => commands::estimate(g, &methods, partition, matches),
        Command::Campaign => commands::campaign(g),
        Command::Report { input } => commands::report(g, &input),
    }
}
