mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cosplace::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cosplace", version, about = "Group-partitioned place recognition: partition, train, evaluate")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run config (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the small synthetic preset instead of the full-scale defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    pub desk: bool,
    /// Seed for every random stream (training and synthetic worlds).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed-order reductions: bitwise-reproducible output.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PartitionArgs {
    /// Class cell size M in meters.
    #[arg(long)]
    pub cell_size: Option<f64>,
    /// Heading bin width alpha in degrees.
    #[arg(long)]
    pub heading_bin: Option<f64>,
    /// Spatial group modulus N.
    #[arg(long)]
    pub spatial_groups: Option<u32>,
    /// Heading group modulus L.
    #[arg(long)]
    pub heading_groups: Option<u32>,
    /// Drop classes with fewer images.
    #[arg(long)]
    pub min_images: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Add UTM east/north (and zone) columns to a lat/lon manifest.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Assign images to classes and groups; print statistics.
    Partition {
        /// Defaults to `paths.manifest` of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `paths.partition` of the config.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        layout: PartitionArgs,
    },
    /// Train the descriptor model, one group per epoch.
    Train {
        /// Training images (or all database images when no validation
        /// files are given). Defaults to `paths.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `paths.features`.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Precomputed partition of the training manifest. Defaults to `paths.partition`.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long, requires = "val_queries")]
        val_db: Option<PathBuf>,
        #[arg(long, requires = "val_db")]
        val_queries: Option<PathBuf>,
        /// Defaults to `paths.out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        layout: PartitionArgs,
        /// Number of groups trained (G).
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from `<out-dir>/training.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Recall@K of one or more descriptor sources.
    Eval {
        /// Exported model to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Add the random-init model of the config as a baseline row.
        #[arg(long)]
        baseline: bool,
        /// Store of ground-truth descriptors (synthetic worlds) to add as an oracle row.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        db_manifest: PathBuf,
        #[arg(long)]
        db_features: PathBuf,
        #[arg(long)]
        query_manifest: PathBuf,
        #[arg(long)]
        query_features: PathBuf,
        /// Positive-match distance in meters.
        #[arg(long)]
        threshold: Option<f64>,
        /// Comma-separated Ks.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Also write the reports as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic city as manifests and feature stores.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the synthetic experiment for each value of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        dimension: SweepDimension,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// CSV output (stdout when absent).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDimension {
    #[value(name = "M")]
    M,
    #[value(name = "alpha")]
    Alpha,
    #[value(name = "N")]
    N,
    #[value(name = "L")]
    L,
    #[value(name = "groups_used")]
    GroupsUsed,
}

impl SweepDimension {
    pub fn name(self) -> &'static str {
        match self {
            Self::M => "M",
            Self::Alpha => "alpha",
            Self::N => "N",
            Self::L => "L",
            Self::GroupsUsed => "groups_used",
        }
    }
}

/// Failure of a command: stable code plus a one-line message.
#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
    pub exit: u8,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: "E_USAGE", message: message.into(), exit: 2 }
    }
}

impl From<cosplace::Error> for Failure {
    fn from(e: cosplace::Error) -> Self {
        Self { code: e.code(), message: e.to_string(), exit: 1 }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        cosplace::Error::from(e).into()
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn base_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&g.config, g.desk) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::desk(),
        (None, false) => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if g.deterministic {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let cfg = base_config(&cli.global)?;
    commands::dispatch(cli.command, cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error[E_USAGE]: {}", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, one_line(&f.message));
            ExitCode::from(f.exit)
        }
    }
}
