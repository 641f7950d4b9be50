//! Command-line front end: argument parsing, exit codes and dispatch.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error (missing or
//! malformed inputs), 3 runtime failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::dataset::DatasetError;
use crate::loop_trainer::LoopError;
use crate::relu_net::NetError;
use crate::substrate::SubstrateError;
use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    /// Prefixes the message with the pipeline phase that failed.
    pub fn phase(self, name: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("[{name}] {m}")),
            CliError::Data(m) => CliError::Data(format!("[{name}] {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("[{name}] {m}")),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Classes(m) => CliError::Config(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Container(c) => CliError::Data(c.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<SubstrateError> for CliError {
    fn from(e: SubstrateError) -> Self {
        match e {
            SubstrateError::Config(m) => CliError::Config(m),
            SubstrateError::Container(c) => CliError::Data(c.to_string()),
            SubstrateError::SeedMismatch { .. } => CliError::Data(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Options(m) => CliError::Config(m),
            CalibrationError::Container(c) => CliError::Data(c.to_string()),
            CalibrationError::SeedMismatch { .. } => CliError::Data(e.to_string()),
            CalibrationError::Substrate(s) => s.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Config(m) => CliError::Config(m),
            LoopError::Capacity { .. } | LoopError::Topology(_) => CliError::Config(e.to_string()),
            LoopError::Calibration(c) => c.into(),
            LoopError::Substrate(s) => s.into(),
            LoopError::Net(n) => n.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "itl",
    version,
    about = "Spiking MNIST classifier on a simulated analog substrate"
)]
pub struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory holding every artifact (overrides `run_dir`).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// MNIST IDX directory (overrides `data.mnist_dir`).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sample-parallel simulation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reduce MNIST to the configured classes and cache the split.
    Prepare {
        /// Comma-separated digit list, e.g. `0,1`.
        #[arg(long)]
        classes: Option<String>,
    },
    /// Train the software ReLU network.
    TrainSw {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fabricate the substrate and calibrate every circuit.
    Calibrate {
        #[arg(long)]
        fab_seed: Option<u64>,
    },
    /// Population spread before and after calibration.
    CalibReport {
        #[arg(long)]
        fab_seed: Option<u64>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Convert software weights to a substrate configuration.
    Convert {
        #[arg(long)]
        sw_checkpoint: Option<PathBuf>,
        #[arg(long)]
        fab_seed: Option<u64>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// In-the-loop training on the substrate.
    TrainItl {
        #[command(flatten)]
        itl: ItlArgs,
        #[arg(long)]
        sw_checkpoint: Option<PathBuf>,
        #[arg(long)]
        hw_config: Option<PathBuf>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Test accuracy of a substrate configuration.
    EvalHw {
        #[arg(long)]
        hw_config: Option<PathBuf>,
        /// Evaluate this many test images (the ITL subset) instead of all.
        #[arg(long)]
        subset: Option<usize>,
        /// ITL iteration whose write is reproduced (trial noise).
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Output file name inside the run directory.
        #[arg(long, default_value = "eval_hw.json")]
        out: PathBuf,
    },
    /// All phases: software training, calibration, conversion, ITL.
    Pipeline {
        #[arg(long)]
        skip_itl: bool,
        /// Seed bundles; bundle k shifts master and fabrication seeds by k.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        itl: ItlArgs,
    },
    /// Spike raster of N test samples per class.
    Raster {
        #[arg(long)]
        hw_config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        per_class: usize,
        /// ITL iteration whose write is reproduced; defaults to the last.
        #[arg(long)]
        iteration: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ItlArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
}

impl ItlArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.iterations {
            cfg.itl.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.itl.batch_size = v;
        }
        if let Some(v) = self.eta {
            cfg.itl.eta = v;
        }
    }
}

/// Resolved configuration: file, then global overrides, then command flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(d) = &cli.data_dir {
        cfg.data.mnist_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Prepare {
            classes: Some(list),
        } => {
            cfg.data.classes = crate::dataset::ClassSet::parse(list)?.digits().to_vec();
            let n = cfg.data.classes.len();
            if let Some(last) = cfg.software.layer_sizes.last_mut() {
                *last = n;
            }
        }
        Command::TrainSw { steps: Some(s) } => cfg.software.steps = *s,
        Command::Calibrate { fab_seed: Some(f) }
        | Command::CalibReport {
            fab_seed: Some(f), ..
        }
        | Command::Convert {
            fab_seed: Some(f), ..
        } => cfg.substrate.fab_seed = *f,
        Command::TrainItl { itl, .. } | Command::Pipeline { itl, .. } => itl.apply(&mut cfg),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    commands::dispatch(&cli.command, &cfg)
}
