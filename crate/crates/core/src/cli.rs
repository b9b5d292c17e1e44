//! The `act` experiment runner.
//!
//! All commands share one config file and one output directory:
//!
//! | file | written by |
//! |---|---|
//! | `source.actd`, `target.actd`, `test.actd` | `generate` |
//! | `encoder.ckpt`, `trace.csv` | `pretrain` |
//! | `eval.csv` | `evaluate` |
//! | `diagnostics.txt`, `alignment_bound.csv` | `diagnose` |
//!
//! Exit codes: 0 ok, 2 config, 3 numeric failure, 4 data or protocol
//! error, 5 a checked bound was violated.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::act::{train, TrainTrace};
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::diagnostics::{diagnose, write_alignment_csv};
use crate::downstream::{evaluate, write_eval_csv};
use crate::encoder::EncoderParams;
use crate::error::ActError;
use crate::synthgen::{generate_source, generate_target};

pub const SOURCE_FILE: &str = "source.actd";
pub const TARGET_FILE: &str = "target.actd";
pub const TEST_FILE: &str = "test.actd";
pub const CHECKPOINT_FILE: &str = "encoder.ckpt";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const REPORT_FILE: &str = "diagnostics.txt";
pub const BOUND_FILE: &str = "alignment_bound.csv";

#[derive(Debug, Parser)]
#[command(name = "act", about = "Adversarial contrastive pretraining experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Encoder checkpoint to write (pretrain) or read (evaluate, diagnose).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic source, target and test sets.
    Generate,
    /// Train an encoder on the source set.
    Pretrain,
    /// Probe and k-NN error on the target test set.
    Evaluate,
    /// Certificate quantities and bound checks.
    Diagnose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Config = 2,
    Numeric = 3,
    Data = 4,
    Invariant = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ActError> for CliError {
    fn from(e: ActError) -> Self {
        let code = match &e {
            ActError::Config { .. } => ExitCode::Config,
            ActError::NonFinite(_) | ActError::Diverged { .. } | ActError::ZeroVariance { .. } | ActError::Graph { .. } => {
                ExitCode::Numeric
            }
            ActError::Shape(_)
            | ActError::InvalidArgument(_)
            | ActError::EmptyClass(_)
            | ActError::Format(_)
            | ActError::Io(_) => ExitCode::Data,
        };
        CliError { code, message: e.to_string() }
    }
}

fn data_err(msg: String) -> CliError {
    CliError { code: ExitCode::Data, message: msg }
}

/// Reads a file the command depends on, naming it on failure.
fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams, CliError> {
    EncoderParams::load(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| data_err(format!("cannot create {}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|e| data_err(e.to_string()))
}

/// Resolved paths and config of one invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Invocation {
    /// Loads and validates the config. Touches no output file.
    pub fn new(command: Command, config: &Path, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<Self, CliError> {
        let config = ExperimentConfig::load(config).map_err(|e| CliError {
            code: ExitCode::Config,
            message: format!("{}: {e}", config.display()),
        })?;
        let out_dir = out.map_or_else(|| config.out_dir.clone(), Path::to_path_buf);
        let checkpoint = checkpoint.map_or_else(|| out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
        Ok(Self { command, config, out_dir, checkpoint })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| data_err(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    fn check_dim(&self, ds: &Dataset, name: &str) -> Result<(), CliError> {
        let s = &self.config.synthetic;
        if ds.dim != s.d || ds.num_classes != s.k {
            return Err(data_err(format!(
                "{name} has d = {}, K = {} but the config says d = {}, K = {}",
                ds.dim, ds.num_classes, s.d, s.k
            )));
        }
        Ok(())
    }

    fn check_encoder(&self, f: &EncoderParams) -> Result<(), CliError> {
        if f.input_dim() != self.config.synthetic.d {
            return Err(data_err(format!(
                "checkpoint expects inputs of dimension {}, config has d = {}",
                f.input_dim(),
                self.config.synthetic.d
            )));
        }
        Ok(())
    }

    /// Runs the command and returns the files it wrote.
    pub fn run(&self) -> Result<Vec<PathBuf>, CliError> {
        match self.command {
            Command::Generate => self.generate(),
            Command::Pretrain => self.pretrain(),
            Command::Evaluate => self.evaluate(),
            Command::Diagnose => self.diagnose(),
        }
    }

    fn generate(&self) -> Result<Vec<PathBuf>, CliError> {
        let source = generate_source(&self.config.synthetic)?;
        let (target, test) = generate_target(&self.config.synthetic)?;
        self.ensure_out_dir()?;
        let mut written = Vec::new();
        for (ds, name) in [(&source, SOURCE_FILE), (&target, TARGET_FILE), (&test, TEST_FILE)] {
            let path = self.path(name);
            let mut w = create(&path)?;
            ds.write(&mut w)?;
            finish(w)?;
            written.push(path);
        }
        Ok(written)
    }

    fn pretrain(&self) -> Result<Vec<PathBuf>, CliError> {
        let source = load_dataset(&self.path(SOURCE_FILE))?;
        self.check_dim(&source, SOURCE_FILE)?;
        let aug = self.config.augmentation_set()?;
        let init = self.config.init_encoder()?;
        let (params, trace) = train(&source.points, &aug, &self.config.train, &init)?;
        self.ensure_out_dir()?;
        if let Some(dir) = self.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| data_err(format!("cannot create {}: {e}", dir.display())))?;
        }
        let mut w = create(&self.checkpoint)?;
        params.write_checkpoint(&mut w)?;
        finish(w)?;
        let trace_path = self.path(TRACE_FILE);
        write_trace(&trace, &trace_path)?;
        Ok(vec![self.checkpoint.clone(), trace_path])
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>, CliError> {
        let f = load_checkpoint(&self.checkpoint)?;
        self.check_encoder(&f)?;
        let target = load_dataset(&self.path(TARGET_FILE))?;
        let test = load_dataset(&self.path(TEST_FILE))?;
        self.check_dim(&target, TARGET_FILE)?;
        self.check_dim(&test, TEST_FILE)?;
        if self.config.knn_k > target.len() {
            return Err(data_err(format!(
                "knn_k = {} exceeds the {} labeled target samples",
                self.config.knn_k,
                target.len()
            )));
        }
        let aug = self.config.augmentation_set()?;
        let mut rng = self.config.evaluation_rng();
        let rows = evaluate(&f, &target, &test, &aug, self.config.knn_k, &mut rng)?;
        self.ensure_out_dir()?;
        let path = self.path(EVAL_FILE);
        let mut w = create(&path)?;
        write_eval_csv(&rows, &mut w)?;
        finish(w)?;
        Ok(vec![path])
    }

    fn diagnose(&self) -> Result<Vec<PathBuf>, CliError> {
        let f = load_checkpoint(&self.checkpoint)?;
        self.check_encoder(&f)?;
        let source = load_dataset(&self.path(SOURCE_FILE))?;
        let target = load_dataset(&self.path(TARGET_FILE))?;
        let test = load_dataset(&self.path(TEST_FILE))?;
        for (ds, name) in [(&source, SOURCE_FILE), (&target, TARGET_FILE), (&test, TEST_FILE)] {
            self.check_dim(ds, name)?;
        }
        let aug = self.config.augmentation_set()?;
        let (report, rows) = diagnose(&f, &source, &target, &test, &aug, &self.config.diagnose_options())?;
        self.ensure_out_dir()?;
        let report_path = self.path(REPORT_FILE);
        let mut w = create(&report_path)?;
        w.write_all(report.to_text().as_bytes()).map_err(|e| data_err(e.to_string()))?;
        finish(w)?;
        let bound_path = self.path(BOUND_FILE);
        let mut w = create(&bound_path)?;
        write_alignment_csv(&rows, &mut w)?;
        finish(w)?;
        if !report.alignment_bound_ok {
            let worst = rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
            return Err(CliError {
                code: ExitCode::Invariant,
                message: format!("alignment bound violated (worst slack {worst:e}); see {}", bound_path.display()),
            });
        }
        Ok(vec![report_path, bound_path])
    }
}

fn write_trace(trace: &TrainTrace, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    trace.write_csv(&mut w)?;
    finish(w)
}

/// Entry point of the binary: returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let Some(config) = cli.config.as_deref() else {
        eprintln!("error: --config <path> is required");
        return ExitCode::Config as i32;
    };
    let result = Invocation::new(cli.command, config, cli.checkpoint.as_deref(), cli.out.as_deref()).and_then(|inv| inv.run());
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code as i32
        }
    }
}
