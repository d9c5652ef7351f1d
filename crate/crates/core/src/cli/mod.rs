//! Command-line entry point: `gen`, `train`, `eval`, `infer` and `bench`.
//!
//! Each command reads an optional JSON [`RunConfig`], applies flag
//! overrides, writes the resolved config as `run_config.json` into its
//! output directory and exits with 0 (success), 1 (usage) or 2 (runtime).
//! Failures print one JSON line `{"error": kind, "message": ...}` to stderr.

pub mod alloc;
mod commands;

pub use commands::{
    cmd_bench, cmd_eval, cmd_gen, cmd_infer, cmd_train, pair_ordering, BenchRow, GenManifest, SampleEntry, BENCH_FILE,
    MANIFEST_FILE, METRICS_FILE, PREDICTIONS_FILE,
};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::fusion::{FusionConfig, Mechanism, Modality};
use crate::synthscene::DatasetMix;
use crate::trainer::{TargetKind, TrainConfig};
use crate::{Error, Result};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Dataset materialization settings of `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSettings {
    pub n: usize,
    pub mix: DatasetMix,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self { n: 100, mix: DatasetMix::single("default", Default::default()) }
    }
}

/// Forward-pass benchmark settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    pub mechanisms: Vec<Mechanism>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { height: 96, width: 96, repeats: 3, mechanisms: Mechanism::ALL.to_vec() }
    }
}

/// Everything a command needs. Unused sections are ignored by a command
/// but still recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds generation and training; overrides `train.seed`.
    pub seed: u64,
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub gen: GenSettings,
    pub bench: BenchSettings,
    /// Generated dataset for `eval`/`infer`, and for evaluation after `train`.
    pub data: Option<PathBuf>,
    /// Model checkpoint for `eval`/`infer`.
    pub checkpoint: Option<PathBuf>,
    /// Prediction dump that `eval` scores instead of running a model.
    pub predictions: Option<PathBuf>,
    /// With both set, `train` finetunes a fusion model from these two.
    pub rgb_checkpoint: Option<PathBuf>,
    pub motion_checkpoint: Option<PathBuf>,
    /// Ground-truth instances; the checkpoint's training target by default.
    pub target: Option<TargetKind>,
    /// `infer` also writes mask overlays as PNG.
    pub overlays: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Writes the config into `dir` as [`RUN_CONFIG_FILE`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mechanism {
            self.model.mechanism = m;
            self.bench.mechanisms = vec![m];
        }
        if let Some(m) = o.modality {
            self.model.modality = m;
        }
        if let Some(p) = o.p_neg {
            self.train.p_neg = p;
        }
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        if let Some(c) = &o.checkpoint {
            self.checkpoint = Some(c.clone());
        }
        self.train.seed = self.seed;
    }
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Flags shared by every command; they win over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// single, d, e, ed or mbt.
    #[arg(long, value_parser = parse_mechanism)]
    pub mechanism: Option<Mechanism>,
    /// rgb, of, sf or emb.
    #[arg(long, value_parser = parse_modality)]
    pub modality: Option<Modality>,
    #[arg(long = "p-neg")]
    pub p_neg: Option<f64>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Materialize a synthetic dataset mix to disk.
    Gen(Overrides),
    /// Pretrain a one-stream model, or finetune a fusion model.
    Train(Overrides),
    /// Score a checkpoint or a prediction dump on a dataset.
    Eval(Overrides),
    /// Write a prediction dump (and optional overlays) for a dataset.
    Infer(Overrides),
    /// Time forward passes and count attention pairs per mechanism.
    Bench(Overrides),
}

impl Command {
    fn overrides(&self) -> &Overrides {
        match self {
            Command::Gen(o) | Command::Train(o) | Command::Eval(o) | Command::Infer(o) | Command::Bench(o) => o,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "motionseg", version, about = "Moving-object instance segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file (or defaults) with the command's flags applied.
pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(o);
    Ok(cfg)
}

/// Runs one parsed command.
pub fn execute(cmd: &Command) -> Result<()> {
    let o = cmd.overrides();
    let cfg = resolve(o)?;
    let out = || o.out.clone().ok_or_else(|| Error::InvalidConfig("--out is required".into()));
    match cmd {
        Command::Gen(_) => cmd_gen(&cfg, &out()?).map(|_| ()),
        Command::Train(_) => cmd_train(&cfg, &out()?).map(|_| ()),
        Command::Eval(_) => {
            let report = cmd_eval(&cfg, o.out.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Infer(_) => cmd_infer(&cfg, &out()?).map(|_| ()),
        Command::Bench(_) => {
            for row in cmd_bench(&cfg, o.out.as_deref())? {
                println!("{}", row.table_line());
            }
            Ok(())
        }
    }
}

/// Process exit code for an error: 1 for usage errors, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownLabel(_) => 1,
        _ => 2,
    }
}

fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind, "message": one_line }).to_string()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", &e.to_string()));
            return 1;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(if code == 1 { "usage" } else { "runtime" }, &e.to_string()));
            code
        }
    }
}
