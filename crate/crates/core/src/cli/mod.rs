//! The `advdrop` command line.
//!
//! Exit codes: 0 success, 1 runtime/IO failure or failed verification,
//! 2 usage or configuration error, 3 numeric blow-up during training.

pub mod analysis;
pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConfigError, DataPath, RunConfig, Task};

use crate::data::{char_lm_task, copy_task, load_idx, parity_task, split, to_sequence, SequenceDataset, Splits};
use crate::error::Error;
use crate::masks::AdvConfig;
use crate::rnn::RnnParams;
use crate::training::{self, load_checkpoint, save_checkpoint, TrainState, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "ADVDROP_SEED";

pub const MANIFEST: &str = "manifest.txt";
pub const METRICS: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub const BUNDLED_IMAGES: &str = "mnist5k-images-idx3-ubyte.gz";
pub const BUNDLED_LABELS: &str = "mnist5k-labels-idx1-ubyte.gz";
pub const BUNDLED_CORPUS: &str = "corpus.txt";

#[derive(Parser, Debug)]
#[command(name = "advdrop", version, about = "Adversarial dropout for recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.csv, checkpoints and manifest.txt.
    Train(TrainArgs),
    /// Error rate of a checkpoint on one data split.
    Eval(EvalArgs),
    /// Run a property suite on random tiny models.
    Verify(VerifyArgs),
    /// Accuracies of randomly and adversarially masked subnetworks.
    Histogram(HistogramArgs),
    /// Mean adversarial mask per hidden unit for a series of checkpoints.
    Maskstats(MaskstatsArgs),
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// parity, copy, mnist or charlm.
    #[arg(long)]
    pub task: Option<String>,
    /// Regularizer: none, el, fd or add.
    #[arg(long)]
    pub reg: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// Adversarial budget as a fraction of the hidden units.
    #[arg(long)]
    pub delta: Option<String>,
    /// Number of search stages.
    #[arg(long)]
    pub k: Option<String>,
    /// Dropout probability.
    #[arg(long)]
    pub p: Option<String>,
    /// final, uniform or comma-separated per-step weights.
    #[arg(long = "lambda-schedule")]
    pub lambda_schedule: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        let named = [
            ("task", &self.task),
            ("regularizer", &self.reg),
            ("epochs", &self.epochs),
            ("delta", &self.delta),
            ("k", &self.k),
            ("dropout_p", &self.p),
            ("lambda_schedule", &self.lambda_schedule),
            ("seed", &self.seed),
            ("out_dir", &self.out),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of `key = value` lines (a previous run's manifest works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the manifest next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// grad, im, remark1, prop1, flip-oracle or all.
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run a handful of instances per suite instead of the full counts.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Args, Debug)]
pub struct HistogramArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "n-masks", default_value_t = 500)]
    pub n_masks: usize,
    #[arg(long, default_value_t = 0.03)]
    pub p: f64,
    #[arg(long, default_value_t = 0.03)]
    pub delta: f64,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskstatsArgs {
    /// Checkpoints in epoch order.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.03)]
    pub delta: f64,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Numeric(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(lines) => {
                for (i, l) in lines.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "config error: {l}")?;
                }
                Ok(())
            }
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Failed(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(m) => CliError::Numeric(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Histogram(a) => cmd_histogram(&a, out),
        Command::Maskstats(a) => cmd_maskstats(&a, out),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

/// Reads the config file (if any), then applies flag overrides and
/// `ADVDROP_SEED`.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            RunConfig::parse_text(&text).map_err(|errs| {
                CliError::Config(errs.iter().map(|e| format!("{}: {e}", p.display())).collect())
            })?
        }
        None => RunConfig::default(),
    };
    let pairs = overrides.pairs().map_err(|e| CliError::Config(vec![e]))?;
    let mut errors = Vec::new();
    for (k, v) in &pairs {
        if let Err(e) = cfg.set(k, v) {
            errors.push(format!("override {k}={v}: {e}"));
        }
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        match v.trim().parse::<u64>() {
            Ok(seed) => {
                info!("{SEED_ENV}={seed} overrides configured seed {}", cfg.train.seed);
                cfg.train.seed = seed;
            }
            Err(_) => errors.push(format!("{SEED_ENV}: cannot parse {v:?} as an unsigned integer")),
        }
    }
    if errors.is_empty() {
        if let Err(e) = cfg.validate() {
            errors.push(e);
        }
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(errors))
    }
}

/// Builds the train/val/test splits a config describes.
pub fn load_splits(cfg: &RunConfig) -> crate::Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let ds: SequenceDataset = match cfg.task {
        Task::Parity => parity_task(cfg.seq_len, cfg.samples, &mut rng)?,
        Task::Copy => copy_task(cfg.seq_len, cfg.copy_delay, cfg.copy_symbols, cfg.samples, &mut rng)?,
        Task::Mnist => {
            let set = load_idx(cfg.mnist_images.resolve(BUNDLED_IMAGES), cfg.mnist_labels.resolve(BUNDLED_LABELS))?;
            to_sequence(&set, cfg.pixel_order)?
        }
        Task::CharLm => {
            let text = fs::read(cfg.corpus.resolve(BUNDLED_CORPUS))?;
            char_lm_task(&text, cfg.context)?.0
        }
    };
    split(&ds, cfg.train_size, cfg.val_size, cfg.test_size, &mut rng)
}

/// Initial weights of a run, drawn from a stream separate from the ones
/// [`TrainState`] uses.
pub fn init_params(cfg: &RunConfig, data: &SequenceDataset) -> crate::Result<RnnParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(2);
    RnnParams::init(cfg.cell, data.input_dim, cfg.hidden, data.classes, &mut rng)
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()?;
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (out.status.success() && !s.is_empty()).then_some(s)
}

/// Manifest text: the canonical config (so the file is itself a valid config)
/// preceded by provenance comments.
pub fn manifest_text(cfg: &RunConfig) -> String {
    format!(
        "# advdrop {}\n# config_sha256 = {}\n# seed = {}\n# git = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.hash(),
        cfg.train.seed,
        git_describe().unwrap_or_else(|| "unavailable".into()),
        cfg.canonical()
    )
}

/// Trains per `cfg`, writing manifest, metrics and checkpoints into
/// `cfg.out_dir`. Returns the final state.
pub fn train_run(cfg: &RunConfig) -> Result<TrainState, CliError> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    fs::write(dir.join(MANIFEST), manifest_text(cfg)).map_err(|e| io_err(dir, e))?;
    let splits = load_splits(cfg)?;
    let params = init_params(cfg, &splits.train)?;
    info!(
        "training {} params on {} examples ({} val, {} test), config {}",
        params.num_params(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        &cfg.hash()[..12]
    );
    let metrics_path = dir.join(METRICS);
    let mut csv = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| io_err(&metrics_path, e))?;
    let mut state = TrainState::new(params, cfg.train.seed);
    for _ in 0..cfg.train.epochs {
        let m = training::run_epoch(&mut state, &splits.train, &splits.val, &splits.test, &cfg.train)?;
        writeln!(csv, "{}", m.csv_row()).map_err(|e| io_err(&metrics_path, e))?;
        info!(
            "epoch {}: loss {:.4} reg {:.4} val err {:.4} test err {:.4}",
            m.epoch, m.train_loss, m.reg_value, m.val_error, m.test_error
        );
        if cfg.checkpoint_every_epoch {
            let p = dir.join(format!("epoch-{:03}.ckpt", m.epoch));
            save_checkpoint(&state.params, &p)?;
        }
    }
    save_checkpoint(&state.params, dir.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let state = train_run(&cfg)?;
    let last = state.history.last().expect("at least one epoch");
    let _ = writeln!(out, "{}", cfg.out_dir.join(METRICS).display());
    let _ = writeln!(out, "final test error {}", last.test_error);
    Ok(EXIT_OK)
}

/// The config beside a checkpoint when none is given.
fn config_for(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST);
            if !p.exists() {
                return Err(CliError::Config(vec![format!(
                    "no --config given and no {} next to {}",
                    MANIFEST,
                    checkpoint.display()
                )]));
            }
            p
        }
    };
    resolve_config(Some(&path), &Overrides::default())
}

fn pick_split(splits: Splits, name: &str) -> CliResult<SequenceDataset> {
    match name {
        "train" => Ok(splits.train),
        "val" => Ok(splits.val),
        "test" => Ok(splits.test),
        other => Err(CliError::Config(vec![format!("unknown split {other:?} (expected train, val or test)")])),
    }
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    let data = pick_split(load_splits(&cfg)?, &a.split)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let error = training::evaluate(&params, &data)?;
    let nll = training::mean_nll(&params, &data)?;
    let _ = writeln!(out, "split,examples,error,nll,perplexity");
    let _ = writeln!(out, "{},{},{},{},{}", a.split, data.len(), error, nll, nll.exp());
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<i32> {
    let suites: Vec<verify::Suite> = if a.suite == "all" {
        verify::Suite::ALL.to_vec()
    } else {
        vec![a.suite.parse().map_err(|e: Error| CliError::Config(vec![e.to_string()]))?]
    };
    let scale = if a.quick { verify::Scale::quick() } else { verify::Scale::default() };
    let mut all = true;
    for s in suites {
        let t = std::time::Instant::now();
        let checks = verify::run_suite(s, a.seed, &scale)?;
        for c in &checks {
            let _ = writeln!(out, "{c}");
            all &= c.passed;
        }
        info!("suite {s} took {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

fn analysis_config(cfg: &RunConfig, delta: f64, k: usize, seed: u64) -> CliResult<analysis::AnalysisConfig> {
    let adv = AdvConfig { delta, stages: k, init: cfg.train.adv.init };
    adv.validate().map_err(|e| CliError::Config(vec![e.to_string()]))?;
    Ok(analysis::AnalysisConfig { adv, lambda: cfg.train.lambda.clone(), metric: cfg.train.metric, seed })
}

fn sink(path: Option<&Path>, out: &mut dyn Write, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Failed(e.to_string())),
    }
}

fn cmd_histogram(a: &HistogramArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    let data = load_splits(&cfg)?.test;
    let params = load_checkpoint(&a.checkpoint)?;
    let acfg = analysis_config(&cfg, a.delta, a.k, a.seed)?;
    crate::rnn::keep_scale(a.p).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let rows = analysis::histogram(&params, &data, a.n_masks, a.p, &acfg)?;
    let mut text = String::from("mask,random_accuracy,adversarial_accuracy\n");
    for (i, (r, v)) in rows.iter().enumerate() {
        text.push_str(&format!("{i},{r},{v}\n"));
    }
    sink(a.out.as_deref(), out, &text)?;
    Ok(EXIT_OK)
}

fn cmd_maskstats(a: &MaskstatsArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = config_for(&a.checkpoints[0], a.config.as_deref())?;
    let data = load_splits(&cfg)?.test;
    let acfg = analysis_config(&cfg, a.delta, a.k, a.seed)?;
    let mut text = String::new();
    let mut hidden = None;
    for (i, path) in a.checkpoints.iter().enumerate() {
        let params = load_checkpoint(path)?;
        let h = params.hidden();
        match hidden {
            None => {
                hidden = Some(h);
                let cols: Vec<String> = (0..h).map(|u| format!("unit{u}")).collect();
                text.push_str(&format!("epoch,{}\n", cols.join(",")));
            }
            Some(h0) if h0 != h => {
                return Err(CliError::Failed(format!(
                    "{} has {h} hidden units but earlier checkpoints have {h0}",
                    path.display()
                )))
            }
            _ => {}
        }
        let means = analysis::mask_means(&params, &data, &acfg)?;
        let cells: Vec<String> = means.iter().map(|m| m.to_string()).collect();
        text.push_str(&format!("{},{}\n", i + 1, cells.join(",")));
    }
    if a.delta * (hidden.unwrap_or(0) as f64) < 1.0 {
        warn!("delta·H < 1; the budget is clamped to one unit");
    }
    sink(a.out.as_deref(), out, &text)?;
    Ok(EXIT_OK)
}
