//! Plain-text run configuration: one `key = value` per line, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::PixelOrder;
use crate::masks::{AdvConfig, BaseMaskPolicy, InitPolicy};
use crate::regularizers::{DistanceMetric, LambdaSchedule};
use crate::rnn::CellKind;
use crate::training::{LrSchedule, Optimizer, RegularizerKind, TrainConfig};

/// Which dataset a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Parity,
    Copy,
    Mnist,
    CharLm,
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "parity" => Ok(Task::Parity),
            "copy" => Ok(Task::Copy),
            "mnist" => Ok(Task::Mnist),
            "charlm" => Ok(Task::CharLm),
            other => Err(format!("unknown task {other:?} (expected parity, copy, mnist or charlm)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Parity => "parity",
            Task::Copy => "copy",
            Task::Mnist => "mnist",
            Task::CharLm => "charlm",
        })
    }
}

/// A path that may refer to the small digit set shipped with the crate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataPath {
    Bundled,
    File(PathBuf),
}

impl DataPath {
    pub fn resolve(&self, bundled: &str) -> PathBuf {
        match self {
            DataPath::Bundled => Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(bundled),
            DataPath::File(p) => p.clone(),
        }
    }
}

impl std::fmt::Display for DataPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataPath::Bundled => f.write_str("bundled"),
            DataPath::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for DataPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "" => Err("empty path".into()),
            "bundled" => Ok(DataPath::Bundled),
            p => Ok(DataPath::File(PathBuf::from(p))),
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    /// Sequence length of the synthetic tasks.
    pub seq_len: usize,
    pub copy_delay: usize,
    pub copy_symbols: usize,
    /// Examples generated for the synthetic tasks.
    pub samples: usize,
    pub mnist_images: DataPath,
    pub mnist_labels: DataPath,
    pub pixel_order: PixelOrder,
    pub corpus: DataPath,
    pub context: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Seeds data generation and the split, independently of `seed`.
    pub data_seed: u64,
    pub cell: CellKind,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Write a checkpoint after every epoch, not only the final one.
    pub checkpoint_every_epoch: bool,
    /// Not part of the hash.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Parity,
            seq_len: 8,
            copy_delay: 4,
            copy_symbols: 4,
            samples: 1200,
            mnist_images: DataPath::Bundled,
            mnist_labels: DataPath::Bundled,
            pixel_order: PixelOrder::Downsampled { side: 8 },
            corpus: DataPath::Bundled,
            context: 32,
            train_size: 1000,
            val_size: 100,
            test_size: 100,
            data_seed: 0,
            cell: CellKind::Lstm,
            hidden: 16,
            train: TrainConfig::default(),
            checkpoint_every_epoch: false,
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "task",
    "seq_len",
    "copy_delay",
    "copy_symbols",
    "samples",
    "mnist_images",
    "mnist_labels",
    "pixel_order",
    "corpus",
    "context",
    "train_size",
    "val_size",
    "test_size",
    "data_seed",
    "cell",
    "hidden",
    "optimizer",
    "rmsprop_decay",
    "adam_beta1",
    "adam_beta2",
    "lr",
    "lr_schedule",
    "clip_norm",
    "epochs",
    "batch_size",
    "seed",
    "regularizer",
    "reg_weight",
    "dropout_p",
    "delta",
    "k",
    "search_init",
    "base_policy",
    "lambda_schedule",
    "metric",
    "symmetric",
    "checkpoint_every_epoch",
    "out_dir",
];

/// A config problem, with the 1-based line it came from when read from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_cell(v: &str) -> Result<CellKind, String> {
    match v {
        "rnn" => Ok(CellKind::Rnn),
        "lstm" => Ok(CellKind::Lstm),
        _ => Err(format!("cell: expected rnn or lstm, got {v:?}")),
    }
}

fn parse_init(v: &str) -> Result<InitPolicy, String> {
    match v {
        "flip" => Ok(InitPolicy::SingleRandomFlip),
        "copy" => Ok(InitPolicy::Copy),
        _ => Err(format!("search_init: expected flip or copy, got {v:?}")),
    }
}

impl RunConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "task" => self.task = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "copy_delay" => self.copy_delay = parse(key, v)?,
            "copy_symbols" => self.copy_symbols = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "mnist_images" => self.mnist_images = parse(key, v)?,
            "mnist_labels" => self.mnist_labels = parse(key, v)?,
            "pixel_order" => self.pixel_order = parse(key, v)?,
            "corpus" => self.corpus = parse(key, v)?,
            "context" => self.context = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "cell" => self.cell = parse_cell(v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "optimizer" => {
                t.optimizer = match (v, t.optimizer) {
                    ("rmsprop", Optimizer::RmsProp { .. }) | ("adam", Optimizer::Adam { .. }) => t.optimizer,
                    ("rmsprop", _) => Optimizer::RmsProp { decay: 0.5 },
                    ("adam", _) => Optimizer::Adam { beta1: 0.9, beta2: 0.999 },
                    _ => return Err(format!("optimizer: expected rmsprop or adam, got {v:?}")),
                }
            }
            "rmsprop_decay" => match &mut t.optimizer {
                Optimizer::RmsProp { decay } => *decay = parse(key, v)?,
                _ => return Err("rmsprop_decay given but optimizer is not rmsprop".into()),
            },
            "adam_beta1" | "adam_beta2" => match &mut t.optimizer {
                Optimizer::Adam { beta1, beta2 } => {
                    *(if key == "adam_beta1" { beta1 } else { beta2 }) = parse(key, v)?;
                }
                _ => return Err(format!("{key} given but optimizer is not adam")),
            },
            "lr" => t.lr = parse(key, v)?,
            "lr_schedule" => t.lr_schedule = parse::<LrSchedule>(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "regularizer" => t.regularizer = parse::<RegularizerKind>(key, v)?,
            "reg_weight" => t.reg_weight = parse(key, v)?,
            "dropout_p" => t.dropout_p = parse(key, v)?,
            "delta" => t.adv.delta = parse(key, v)?,
            "k" => t.adv.stages = parse(key, v)?,
            "search_init" => t.adv.init = parse_init(v)?,
            "base_policy" => t.base_policy = parse::<BaseMaskPolicy>(key, v)?,
            "lambda_schedule" => t.lambda = parse::<LambdaSchedule>(key, v)?,
            "metric" => t.metric = parse::<DistanceMetric>(key, v)?,
            "symmetric" => t.symmetric = parse_bool(key, v)?,
            "checkpoint_every_epoch" => self.checkpoint_every_epoch = parse_bool(key, v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err("out_dir: empty path".into());
                }
                self.out_dir = PathBuf::from(v)
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Reads a config file's text on top of the defaults. Later lines may not
    /// repeat a key.
    pub fn parse_text(text: &str) -> Result<Self, Vec<ConfigError>> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashMap::new();
        let mut errors = Vec::new();
        // optimizer must be applied before its coefficients
        let mut deferred = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                errors.push(ConfigError { line: Some(line), message: format!("expected `key = value`, got {content:?}") });
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), line) {
                errors.push(ConfigError { line: Some(line), message: format!("duplicate key {k:?} (first set on line {prev})") });
                continue;
            }
            if matches!(k, "rmsprop_decay" | "adam_beta1" | "adam_beta2") {
                deferred.push((line, k.to_string(), v.to_string()));
            } else if let Err(message) = cfg.set(k, v) {
                errors.push(ConfigError { line: Some(line), message });
            }
        }
        for (line, k, v) in deferred {
            if let Err(message) = cfg.set(&k, &v) {
                errors.push(ConfigError { line: Some(line), message });
            }
        }
        if errors.is_empty() {
            if let Err(message) = cfg.validate() {
                errors.push(ConfigError { line: None, message });
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Cross-field checks that individual setters cannot make.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.hidden == 0 {
            return Err("hidden must be at least 1".into());
        }
        if self.train_size == 0 {
            return Err("train_size must be at least 1".into());
        }
        match self.task {
            Task::Parity | Task::Copy => {
                if self.seq_len == 0 {
                    return Err("seq_len must be at least 1".into());
                }
                if self.train_size + self.val_size + self.test_size > self.samples {
                    return Err(format!(
                        "train_size + val_size + test_size = {} exceeds samples = {}",
                        self.train_size + self.val_size + self.test_size,
                        self.samples
                    ));
                }
            }
            Task::CharLm if self.context == 0 => return Err("context must be at least 1".into()),
            _ => {}
        }
        Ok(())
    }

    /// Value of one key as written by [`RunConfig::canonical`].
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "task" => self.task.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "copy_delay" => self.copy_delay.to_string(),
            "copy_symbols" => self.copy_symbols.to_string(),
            "samples" => self.samples.to_string(),
            "mnist_images" => self.mnist_images.to_string(),
            "mnist_labels" => self.mnist_labels.to_string(),
            "pixel_order" => self.pixel_order.to_string(),
            "corpus" => self.corpus.to_string(),
            "context" => self.context.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "test_size" => self.test_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "cell" => match self.cell {
                CellKind::Rnn => "rnn".into(),
                CellKind::Lstm => "lstm".into(),
            },
            "hidden" => self.hidden.to_string(),
            "optimizer" => t.optimizer.name().into(),
            "rmsprop_decay" => match t.optimizer {
                Optimizer::RmsProp { decay } => decay.to_string(),
                _ => return None,
            },
            "adam_beta1" => match t.optimizer {
                Optimizer::Adam { beta1, .. } => beta1.to_string(),
                _ => return None,
            },
            "adam_beta2" => match t.optimizer {
                Optimizer::Adam { beta2, .. } => beta2.to_string(),
                _ => return None,
            },
            "lr" => t.lr.to_string(),
            "lr_schedule" => t.lr_schedule.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "regularizer" => t.regularizer.to_string(),
            "reg_weight" => t.reg_weight.to_string(),
            "dropout_p" => t.dropout_p.to_string(),
            "delta" => t.adv.delta.to_string(),
            "k" => t.adv.stages.to_string(),
            "search_init" => match t.adv.init {
                InitPolicy::SingleRandomFlip => "flip".into(),
                InitPolicy::Copy => "copy".into(),
            },
            "base_policy" => t.base_policy.to_string(),
            "lambda_schedule" => t.lambda.to_string(),
            "metric" => t.metric.to_string(),
            "symmetric" => t.symmetric.to_string(),
            "checkpoint_every_epoch" => self.checkpoint_every_epoch.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Every applicable key in canonical order, one `key = value` line each.
    /// Parsing the result yields an equal config.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    /// SHA-256 of the canonical form without `out_dir`, which does not affect
    /// results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.canonical().lines().filter(|l| !l.starts_with("out_dir ")) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn adv(&self) -> AdvConfig {
        self.train.adv
    }
}
