//! Run configuration: flat `key = value` text, one key per line, `#` starts
//! a comment. Every training command starts from its own defaults, then a
//! config file, then command-line overrides; the resolved result is written
//! next to the run's outputs and parses back to the same configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::models::Mask;
use crate::tensor::OptimizerKind;
use crate::training::{AudioSource, AudioTarget, TrainConfig, WindowConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {0:?} given twice in one file")]
    Duplicate(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("config is for command {found:?} but was loaded for {expected:?}")]
    Command { expected: String, found: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// The four training commands; each has its own defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainCommand {
    Teacher,
    Student,
    Audio,
    Fusion,
}

impl TrainCommand {
    pub const ALL: [TrainCommand; 4] = [TrainCommand::Teacher, TrainCommand::Student, TrainCommand::Audio, TrainCommand::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainCommand::Teacher => "teacher",
            TrainCommand::Student => "student",
            TrainCommand::Audio => "audio",
            TrainCommand::Fusion => "fusion",
        }
    }
}

impl fmt::Display for TrainCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainCommand {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        TrainCommand::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| ConfigError::Value {
            key: "command".into(),
            value: s.into(),
            reason: "expected teacher, student, audio or fusion".into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerName {
    Sgd,
    Adam,
}

/// One documented key; the table drives parsing, rendering and `--help`.
pub struct KeyDoc {
    pub name: &'static str,
    pub doc: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { name: "version", doc: "config format version" },
    KeyDoc { name: "command", doc: "training command this config belongs to" },
    KeyDoc { name: "data_dir", doc: "dataset directory written by gen-data" },
    KeyDoc { name: "out_dir", doc: "directory for checkpoints, metrics and the resolved config" },
    KeyDoc { name: "cache_dir", doc: "mel cache directory; empty means <data_dir>/cache" },
    KeyDoc { name: "seed", doc: "seed for initialisation and batch order" },
    KeyDoc { name: "steps", doc: "optimizer steps" },
    KeyDoc { name: "batch_triplets", doc: "triplets per visual step" },
    KeyDoc { name: "batch_images", doc: "labelled images per visual step" },
    KeyDoc { name: "batch_unlabeled", doc: "unlabeled images per student step" },
    KeyDoc { name: "batch_clips", doc: "30 s spectrograms per audio step" },
    KeyDoc { name: "batch_windows", doc: "windows per fusion step" },
    KeyDoc { name: "optimizer", doc: "sgd or adam" },
    KeyDoc { name: "lr", doc: "learning rate" },
    KeyDoc { name: "momentum", doc: "SGD momentum" },
    KeyDoc { name: "beta1", doc: "Adam first-moment decay" },
    KeyDoc { name: "beta2", doc: "Adam second-moment decay" },
    KeyDoc { name: "eps", doc: "Adam denominator epsilon" },
    KeyDoc { name: "alpha", doc: "weight of the classification loss" },
    KeyDoc { name: "distill_weight", doc: "weight of the relational distillation loss" },
    KeyDoc { name: "margin", doc: "triplet loss margin" },
    KeyDoc { name: "eval_every", doc: "validation cadence in steps (the last step is always evaluated)" },
    KeyDoc { name: "log_every", doc: "loss logging cadence in steps (step 1 is always logged)" },
    KeyDoc { name: "wall_time", doc: "record elapsed seconds in metrics; true makes metrics files differ between runs" },
    KeyDoc { name: "distill", doc: "student: include the distillation loss" },
    KeyDoc { name: "unlabeled", doc: "student: distil on unlabeled images too" },
    KeyDoc { name: "audio_target", doc: "audio: arousal, valence or combined" },
    KeyDoc { name: "mask", doc: "fusion: both, audio-only or visual-only" },
    KeyDoc { name: "audio_source", doc: "fusion: combined (one audio net) or both (arousal and valence nets)" },
    KeyDoc { name: "visual_checkpoint", doc: "fusion: visual extractor checkpoint, relative to out_dir" },
    KeyDoc { name: "window_frames", doc: "fusion window length in 40 ms frames" },
    KeyDoc { name: "window_hop", doc: "fusion window hop in frames" },
    KeyDoc { name: "teacher1_d_face", doc: "embedding width of the first teacher" },
    KeyDoc { name: "teacher2_d_face", doc: "embedding width of the second teacher" },
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: TrainCommand,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    pub batch_triplets: usize,
    pub batch_images: usize,
    pub batch_unlabeled: usize,
    pub batch_clips: usize,
    pub batch_windows: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha: f32,
    pub distill_weight: f32,
    pub margin: f32,
    pub eval_every: usize,
    pub log_every: usize,
    pub wall_time: bool,
    pub distill: bool,
    pub unlabeled: bool,
    pub audio_target: AudioTarget,
    pub mask: Mask,
    pub audio_source: AudioSource,
    pub visual_checkpoint: PathBuf,
    pub window: WindowConfig,
    pub teacher1_d_face: usize,
    pub teacher2_d_face: usize,
}

impl RunConfig {
    pub fn defaults(command: TrainCommand) -> Self {
        let t = match command {
            TrainCommand::Teacher | TrainCommand::Student => TrainConfig::visual(),
            TrainCommand::Audio => TrainConfig::audio(),
            TrainCommand::Fusion => TrainConfig::fusion(),
        };
        let mut c = Self {
            command,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            cache_dir: None,
            seed: t.seed,
            steps: t.steps,
            batch_triplets: t.batch_triplets,
            batch_images: t.batch_images,
            batch_unlabeled: t.batch_unlabeled,
            batch_clips: t.batch_clips,
            batch_windows: t.batch_windows,
            optimizer: OptimizerName::Sgd,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: t.alpha,
            distill_weight: t.distill_weight,
            margin: t.margin,
            eval_every: t.eval_every,
            log_every: t.log_every,
            wall_time: t.wall_time,
            distill: true,
            unlabeled: true,
            audio_target: AudioTarget::Arousal,
            mask: Mask::Both,
            audio_source: AudioSource::Combined,
            visual_checkpoint: "student.aver".into(),
            window: WindowConfig::default(),
            teacher1_d_face: 128,
            teacher2_d_face: 256,
        };
        match t.optimizer {
            OptimizerKind::Sgd { lr, momentum } => {
                c.lr = lr;
                c.momentum = momentum;
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                c.optimizer = OptimizerName::Adam;
                c.lr = lr;
                c.beta1 = beta1;
                c.beta2 = beta2;
                c.eps = eps;
            }
        }
        c
    }

    /// Defaults, then `file` (config text), then `overrides` in order.
    pub fn resolve(command: TrainCommand, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::defaults(command);
        if let Some(text) = file {
            let mut seen = std::collections::BTreeSet::new();
            for (key, value) in parse_lines(text)? {
                if !seen.insert(key.clone()) {
                    return Err(ConfigError::Duplicate(key));
                }
                c.set(&key, &value)?;
            }
        }
        for (key, value) in overrides {
            c.set(key, value)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: &str| ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() };
        fn num<T: FromStr>(v: &str, bad: impl Fn(&str) -> ConfigError) -> Result<T> {
            v.parse().map_err(|_| bad("not a number of the expected kind"))
        }
        fn flag(v: &str, bad: impl Fn(&str) -> ConfigError) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad("expected true or false")),
            }
        }
        match key {
            "version" => {
                if num::<u32>(value, bad)? != CONFIG_VERSION {
                    return Err(bad(&format!("only version {CONFIG_VERSION} is supported")));
                }
            }
            "command" => {
                let found: TrainCommand = value.parse()?;
                if found != self.command {
                    return Err(ConfigError::Command { expected: self.command.to_string(), found: value.into() });
                }
            }
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "cache_dir" => self.cache_dir = (!value.is_empty()).then(|| value.into()),
            "seed" => self.seed = num(value, bad)?,
            "steps" => self.steps = num(value, bad)?,
            "batch_triplets" => self.batch_triplets = num(value, bad)?,
            "batch_images" => self.batch_images = num(value, bad)?,
            "batch_unlabeled" => self.batch_unlabeled = num(value, bad)?,
            "batch_clips" => self.batch_clips = num(value, bad)?,
            "batch_windows" => self.batch_windows = num(value, bad)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerName::Sgd,
                    "adam" => OptimizerName::Adam,
                    _ => return Err(bad("expected sgd or adam")),
                }
            }
            "lr" => self.lr = num(value, bad)?,
            "momentum" => self.momentum = num(value, bad)?,
            "beta1" => self.beta1 = num(value, bad)?,
            "beta2" => self.beta2 = num(value, bad)?,
            "eps" => self.eps = num(value, bad)?,
            "alpha" => self.alpha = num(value, bad)?,
            "distill_weight" => self.distill_weight = num(value, bad)?,
            "margin" => self.margin = num(value, bad)?,
            "eval_every" => self.eval_every = num(value, bad)?,
            "log_every" => self.log_every = num(value, bad)?,
            "wall_time" => self.wall_time = flag(value, bad)?,
            "distill" => self.distill = flag(value, bad)?,
            "unlabeled" => self.unlabeled = flag(value, bad)?,
            "audio_target" => self.audio_target = value.parse().map_err(|_| bad("expected arousal, valence or combined"))?,
            "mask" => self.mask = value.parse().map_err(|e: crate::models::ModelError| bad(&e.to_string()))?,
            "audio_source" => self.audio_source = value.parse().map_err(|_| bad("expected combined or both"))?,
            "visual_checkpoint" => self.visual_checkpoint = value.into(),
            "window_frames" => self.window.frames = num(value, bad)?,
            "window_hop" => self.window.hop = num(value, bad)?,
            "teacher1_d_face" => self.teacher1_d_face = num(value, bad)?,
            "teacher2_d_face" => self.teacher2_d_face = num(value, bad)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &PathBuf| p.display().to_string();
        Some(match key {
            "version" => CONFIG_VERSION.to_string(),
            "command" => self.command.to_string(),
            "data_dir" => path(&self.data_dir),
            "out_dir" => path(&self.out_dir),
            "cache_dir" => self.cache_dir.as_ref().map(path).unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_triplets" => self.batch_triplets.to_string(),
            "batch_images" => self.batch_images.to_string(),
            "batch_unlabeled" => self.batch_unlabeled.to_string(),
            "batch_clips" => self.batch_clips.to_string(),
            "batch_windows" => self.batch_windows.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerName::Sgd => "sgd".into(),
                OptimizerName::Adam => "adam".into(),
            },
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "alpha" => self.alpha.to_string(),
            "distill_weight" => self.distill_weight.to_string(),
            "margin" => self.margin.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "wall_time" => self.wall_time.to_string(),
            "distill" => self.distill.to_string(),
            "unlabeled" => self.unlabeled.to_string(),
            "audio_target" => self.audio_target.to_string(),
            "mask" => self.mask.to_string(),
            "audio_source" => self.audio_source.as_str().into(),
            "visual_checkpoint" => path(&self.visual_checkpoint),
            "window_frames" => self.window.frames.to_string(),
            "window_hop" => self.window.hop.to_string(),
            "teacher1_d_face" => self.teacher1_d_face.to_string(),
            "teacher2_d_face" => self.teacher2_d_face.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name).expect("documented key"))).collect()
    }

    /// Commented defaults for `command`, usable as a starting config file.
    pub fn reference(command: TrainCommand) -> String {
        let d = Self::defaults(command);
        let mut out = format!("# Defaults for `aver train {command}`. Unknown keys are rejected.\n");
        for k in KEYS {
            out.push_str(&format!("\n# {}\n{} = {}\n", k.doc, k.name, d.get(k.name).expect("documented key")));
        }
        out
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd { lr: self.lr, momentum: self.momentum },
            OptimizerName::Adam => OptimizerKind::Adam { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_triplets: self.batch_triplets,
            batch_images: self.batch_images,
            batch_unlabeled: self.batch_unlabeled,
            batch_clips: self.batch_clips,
            batch_windows: self.batch_windows,
            optimizer: self.optimizer_kind(),
            alpha: self.alpha,
            distill_weight: self.distill_weight,
            margin: self.margin,
            seed: self.seed,
            eval_every: self.eval_every,
            log_every: self.log_every,
            wall_time: self.wall_time,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.data_dir.join("cache"))
    }
}

/// `key = value` pairs in file order; blank lines and `#` comments skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().into(), v.trim().into())),
        _ => Err(ConfigError::Syntax { line: 0, text: s.into() }),
    }
}
