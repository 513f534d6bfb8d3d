//! The operations behind the `aver` command line: dataset generation, the
//! mel cache, the four training commands and evaluation. Each returns a
//! summary for the caller to print; nothing here writes to stdout.

mod eval;
mod train;

pub use eval::{eval, report_json, window_targets, AblationGrid, CheckpointReport, EvalArgs, EvalReport, GridRow, SplitCcc, REPORT_VERSION};
pub use train::{train, RunSummary};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::ConfigError;
use crate::data::{self, hex, AvParams, DataError, DatasetSpec, Manifest, Split};
use crate::dsp::{mel_spectrogram, read_wav, DspError, MelConfig};
use crate::models::{AudioNet, AudioNetConfig, FusionNet, FusionNetConfig, Mask, ModelError, VisualNet, VisualNetConfig};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{AudioTarget, TrainError, WindowConfig};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    /// Prerequisite artifacts that do not exist yet.
    #[error("missing {}; {hint}", .files.join(", "))]
    Missing { files: Vec<String>, hint: String },
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CommandError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Where and how a model was trained; stored in every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run: String,
    pub seed: u64,
    pub best_step: usize,
    /// Validation selection score at `best_step`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioPart {
    pub config: AudioNetConfig,
    pub target: AudioTarget,
}

/// Checkpoint metadata; the `kind` tag decides how the tensors are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelMeta {
    Visual {
        config: VisualNetConfig,
        info: RunInfo,
    },
    Audio {
        config: AudioNetConfig,
        target: AudioTarget,
        mel: MelConfig,
        info: RunInfo,
    },
    /// Self-contained: the frozen extractors are stored under `visual/` and
    /// `audio{i}/`, the fusion net under `fusion/`.
    Fusion {
        config: FusionNetConfig,
        mask: Mask,
        window: WindowConfig,
        mel: MelConfig,
        visual: VisualNetConfig,
        audio: Vec<AudioPart>,
        /// Parameter checksums of `visual` then each audio net.
        extractor_checksums: Vec<String>,
        info: RunInfo,
    },
    /// Predicts the window-mean trace exactly; a reference row for the
    /// ablation grid. Has no tensors.
    Oracle { mask: Mask, window: WindowConfig },
}

pub struct FusionModel {
    pub net: FusionNet,
    pub visual: VisualNet,
    pub audio: Vec<AudioNet>,
}

pub enum Model {
    Visual(VisualNet),
    Audio(AudioNet),
    Fusion(Box<FusionModel>),
    Oracle,
}

fn prefixed(store: &ParamStore, prefix: &str, ck: &mut Checkpoint) {
    for e in store.entries() {
        ck.push_tensor(format!("{prefix}{}", e.name), e.value.clone());
    }
}

fn strip_prefix(ck: &Checkpoint, prefix: &str) -> ParamStore {
    let all = ck.to_store();
    let mut out = ParamStore::new();
    for e in all.entries() {
        if let Some(name) = e.name.strip_prefix(prefix) {
            out.add(name, e.value.clone(), true);
        }
    }
    out
}

pub fn save_visual(path: &Path, net: &VisualNet, info: RunInfo) -> Result<()> {
    let mut ck = Checkpoint::from_store(&net.store);
    ck.set_meta(&ModelMeta::Visual { config: net.config.clone(), info })?;
    Ok(ck.save(path)?)
}

pub fn save_audio(path: &Path, net: &AudioNet, target: AudioTarget, mel: MelConfig, info: RunInfo) -> Result<()> {
    let mut ck = Checkpoint::from_store(&net.store);
    ck.set_meta(&ModelMeta::Audio { config: net.config.clone(), target, mel, info })?;
    Ok(ck.save(path)?)
}

pub fn save_fusion(path: &Path, model: &FusionModel, meta: &ModelMeta) -> Result<()> {
    let mut ck = Checkpoint::new();
    prefixed(&model.net.store, "fusion/", &mut ck);
    prefixed(&model.visual.store, "visual/", &mut ck);
    for (i, a) in model.audio.iter().enumerate() {
        prefixed(&a.store, &format!("audio{i}/"), &mut ck);
    }
    ck.set_meta(meta)?;
    Ok(ck.save(path)?)
}

pub fn save_oracle(path: &Path, mask: Mask, window: WindowConfig) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_meta(&ModelMeta::Oracle { mask, window })?;
    Ok(ck.save(path)?)
}

/// Read any model checkpoint, rebuilding its networks.
pub fn load_model(path: &Path) -> Result<(ModelMeta, Model)> {
    let ck = Checkpoint::load(path)?;
    let meta: ModelMeta = ck.meta()?;
    let model = match &meta {
        ModelMeta::Visual { config, .. } => Model::Visual(VisualNet::from_params(config.clone(), ck.to_store())?),
        ModelMeta::Audio { config, .. } => Model::Audio(AudioNet::from_params(config.clone(), ck.to_store())?),
        ModelMeta::Fusion { config, visual, audio, extractor_checksums, .. } => {
            let visual = VisualNet::from_params(visual.clone(), strip_prefix(&ck, "visual/"))?;
            let audio = audio
                .iter()
                .enumerate()
                .map(|(i, p)| AudioNet::from_params(p.config.clone(), strip_prefix(&ck, &format!("audio{i}/"))))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let sums: Vec<String> = std::iter::once(&visual.store).chain(audio.iter().map(|a| &a.store)).map(|s| s.checksum()).collect();
            if &sums != extractor_checksums {
                return Err(CheckpointError::Corrupt(format!("{}: extractor parameters do not match their checksums", path.display())).into());
            }
            let net = FusionNet::from_params(config.clone(), strip_prefix(&ck, "fusion/"))?;
            Model::Fusion(Box::new(FusionModel { net, visual, audio }))
        }
        ModelMeta::Oracle { .. } => Model::Oracle,
    };
    Ok((meta, model))
}

/// Options of `gen-data`.
#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub spec: DatasetSpec,
    pub force: bool,
}

impl GenDataArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), spec: DatasetSpec::default(), force: false }
    }

    pub fn duration(mut self, seconds: f64) -> Self {
        self.spec.av = AvParams { duration_s: seconds, ..self.spec.av };
        self
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<Manifest> {
    Ok(data::write_dataset(&args.out, &args.spec, args.force)?)
}

pub const MEL_TENSOR: &str = "mel";

/// Metadata of one mel cache entry; the entry is current while both fields
/// match the clip on disk and the requested configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelCacheMeta {
    pub source_sha256: String,
    pub config: MelConfig,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessReport {
    /// Clip indices whose spectrogram was (re)computed.
    pub computed: Vec<usize>,
    pub up_to_date: usize,
}

pub fn mel_cache_path(cache: &Path, index: usize) -> PathBuf {
    cache.join(format!("clip_{index:05}.aver"))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// The cached spectrogram if it is current for `sha` and `config`.
fn cached_mel(path: &Path, sha: &str, config: &MelConfig) -> Option<Tensor> {
    let ck = Checkpoint::load(path).ok()?;
    let meta: MelCacheMeta = ck.meta().ok()?;
    if meta.source_sha256 != sha || &meta.config != config {
        return None;
    }
    let t = ck.tensor(MEL_TENSOR).ok()?;
    (t.shape().len() == 2 && t.shape()[1] == config.n_mels).then(|| t.clone())
}

fn av_count(data: &Path) -> Result<usize> {
    let m = Manifest::load(data)?;
    match m.av() {
        Ok(f) => Ok(f.info.count),
        Err(_) => Err(CommandError::Usage(format!("{} has no audio-visual clips (generated with --n-av 0)", data.display()))),
    }
}

/// Compute the log-mel spectrogram of every clip into `cache`, skipping
/// entries whose source hash and configuration are unchanged.
pub fn preprocess_audio(data: &Path, cache: &Path, config: &MelConfig) -> Result<PreprocessReport> {
    let n = av_count(data)?;
    std::fs::create_dir_all(cache).map_err(io_err(cache))?;
    let mut report = PreprocessReport::default();
    for i in 0..n {
        let wav = data::clip_path(data, i);
        let sha = file_sha256(&wav)?;
        let entry = mel_cache_path(cache, i);
        if cached_mel(&entry, &sha, config).is_some() {
            report.up_to_date += 1;
            continue;
        }
        let mel = mel_spectrogram(&read_wav(&wav)?, config)?;
        let mut ck = Checkpoint::new();
        ck.push_tensor(MEL_TENSOR, Tensor::new(vec![mel.n_frames, config.n_mels], mel.frames).expect("mel shape"));
        ck.set_meta(&MelCacheMeta { source_sha256: sha, config: *config })?;
        ck.save(&entry)?;
        report.computed.push(i);
    }
    Ok(report)
}

/// Cached spectrograms `[T, n_mels]` of the clips of `split`; every entry
/// must be current.
pub fn load_mels(data: &Path, cache: &Path, split: Split, config: &MelConfig) -> Result<Vec<Tensor>> {
    let n = av_count(data)?;
    let range = data::SplitRanges::for_count(n).get(split);
    let mut out = Vec::with_capacity(range.len());
    let mut stale = Vec::new();
    for i in range {
        let entry = mel_cache_path(cache, i);
        match cached_mel(&entry, &file_sha256(&data::clip_path(data, i))?, config) {
            Some(t) => out.push(t),
            None => stale.push(entry.display().to_string()),
        }
    }
    if stale.is_empty() {
        Ok(out)
    } else {
        let more = if stale.len() > 3 { format!(" and {} more", stale.len() - 3) } else { String::new() };
        stale.truncate(3);
        stale.last_mut().expect("non-empty").push_str(&more);
        Err(CommandError::Missing {
            files: stale,
            hint: format!("run `aver preprocess-audio --data {} --cache {}` first", data.display(), cache.display()),
        })
    }
}
