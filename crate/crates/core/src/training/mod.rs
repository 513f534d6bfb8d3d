//! Training procedures: the two-teacher visual run, the distilled student,
//! audio fine-tuning, and fusion over frozen extractors, plus evaluation.

mod audio;
mod fusion;
mod metrics;
mod visual;

pub use audio::{audio_clip_set, evaluate_audio, finetune_audio, AudioTarget, ClipSet};
pub use fusion::{
    ccc_report, evaluate_fusion, extract_fusion_features, fusion_predictions, train_fusion, AudioSource, FusionFeatures,
    FusionWindow, WindowConfig,
};
pub use metrics::{EvalMetrics, LossTerms, MetricsLog, MetricsRecord, METRICS_VERSION};
pub use visual::{
    distill_targets, evaluate_visual, train_student, train_teacher, DistillTargets, StudentOptions, VisualData,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::dsp::DspError;
use crate::models::{ModelError, VisualNet};
use crate::tensor::{OptimizerKind, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step} of {run}")]
    NonFinite { run: String, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Hyperparameters shared by every procedure; each reads the fields that
/// apply to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Triplets per step (each contributes three images).
    pub batch_triplets: usize,
    /// Labelled classification images per step.
    pub batch_images: usize,
    pub batch_unlabeled: usize,
    /// 30 s spectrograms per audio step.
    pub batch_clips: usize,
    /// Fusion windows per step.
    pub batch_windows: usize,
    pub optimizer: OptimizerKind,
    /// Weight of the classification loss.
    pub alpha: f32,
    pub distill_weight: f32,
    pub margin: f32,
    pub seed: u64,
    /// Validation cadence in steps; the final step is always evaluated.
    pub eval_every: usize,
    /// Loss logging cadence in steps; step 1 is always logged.
    pub log_every: usize,
    /// Record elapsed seconds in metrics (makes files run-dependent).
    pub wall_time: bool,
}

impl TrainConfig {
    pub fn visual() -> Self {
        Self {
            steps: 3000,
            batch_triplets: 16,
            batch_images: 32,
            batch_unlabeled: 32,
            batch_clips: 8,
            batch_windows: 32,
            optimizer: OptimizerKind::Sgd { lr: 0.01, momentum: 0.9 },
            alpha: 1.0,
            distill_weight: 1.0,
            margin: 0.2,
            seed: 0,
            eval_every: 500,
            log_every: 50,
            wall_time: false,
        }
    }

    pub fn audio() -> Self {
        Self {
            steps: 400,
            optimizer: OptimizerKind::Adam { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            eval_every: 100,
            log_every: 10,
            ..Self::visual()
        }
    }

    pub fn fusion() -> Self {
        Self { steps: 1500, eval_every: 250, log_every: 50, ..Self::audio() }
    }

    fn validate(&self, min_batch: &[(&str, usize, usize)]) -> Result<()> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be positive".into()));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(TrainError::Config("eval_every and log_every must be positive".into()));
        }
        for &(name, value, min) in min_batch {
            if value < min {
                return Err(TrainError::Config(format!("{name} = {value} is below the minimum of {min}")));
            }
        }
        Ok(())
    }
}

/// Sampling without replacement over `n` items; when the order is exhausted
/// it is reshuffled and sampling continues, so no step is ever truncated.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    epochs: usize,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(TrainError::Config("cannot sample from an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng, epochs: 0 })
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epochs += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Completed passes over the data.
    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

/// Rows `idx` of `t` along the leading axis.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let row = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// Concatenate tensors along the leading axis.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("row concat")
}

/// Eval-mode `(e_face, fec, aff)` over `images` in chunks of `chunk`.
pub fn infer_visual(net: &VisualNet, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let n = images.shape()[0];
    let (mut e, mut f, mut a) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (ei, fi, ai) = net.infer(gather_rows(images, &idx))?;
        e.push(ei);
        f.push(fi);
        a.push(ai);
        start += chunk;
    }
    let cat = |v: &Vec<Tensor>| concat_rows(&v.iter().collect::<Vec<_>>());
    Ok((cat(&e), cat(&f), cat(&a)))
}

/// Outcome of one training run: the parameters of the best validation
/// point and where it occurred.
#[derive(Clone, Debug)]
pub struct Trained {
    pub store: ParamStore,
    pub best_step: usize,
    /// Selection metric at `best_step` (higher is better).
    pub best_score: f64,
    pub last_step_loss: f32,
}

pub(crate) fn check_finite(loss: f32, run: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { run: run.into(), step })
    }
}

pub(crate) fn should_log(step: usize, every: usize, last: usize) -> bool {
    step == 1 || step % every == 0 || step == last
}

pub(crate) fn should_eval(step: usize, every: usize, last: usize) -> bool {
    step % every == 0 || step == last
}
