use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Dense, Init};
use super::{load_params, ModelError, Result};
use crate::tensor::{ParamStore, Session, Tensor, Var};

pub const EMBEDDING_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioNetConfig {
    pub n_mels: usize,
    /// Output channels of each conv stage.
    pub stage_channels: Vec<usize>,
    /// 3×3 conv + ReLU layers per stage. Every stage but the last ends in a
    /// 2×2 max-pool; the last is followed by global average pooling.
    pub stage_convs: Vec<usize>,
    /// Fully connected stack after pooling; the last entry is the embedding.
    pub fc_dims: Vec<usize>,
    /// Tanh outputs of the prediction head (1 per affect dimension).
    pub outputs: usize,
}

impl Default for AudioNetConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            stage_channels: vec![4, 8, 16, 32],
            stage_convs: vec![1, 1, 2, 2],
            fc_dims: vec![256, 256, EMBEDDING_DIM],
            outputs: 1,
        }
    }
}

impl AudioNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_convs.len() {
            return Err(ModelError::Config("stage_channels and stage_convs must be non-empty and equally long".into()));
        }
        if self.fc_dims.last() != Some(&EMBEDDING_DIM) {
            return Err(ModelError::Config(format!("the last FC layer must have {EMBEDDING_DIM} units")));
        }
        if self.outputs == 0 || self.stage_convs.contains(&0) || self.stage_channels.contains(&0) || self.fc_dims.contains(&0) {
            return Err(ModelError::Config("audio net sizes must be positive".into()));
        }
        if self.n_mels < self.min_frames() {
            return Err(ModelError::Config(format!("{} mel bands cannot survive the pooling stack", self.n_mels)));
        }
        Ok(())
    }

    /// Shortest spectrogram (in frames) the pooling stack accepts; at this
    /// length the final stage sees a single time step.
    pub fn min_frames(&self) -> usize {
        1 << (self.stage_channels.len() - 1)
    }

    /// Time steps left after the pooling stack for `frames` input frames.
    pub fn output_steps(&self, frames: usize) -> usize {
        (0..self.stage_channels.len() - 1).fold(frames, |t, _| t / 2)
    }
}

/// VGG-style network over log-mel spectrograms treated as one-channel images.
pub struct AudioNet {
    pub config: AudioNetConfig,
    pub store: ParamStore,
    stages: Vec<Vec<Conv2d>>,
    fc: Vec<Dense>,
    head: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct AudioOutput {
    /// `[B, 128]`
    pub embedding: Var,
    /// `[B, outputs]` in `(−1, 1)`.
    pub prediction: Var,
}

impl AudioNet {
    pub fn new(config: AudioNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 1;
        let mut stages = Vec::new();
        for (si, (&ch, &n)) in config.stage_channels.iter().zip(&config.stage_convs).enumerate() {
            let mut convs = Vec::new();
            for ci in 0..n {
                convs.push(Conv2d::new(&mut store, &mut rng, &format!("stage.{si}.{ci}"), cin, ch, 3, 1, 1, true));
                cin = ch;
            }
            stages.push(convs);
        }
        let mut fc = Vec::new();
        let last = config.fc_dims.len() - 1;
        for (i, &d) in config.fc_dims.iter().enumerate() {
            let init = if i < last { Init::Relu } else { Init::Linear };
            fc.push(Dense::new(&mut store, &mut rng, &format!("fc.{i}"), cin, d, init));
            cin = d;
        }
        let head = Dense::new(&mut store, &mut rng, "head", EMBEDDING_DIM, config.outputs, Init::Zero);
        Ok(Self { config, store, stages, fc, head })
    }

    pub fn from_params(config: AudioNetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        load_params(&mut net.store, params)?;
        Ok(net)
    }

    /// Conv stack over `mel: [B, T, n_mels]`, returning `[B, C, T', F']`.
    fn trunk(&self, s: &mut Session<'_>, mel: Var) -> Result<Var> {
        let shape = s.tape.shape(mel).to_vec();
        if shape.len() != 3 || shape[2] != self.config.n_mels {
            return Err(ModelError::Dimension(format!(
                "audio net expects [B, T, {}] spectrograms, got {shape:?}",
                self.config.n_mels
            )));
        }
        let min = self.config.min_frames();
        if shape[1] < min {
            return Err(ModelError::TooShort { got: shape[1], min });
        }
        let mut x = s.tape.reshape(mel, &[shape[0], 1, shape[1], shape[2]])?;
        let last = self.stages.len() - 1;
        for (si, stage) in self.stages.iter().enumerate() {
            for conv in stage {
                x = conv.forward(s, x)?;
                x = s.tape.relu(x);
            }
            if si < last {
                x = s.tape.max_pool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    fn fc_stack(&self, s: &mut Session<'_>, mut x: Var) -> Result<Var> {
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i < last {
                x = s.tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Globally pooled conv features `[B, C]`, before the FC stack.
    pub fn pooled_features(&self, s: &mut Session<'_>, mel: Var) -> Result<Var> {
        let x = self.trunk(s, mel)?;
        Ok(s.tape.global_avg_pool(x)?)
    }

    /// Per-step conv features `[B, T', C]` (frequency pooled, time kept),
    /// before the FC stack.
    pub fn step_features(&self, s: &mut Session<'_>, mel: Var) -> Result<Var> {
        let x = self.trunk(s, mel)?;
        let f = s.tape.mean_axis(x, 3)?;
        Ok(s.tape.permute(f, &[0, 2, 1])?)
    }

    pub fn forward(&self, s: &mut Session<'_>, mel: Var) -> Result<AudioOutput> {
        let pooled = self.pooled_features(s, mel)?;
        let embedding = self.fc_stack(s, pooled)?;
        let z = self.head.forward(s, embedding)?;
        let prediction = s.tape.tanh(z);
        Ok(AudioOutput { embedding, prediction })
    }

    /// Embedding sequence `[B, T', 128]`: the FC stack applied to every
    /// time step of [`AudioNet::step_features`].
    pub fn features_sequence(&self, s: &mut Session<'_>, mel: Var) -> Result<Var> {
        let steps = self.step_features(s, mel)?;
        let shape = s.tape.shape(steps).to_vec();
        let flat = s.tape.reshape(steps, &[shape[0] * shape[1], shape[2]])?;
        let emb = self.fc_stack(s, flat)?;
        Ok(s.tape.reshape(emb, &[shape[0], shape[1], EMBEDDING_DIM])?)
    }

    /// Eval-mode predictions for `[B, T, n_mels]`.
    pub fn predict(&self, mel: Tensor) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let x = s.input(mel);
        let out = self.forward(&mut s, x)?;
        Ok(s.tape.value(out.prediction).clone())
    }

    /// Eval-mode embedding sequence for `[B, T, n_mels]`.
    pub fn infer_sequence(&self, mel: Tensor) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let x = s.input(mel);
        let y = self.features_sequence(&mut s, x)?;
        Ok(s.tape.value(y).clone())
    }
}
