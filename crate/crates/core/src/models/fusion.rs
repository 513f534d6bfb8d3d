use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv1d, Dense, Init};
use super::{load_params, ModelError, Result};
use crate::tensor::{xavier_uniform, LstmLayer, ParamId, ParamStore, Session, Tensor, Var};

/// Which modalities feed the fusion net. A disabled modality's input
/// sequence is replaced by zeros before its pre-transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mask {
    Both,
    AudioOnly,
    VisualOnly,
}

impl Mask {
    pub const ALL: [Mask; 3] = [Mask::VisualOnly, Mask::AudioOnly, Mask::Both];

    pub fn from_flags(audio: bool, visual: bool) -> Result<Self> {
        match (audio, visual) {
            (true, true) => Ok(Mask::Both),
            (true, false) => Ok(Mask::AudioOnly),
            (false, true) => Ok(Mask::VisualOnly),
            (false, false) => Err(ModelError::Contract("at least one modality must stay enabled".into())),
        }
    }

    pub fn uses_audio(self) -> bool {
        self != Mask::VisualOnly
    }

    pub fn uses_visual(self) -> bool {
        self != Mask::AudioOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mask::Both => "both",
            Mask::AudioOnly => "audio-only",
            Mask::VisualOnly => "visual-only",
        }
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mask {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Mask::Both),
            "audio-only" => Ok(Mask::AudioOnly),
            "visual-only" => Ok(Mask::VisualOnly),
            "none" => Mask::from_flags(false, false),
            other => Err(ModelError::Config(format!(
                "unknown mask {other:?}; expected both, audio-only or visual-only"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNetConfig {
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Channels of each pre-transform output.
    pub pre_channels: usize,
    /// Steps after adaptive pooling.
    pub steps: usize,
    /// Stride-2, kernel-3 convs on the visual sequence.
    pub visual_convs: usize,
    pub lstm_layers: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        Self {
            audio_dim: 128,
            visual_dim: 128,
            pre_channels: 64,
            steps: 9,
            visual_convs: 2,
            lstm_layers: 2,
            hidden: 256,
            outputs: 2,
        }
    }
}

impl FusionNetConfig {
    /// Shortest audio sequence whose pre-transform still yields `steps`.
    pub fn min_audio_len(&self) -> usize {
        self.steps
    }

    /// Shortest visual sequence whose strided convs still yield `steps`.
    pub fn min_visual_len(&self) -> usize {
        (0..self.visual_convs).fold(self.steps, |n, _| 2 * n + 1)
    }

    fn validate(&self) -> Result<()> {
        let sizes = [self.audio_dim, self.visual_dim, self.pre_channels, self.steps, self.lstm_layers, self.hidden, self.outputs];
        if sizes.contains(&0) {
            return Err(ModelError::Config("fusion net sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Model-level fusion: per-modality 1-D conv pre-transforms pooled to
/// `[steps, pre_channels]`, concatenated, a stacked LSTM, then a tanh
/// regression head on the last step.
pub struct FusionNet {
    pub config: FusionNetConfig,
    pub store: ParamStore,
    visual_pre: Vec<Conv1d>,
    audio_pre: Conv1d,
    lstm: Vec<(ParamId, ParamId, ParamId)>,
    head: Dense,
}

impl FusionNet {
    pub fn new(config: FusionNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut cin = c.visual_dim;
        let mut visual_pre = Vec::new();
        for i in 0..c.visual_convs {
            visual_pre.push(Conv1d::new(&mut store, &mut rng, &format!("visual_pre.{i}"), cin, c.pre_channels, 3, 2, 0));
            cin = c.pre_channels;
        }
        let audio_pre = Conv1d::new(&mut store, &mut rng, "audio_pre.0", c.audio_dim, c.pre_channels, 3, 1, 1);
        let mut lstm = Vec::new();
        let mut input = 2 * c.pre_channels;
        let h = c.hidden;
        for l in 0..c.lstm_layers {
            let w_ih = store.add(format!("lstm.{l}.w_ih"), xavier_uniform(&mut rng, &[input, 4 * h], input, h), true);
            let w_hh = store.add(format!("lstm.{l}.w_hh"), xavier_uniform(&mut rng, &[h, 4 * h], h, h), true);
            let bias = store.add(format!("lstm.{l}.bias"), Tensor::zeros(&[4 * h]), true);
            lstm.push((w_ih, w_hh, bias));
            input = h;
        }
        let head = Dense::new(&mut store, &mut rng, "head", h, c.outputs, Init::Zero);
        Ok(Self {
            config,
            store,
            visual_pre,
            audio_pre,
            lstm,
            head,
        })
    }

    pub fn from_params(config: FusionNetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        load_params(&mut net.store, params)?;
        Ok(net)
    }

    fn check_seq(&self, s: &Session<'_>, x: Var, dim: usize, min: usize, what: &str) -> Result<usize> {
        let shape = s.tape.shape(x);
        if shape.len() != 3 || shape[2] != dim {
            return Err(ModelError::Dimension(format!("{what} sequence must be [B, T, {dim}], got {shape:?}")));
        }
        if shape[1] < min {
            return Err(ModelError::TooShort { got: shape[1], min });
        }
        Ok(shape[0])
    }

    fn zeros_like(s: &mut Session<'_>, x: Var) -> Var {
        let shape = s.tape.shape(x).to_vec();
        s.input(Tensor::zeros(&shape))
    }

    /// `[B, Tv, visual_dim]` → `[B, steps, pre_channels]`.
    pub fn pretransform_visual(&self, s: &mut Session<'_>, seq: Var) -> Result<Var> {
        self.check_seq(s, seq, self.config.visual_dim, self.config.min_visual_len(), "visual")?;
        let mut x = s.tape.permute(seq, &[0, 2, 1])?;
        for conv in &self.visual_pre {
            x = conv.forward(s, x)?;
            x = s.tape.relu(x);
        }
        let x = s.tape.adaptive_avg_pool1d(x, self.config.steps)?;
        Ok(s.tape.permute(x, &[0, 2, 1])?)
    }

    /// `[B, Ta, audio_dim]` → `[B, steps, pre_channels]`.
    pub fn pretransform_audio(&self, s: &mut Session<'_>, seq: Var) -> Result<Var> {
        self.check_seq(s, seq, self.config.audio_dim, self.config.min_audio_len(), "audio")?;
        let x = s.tape.permute(seq, &[0, 2, 1])?;
        let x = self.audio_pre.forward(s, x)?;
        let x = s.tape.relu(x);
        let x = s.tape.adaptive_avg_pool1d(x, self.config.steps)?;
        Ok(s.tape.permute(x, &[0, 2, 1])?)
    }

    /// Concatenated pre-transform outputs `[B, steps, 2·pre_channels]`.
    pub fn fused_sequence(&self, s: &mut Session<'_>, audio: Var, visual: Var, mask: Mask) -> Result<Var> {
        let ba = self.check_seq(s, audio, self.config.audio_dim, self.config.min_audio_len(), "audio")?;
        let bv = self.check_seq(s, visual, self.config.visual_dim, self.config.min_visual_len(), "visual")?;
        if ba != bv {
            return Err(ModelError::Dimension(format!("audio batch {ba} != visual batch {bv}")));
        }
        let audio = if mask.uses_audio() { audio } else { Self::zeros_like(s, audio) };
        let visual = if mask.uses_visual() { visual } else { Self::zeros_like(s, visual) };
        let a = self.pretransform_audio(s, audio)?;
        let v = self.pretransform_visual(s, visual)?;
        Ok(s.tape.concat(&[a, v], 2)?)
    }

    /// `(arousal, valence)` predictions `[B, outputs]` in `(−1, 1)`.
    pub fn forward(&self, s: &mut Session<'_>, audio: Var, visual: Var, mask: Mask) -> Result<Var> {
        let fused = self.fused_sequence(s, audio, visual, mask)?;
        let layers: Vec<LstmLayer> = self
            .lstm
            .iter()
            .map(|&(w_ih, w_hh, bias)| LstmLayer {
                w_ih: s.param(w_ih),
                w_hh: s.param(w_hh),
                bias: s.param(bias),
            })
            .collect();
        let out = s.tape.lstm(fused, &layers)?;
        let z = self.head.forward(s, out.last)?;
        Ok(s.tape.tanh(z))
    }

    pub fn predict(&self, audio: Tensor, visual: Tensor, mask: Mask) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let a = s.input(audio);
        let v = s.input(visual);
        let y = self.forward(&mut s, a, v, mask)?;
        Ok(s.tape.value(y).clone())
    }
}
