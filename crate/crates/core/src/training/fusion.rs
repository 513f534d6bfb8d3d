use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    check_finite, concat_rows, gather_rows, should_eval, should_log, Batcher, EvalMetrics, LossTerms,
    MetricsLog, Result, TrainConfig, TrainError, Trained,
};
use crate::data::{AvSample, Split};
use crate::losses::{ccc, neg_ccc_loss};
use crate::models::{AudioNet, FusionNet, Mask, VisualNet};
use crate::tensor::{Optimizer, Session, Tensor};

const FRAME_CHUNK: usize = 250;
const EVAL_BATCH: usize = 64;

/// Fusion windows over the shared 40 ms grid (mel frames = video frames =
/// trace steps).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub frames: usize,
    pub hop: usize,
}

impl Default for WindowConfig {
    /// 3.84 s windows with 50 % overlap.
    fn default() -> Self {
        Self { frames: 96, hop: 48 }
    }
}

impl WindowConfig {
    pub fn starts(&self, n: usize) -> Vec<usize> {
        if n < self.frames || self.hop == 0 {
            return Vec::new();
        }
        (0..=(n - self.frames) / self.hop).map(|k| k * self.hop).collect()
    }
}

/// Which fine-tuned audio network(s) feed the fusion net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioSource {
    /// One network trained on both dimensions.
    Combined,
    /// The arousal and valence networks, embeddings concatenated.
    Both,
}

impl AudioSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AudioSource::Combined => "combined",
            AudioSource::Both => "both",
        }
    }
}

impl fmt::Display for AudioSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AudioSource {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(AudioSource::Combined),
            "both" => Ok(AudioSource::Both),
            _ => Err(TrainError::Config(format!("unknown audio source {s:?}, expected combined or both"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionWindow {
    pub clip: usize,
    pub start: usize,
}

/// Frozen-extractor features of a set of clips.
#[derive(Clone, Debug)]
pub struct FusionFeatures {
    /// Per clip `[n_frames, visual_dim]` face embeddings, one row per frame.
    pub visual: Vec<Tensor>,
    /// `[n_windows, T', audio_dim]` audio embedding sequences.
    pub audio: Tensor,
    pub windows: Vec<FusionWindow>,
    /// Window-mean `(arousal, valence)`.
    pub targets: Vec<[f32; 2]>,
    pub window: WindowConfig,
}

impl FusionFeatures {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// `(audio [B, T', A], visual [B, frames, V])` for windows `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let audio = gather_rows(&self.audio, idx);
        let dim = self.visual[0].shape()[1];
        let mut data = Vec::with_capacity(idx.len() * self.window.frames * dim);
        for &i in idx {
            let w = self.windows[i];
            let rows = &self.visual[w.clip].data()[w.start * dim..(w.start + self.window.frames) * dim];
            data.extend_from_slice(rows);
        }
        let visual = Tensor::new(vec![idx.len(), self.window.frames, dim], data).expect("visual window batch");
        (audio, visual)
    }

    fn target_tensor(&self, idx: &[usize]) -> Tensor {
        Tensor::new(vec![idx.len(), 2], idx.iter().flat_map(|&i| self.targets[i]).collect()).expect("targets")
    }
}

/// Run the frozen extractors over every window of `clips`. `mels[i]` is the
/// `[T, n_mels]` spectrogram of `clips[i]`; audio nets' embeddings are
/// concatenated in the given order.
pub fn extract_fusion_features(
    visual: &VisualNet,
    audio: &[&AudioNet],
    clips: &[AvSample],
    mels: &[Tensor],
    window: WindowConfig,
) -> Result<FusionFeatures> {
    if audio.is_empty() || clips.len() != mels.len() || clips.is_empty() {
        return Err(TrainError::Config("need at least one audio net and one spectrogram per clip".into()));
    }
    let mut feats = FusionFeatures { visual: Vec::new(), audio: Tensor::zeros(&[0]), windows: Vec::new(), targets: Vec::new(), window };
    let mut audio_rows: Vec<Tensor> = Vec::new();
    for (ci, (clip, mel)) in clips.iter().zip(mels).enumerate() {
        let n = clip.n_frames().min(mel.shape()[0]);
        let mut e = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + FRAME_CHUNK).min(n);
            e.push(visual.infer_embedding(clip.frames(start..end))?);
            start = end;
        }
        feats.visual.push(concat_rows(&e.iter().collect::<Vec<_>>()));

        let starts = window.starts(n);
        if starts.is_empty() {
            return Err(TrainError::Config(format!("clip {} has {n} frames, shorter than one window", clip.index)));
        }
        let bins = mel.shape()[1];
        let mut wins = Vec::with_capacity(starts.len() * window.frames * bins);
        for &s in &starts {
            wins.extend_from_slice(&mel.data()[s * bins..(s + window.frames) * bins]);
        }
        let wins = Tensor::new(vec![starts.len(), window.frames, bins], wins)?;
        let seqs: Vec<Tensor> = audio.iter().map(|a| a.infer_sequence(wins.clone())).collect::<std::result::Result<_, _>>()?;
        audio_rows.push(concat_last(&seqs));
        for &s in &starts {
            feats.windows.push(FusionWindow { clip: ci, start: s });
            feats.targets.push(clip.mean_target(s..s + window.frames));
        }
    }
    feats.audio = concat_rows(&audio_rows.iter().collect::<Vec<_>>());
    Ok(feats)
}

/// Concatenate `[N, T, D_i]` tensors along the last axis.
fn concat_last(parts: &[Tensor]) -> Tensor {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let s = parts[0].shape();
    let (rows, width) = (s[0] * s[1], parts.iter().map(|p| p.shape()[2]).sum::<usize>());
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            let d = p.shape()[2];
            data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    Tensor::new(vec![s[0], s[1], width], data).expect("feature concat")
}

/// Eval-mode `(arousal, valence)` for every window.
pub fn fusion_predictions(net: &FusionNet, feats: &FusionFeatures, mask: Mask) -> Result<Vec<[f32; 2]>> {
    let mut out = Vec::with_capacity(feats.len());
    let mut start = 0;
    while start < feats.len() {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(feats.len())).collect();
        let (a, v) = feats.batch(&idx);
        let p = net.predict(a, v, mask)?;
        out.extend(p.data().chunks_exact(2).map(|c| [c[0], c[1]]));
        start += EVAL_BATCH;
    }
    Ok(out)
}

/// Per-dimension CCC of `preds` against the window targets.
pub fn ccc_report(preds: &[[f32; 2]], targets: &[[f32; 2]], split: Split) -> Result<EvalMetrics> {
    let col = |v: &[[f32; 2]], j: usize| v.iter().map(|p| p[j]).collect::<Vec<f32>>();
    Ok(EvalMetrics {
        split: Some(split),
        ccc_arousal: Some(ccc(&col(targets, 0), &col(preds, 0))?.ccc),
        ccc_valence: Some(ccc(&col(targets, 1), &col(preds, 1))?.ccc),
        ..Default::default()
    })
}

pub fn evaluate_fusion(net: &FusionNet, feats: &FusionFeatures, mask: Mask, split: Split) -> Result<EvalMetrics> {
    ccc_report(&fusion_predictions(net, feats, mask)?, &feats.targets, split)
}

/// Train the fusion net on frozen features with the negative CCC summed
/// over arousal and valence. `mask` zeroes one modality's input throughout.
pub fn train_fusion(
    mut net: FusionNet,
    cfg: &TrainConfig,
    mask: Mask,
    train: &FusionFeatures,
    val: &FusionFeatures,
    log: &mut MetricsLog,
    run: &str,
) -> Result<(FusionNet, Trained)> {
    if cfg.batch_windows < 2 {
        return Err(TrainError::Contract(format!(
            "batch_windows = {}: CCC is undefined for fewer than 2 windows",
            cfg.batch_windows
        )));
    }
    cfg.validate(&[])?;
    let mut batcher = Batcher::new(train.len(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut best: Option<Trained> = None;
    let mut last_loss = 0.0;
    for step in 1..=cfg.steps {
        let idx = batcher.next_batch(cfg.batch_windows);
        let (a, v) = train.batch(&idx);
        let mut s = Session::training(&net.store);
        let (a, v) = (s.input(a), s.input(v));
        let pred = net.forward(&mut s, a, v, mask)?;
        let loss = neg_ccc_loss(&mut s.tape, pred, &train.target_tensor(&idx))?;
        let total = s.tape.item(loss);
        check_finite(total, run, step)?;
        let grads = s.backward(loss)?;
        drop(s);
        opt.step(&mut net.store, &grads)?;
        last_loss = total;

        let eval = if should_eval(step, cfg.eval_every, cfg.steps) {
            Some(evaluate_fusion(&net, val, mask, Split::Val)?)
        } else {
            None
        };
        if let Some(e) = &eval {
            let score = e.selection_score();
            if best.as_ref().is_none_or(|b| score > b.best_score) {
                best = Some(Trained { store: net.store.clone(), best_step: step, best_score: score, last_step_loss: total });
            }
        }
        let logged = should_log(step, cfg.log_every, cfg.steps).then_some(LossTerms { total, ccc: Some(total), ..Default::default() });
        if logged.is_some() || eval.is_some() {
            log.push(run, step, logged, eval)?;
        }
    }
    let mut best = best.expect("the final step is always evaluated");
    best.last_step_loss = last_loss;
    net.store = best.store.clone();
    Ok((net, best))
}
