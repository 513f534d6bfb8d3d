use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    check_finite, gather_rows, should_eval, should_log, Batcher, EvalMetrics, LossTerms, MetricsLog, Result,
    TrainConfig, TrainError, Trained,
};
use crate::data::{AvSample, Split};
use crate::losses::{ccc, neg_ccc_loss};
use crate::models::AudioNet;
use crate::tensor::{Optimizer, Session, Tensor};

const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioTarget {
    Arousal,
    Valence,
    /// Both dimensions, loss = mean of the two negative CCCs.
    Combined,
}

impl AudioTarget {
    /// Trace columns predicted, in output order.
    pub fn columns(self) -> &'static [usize] {
        match self {
            AudioTarget::Arousal => &[0],
            AudioTarget::Valence => &[1],
            AudioTarget::Combined => &[0, 1],
        }
    }

    pub fn outputs(self) -> usize {
        self.columns().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AudioTarget::Arousal => "arousal",
            AudioTarget::Valence => "valence",
            AudioTarget::Combined => "combined",
        }
    }
}

impl fmt::Display for AudioTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AudioTarget {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arousal" => Ok(AudioTarget::Arousal),
            "valence" => Ok(AudioTarget::Valence),
            "combined" => Ok(AudioTarget::Combined),
            _ => Err(TrainError::Config(format!("unknown audio target {s:?}, expected arousal, valence or combined"))),
        }
    }
}

/// Whole-clip log-mel spectrograms with their clip-mean `(arousal, valence)`.
#[derive(Clone, Debug)]
pub struct ClipSet {
    /// `[N, T, n_mels]`
    pub mels: Tensor,
    pub targets: Vec<[f32; 2]>,
}

impl ClipSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Pair each clip with its `[T, n_mels]` spectrogram; all must share `T`.
pub fn audio_clip_set(clips: &[AvSample], mels: &[Tensor]) -> Result<ClipSet> {
    if clips.is_empty() || clips.len() != mels.len() {
        return Err(TrainError::Config(format!("{} clips but {} spectrograms", clips.len(), mels.len())));
    }
    let shape = mels[0].shape().to_vec();
    if shape.len() != 2 || mels.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(TrainError::Config("spectrograms must all be [T, n_mels] with one T".into()));
    }
    let data = mels.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok(ClipSet {
        mels: Tensor::new(vec![mels.len(), shape[0], shape[1]], data)?,
        targets: clips.iter().map(|c| c.mean_target(0..c.n_frames())).collect(),
    })
}

fn target_tensor(set: &ClipSet, idx: &[usize], target: AudioTarget) -> Tensor {
    let cols = target.columns();
    let data = idx.iter().flat_map(|&i| cols.iter().map(move |&c| set.targets[i][c])).collect();
    Tensor::new(vec![idx.len(), cols.len()], data).expect("target matrix")
}

/// Eval-mode per-dimension CCC between clip predictions and clip means.
pub fn evaluate_audio(net: &AudioNet, target: AudioTarget, set: &ClipSet, split: Split) -> Result<EvalMetrics> {
    if net.config.outputs != target.outputs() {
        return Err(TrainError::Config(format!("network has {} outputs, target {target} needs {}", net.config.outputs, target.outputs())));
    }
    let k = target.outputs();
    let mut preds = Vec::with_capacity(set.len() * k);
    let mut start = 0;
    while start < set.len() {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(set.len())).collect();
        preds.extend_from_slice(net.predict(gather_rows(&set.mels, &idx))?.data());
        start += EVAL_BATCH;
    }
    let mut out = EvalMetrics { split: Some(split), ..Default::default() };
    for (j, &col) in target.columns().iter().enumerate() {
        let p: Vec<f32> = preds.iter().skip(j).step_by(k).copied().collect();
        let t: Vec<f32> = set.targets.iter().map(|v| v[col]).collect();
        let c = ccc(&t, &p)?.ccc;
        if col == 0 {
            out.ccc_arousal = Some(c);
        } else {
            out.ccc_valence = Some(c);
        }
    }
    Ok(out)
}

/// Fine-tune on batches of whole clips against clip-mean targets with the
/// negative-CCC loss (mean over dimensions in combined mode).
pub fn finetune_audio(
    mut net: AudioNet,
    cfg: &TrainConfig,
    target: AudioTarget,
    train: &ClipSet,
    val: &ClipSet,
    log: &mut MetricsLog,
    run: &str,
) -> Result<(AudioNet, Trained)> {
    if cfg.batch_clips < 2 {
        return Err(TrainError::Contract(format!(
            "batch_clips = {}: CCC is undefined for fewer than 2 clips",
            cfg.batch_clips
        )));
    }
    cfg.validate(&[])?;
    if net.config.outputs != target.outputs() {
        return Err(TrainError::Config(format!("network has {} outputs, target {target} needs {}", net.config.outputs, target.outputs())));
    }
    let mut batcher = Batcher::new(train.len(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut best: Option<Trained> = None;
    let mut last_loss = 0.0;
    let weight = 1.0 / target.outputs() as f32;
    for step in 1..=cfg.steps {
        let idx = batcher.next_batch(cfg.batch_clips);
        let mut s = Session::training(&net.store);
        let x = s.input(gather_rows(&train.mels, &idx));
        let out = net.forward(&mut s, x)?;
        let summed = neg_ccc_loss(&mut s.tape, out.prediction, &target_tensor(train, &idx, target))?;
        let loss = if target.outputs() > 1 { s.tape.scale(summed, weight) } else { summed };
        let total = s.tape.item(loss);
        check_finite(total, run, step)?;
        let grads = s.backward(loss)?;
        let stats = s.take_stat_updates();
        drop(s);
        opt.step(&mut net.store, &grads)?;
        net.store.apply_stats(stats);
        last_loss = total;

        let eval = if should_eval(step, cfg.eval_every, cfg.steps) {
            Some(evaluate_audio(&net, target, val, Split::Val)?)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{av_sample, AvParams};
    use crate::dsp::{mel_spectrogram, MelConfig};
    use crate::models::AudioNetConfig;

    fn small_set(n: u64, seed: u64) -> ClipSet {
        let params = AvParams { duration_s: 2.0, ..AvParams::default() };
        let cfg = MelConfig { n_mels: 32, ..MelConfig::default() };
        let clips: Vec<_> = (0..n).map(|i| av_sample(seed, i, &params).unwrap()).collect();
        let mels: Vec<_> = clips
            .iter()
            .map(|c| {
                let m = mel_spectrogram(&c.audio, &cfg).unwrap();
                Tensor::new(vec![m.n_frames, 32], m.frames).unwrap()
            })
            .collect();
        audio_clip_set(&clips, &mels).unwrap()
    }

    fn small_net(outputs: usize) -> AudioNet {
        let c = AudioNetConfig {
            n_mels: 32,
            stage_channels: vec![4, 8],
            stage_convs: vec![1, 1],
            fc_dims: vec![32, 128],
            outputs,
        };
        AudioNet::new(c, 3).unwrap()
    }

    #[test]
    fn first_loss_is_within_ccc_bounds_and_logged() {
        let set = small_set(6, 1);
        let cfg = TrainConfig { steps: 3, batch_clips: 4, eval_every: 3, log_every: 1, ..TrainConfig::audio() };
        let mut log = MetricsLog::in_memory();
        finetune_audio(small_net(1), &cfg, AudioTarget::Arousal, &set, &set, &mut log, "a").unwrap();
        let first = log.records()[0].loss.clone().unwrap();
        assert!((-1.0..=1.0).contains(&first.total));
        assert_eq!(first.ccc, Some(first.total));
        let last = log.records().last().unwrap();
        assert!(last.eval.as_ref().unwrap().ccc_arousal.is_some());
    }

    #[test]
    fn combined_mode_is_the_mean_of_both_losses() {
        let set = small_set(4, 2);
        let net = small_net(2);
        let idx = [0, 1, 2, 3];
        let mut s = Session::inference(&net.store);
        let x = s.input(gather_rows(&set.mels, &idx));
        let pred = net.forward(&mut s, x).unwrap().prediction;
        let p = s.tape.value(pred).clone();
        let both = target_tensor(&set, &idx, AudioTarget::Combined);
        let col = |t: &Tensor, j: usize| t.data().iter().skip(j).step_by(2).copied().collect::<Vec<f32>>();
        let expect = -0.5 * (ccc(&col(&both, 0), &col(&p, 0)).unwrap().ccc + ccc(&col(&both, 1), &col(&p, 1)).unwrap().ccc);
        let cfg = TrainConfig { steps: 1, batch_clips: 4, eval_every: 1, ..TrainConfig::audio() };
        let mut log = MetricsLog::in_memory();
        finetune_audio(net, &cfg, AudioTarget::Combined, &set, &set, &mut log, "c").unwrap();
        let got = log.records()[0].loss.clone().unwrap().total as f64;
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn batch_of_one_is_a_contract_error() {
        let set = small_set(3, 1);
        let cfg = TrainConfig { batch_clips: 1, ..TrainConfig::audio() };
        let mut log = MetricsLog::in_memory();
        let r = finetune_audio(small_net(1), &cfg, AudioTarget::Arousal, &set, &set, &mut log, "a");
        assert!(matches!(r, Err(TrainError::Contract(_))));
    }

    #[test]
    fn target_width_must_match_head() {
        let set = small_set(3, 1);
        let mut log = MetricsLog::in_memory();
        let r = finetune_audio(small_net(1), &TrainConfig::audio(), AudioTarget::Combined, &set, &set, &mut log, "a");
        assert!(matches!(r, Err(TrainError::Config(_))));
        assert_eq!("valence".parse::<AudioTarget>().unwrap(), AudioTarget::Valence);
    }
}
