use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_mels, load_model, write_text, CommandError, Model, ModelMeta, Result};
use crate::data::{load_av_split, load_image_split, load_triplet_split, AvSample, Split};
use crate::models::Mask;
use crate::training::{
    audio_clip_set, ccc_report, evaluate_audio, evaluate_fusion, evaluate_visual, extract_fusion_features, EvalMetrics,
    FusionFeatures, MetricsRecord, WindowConfig, METRICS_VERSION,
};

pub const REPORT_VERSION: u32 = 1;

/// Options of `eval`.
#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub data: PathBuf,
    /// Mel cache; `None` means `<data>/cache`.
    pub cache: Option<PathBuf>,
    pub splits: Vec<Split>,
    pub report: Option<PathBuf>,
    /// Ablation grid as CSV; needs one fusion checkpoint per mask.
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v: u32,
    pub data: String,
    pub checkpoints: Vec<CheckpointReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation_grid: Option<AblationGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub path: String,
    pub kind: String,
    /// One record per evaluated split.
    pub records: Vec<MetricsRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCcc {
    pub arousal: f64,
    pub valence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// `visual-only`, `audio-only` or `audio-visual`.
    pub row: String,
    pub checkpoint: String,
    pub train: SplitCcc,
    pub dev: SplitCcc,
    pub test: SplitCcc,
}

/// CCC by modality row, split and affect dimension. `cells` counts the
/// train and dev entries; test is reported beside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<GridRow>,
    pub cells: usize,
}

impl AblationGrid {
    pub fn csv(&self) -> String {
        let mut out = String::from("model,train_arousal,train_valence,dev_arousal,dev_valence,test_arousal,test_valence\n");
        for r in &self.rows {
            let v = [r.train, r.dev, r.test].map(|c| format!("{},{}", c.arousal, c.valence));
            out.push_str(&format!("{},{}\n", r.row, v.join(",")));
        }
        out
    }
}

fn row_name(mask: Mask) -> &'static str {
    match mask {
        Mask::VisualOnly => "visual-only",
        Mask::AudioOnly => "audio-only",
        Mask::Both => "audio-visual",
    }
}

struct Loaded {
    path: PathBuf,
    meta: ModelMeta,
    model: Model,
}

impl Loaded {
    fn kind(&self) -> &'static str {
        match self.meta {
            ModelMeta::Visual { .. } => "visual",
            ModelMeta::Audio { .. } => "audio",
            ModelMeta::Fusion { .. } => "fusion",
            ModelMeta::Oracle { .. } => "oracle",
        }
    }

    fn run_and_step(&self) -> (String, usize) {
        match &self.meta {
            ModelMeta::Visual { info, .. } | ModelMeta::Audio { info, .. } | ModelMeta::Fusion { info, .. } => {
                (info.run.clone(), info.best_step)
            }
            ModelMeta::Oracle { mask, .. } => (format!("oracle-{mask}"), 0),
        }
    }

    fn mask(&self) -> Option<Mask> {
        match self.meta {
            ModelMeta::Fusion { mask, .. } | ModelMeta::Oracle { mask, .. } => Some(mask),
            _ => None,
        }
    }
}

/// Split data loaded on first use and shared across checkpoints.
struct Evaluator<'a> {
    args: &'a EvalArgs,
    clips: BTreeMap<Split, Vec<AvSample>>,
    features: BTreeMap<(Vec<String>, Split), FusionFeatures>,
}

impl Evaluator<'_> {
    fn cache(&self) -> PathBuf {
        self.args.cache.clone().unwrap_or_else(|| self.args.data.join("cache"))
    }

    fn clips(&mut self, split: Split) -> Result<&[AvSample]> {
        if !self.clips.contains_key(&split) {
            let c = load_av_split(&self.args.data, split)?;
            self.clips.insert(split, c);
        }
        Ok(&self.clips[&split])
    }

    fn evaluate(&mut self, m: &Loaded, split: Split) -> Result<EvalMetrics> {
        let data = self.args.data.clone();
        match (&m.meta, &m.model) {
            (ModelMeta::Visual { .. }, Model::Visual(net)) => {
                Ok(evaluate_visual(net, &load_triplet_split(&data, split)?, &load_image_split(&data, split)?, split)?)
            }
            (ModelMeta::Audio { target, mel, .. }, Model::Audio(net)) => {
                let mels = load_mels(&data, &self.cache(), split, mel)?;
                let set = audio_clip_set(self.clips(split)?, &mels)?;
                Ok(evaluate_audio(net, *target, &set, split)?)
            }
            (ModelMeta::Fusion { mask, window, mel, extractor_checksums, .. }, Model::Fusion(fm)) => {
                let key = (extractor_checksums.clone(), split);
                if !self.features.contains_key(&key) {
                    let mels = load_mels(&data, &self.cache(), split, mel)?;
                    let audio: Vec<_> = fm.audio.iter().collect();
                    let f = extract_fusion_features(&fm.visual, &audio, self.clips(split)?, &mels, *window)?;
                    self.features.insert(key.clone(), f);
                }
                Ok(evaluate_fusion(&fm.net, &self.features[&key], *mask, split)?)
            }
            (ModelMeta::Oracle { window, .. }, Model::Oracle) => {
                let targets = window_targets(self.clips(split)?, *window);
                Ok(ccc_report(&targets, &targets, split)?)
            }
            _ => unreachable!("load_model pairs each kind with its model"),
        }
    }
}

/// Window-mean `(arousal, valence)` of every window of every clip.
pub fn window_targets(clips: &[AvSample], window: WindowConfig) -> Vec<[f32; 2]> {
    clips
        .iter()
        .flat_map(|c| window.starts(c.n_frames()).into_iter().map(move |s| c.mean_target(s..s + window.frames)))
        .collect()
}

fn ccc_pair(e: &EvalMetrics) -> SplitCcc {
    SplitCcc { arousal: e.ccc_arousal.unwrap_or(f64::NAN), valence: e.ccc_valence.unwrap_or(f64::NAN) }
}

/// Evaluate every checkpoint on the requested splits and, when the fusion
/// checkpoints cover all three masks, build the ablation grid.
pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    if args.checkpoints.is_empty() || args.splits.is_empty() {
        return Err(CommandError::Usage("eval needs at least one checkpoint and one split".into()));
    }
    let loaded = args
        .checkpoints
        .iter()
        .map(|p| load_model(p).map(|(meta, model)| Loaded { path: p.clone(), meta, model }))
        .collect::<Result<Vec<_>>>()?;
    let mut ev = Evaluator { args, clips: BTreeMap::new(), features: BTreeMap::new() };
    let mut memo: BTreeMap<(usize, Split), EvalMetrics> = BTreeMap::new();
    let mut get = |ev: &mut Evaluator, i: usize, split: Split| -> Result<EvalMetrics> {
        if let Some(e) = memo.get(&(i, split)) {
            return Ok(e.clone());
        }
        let e = ev.evaluate(&loaded[i], split)?;
        memo.insert((i, split), e.clone());
        Ok(e)
    };

    let mut reports = Vec::new();
    for (i, m) in loaded.iter().enumerate() {
        let (run, step) = m.run_and_step();
        let mut records = Vec::new();
        for &split in &args.splits {
            let eval = get(&mut ev, i, split)?;
            records.push(MetricsRecord { v: METRICS_VERSION, run: run.clone(), step, loss: None, eval: Some(eval), wall_time_s: None });
        }
        reports.push(CheckpointReport { path: display(&m.path), kind: m.kind().into(), records });
    }

    let mut by_mask: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in loaded.iter().enumerate() {
        if let Some(mask) = m.mask() {
            by_mask.entry(row_name(mask)).or_default().push(i);
        }
    }
    let complete = Mask::ALL.iter().all(|&mask| by_mask.get(row_name(mask)).is_some_and(|v| v.len() == 1));
    let grid = if complete {
        let mut rows = Vec::new();
        for mask in Mask::ALL {
            let i = by_mask[row_name(mask)][0];
            rows.push(GridRow {
                row: row_name(mask).into(),
                checkpoint: display(&loaded[i].path),
                train: ccc_pair(&get(&mut ev, i, Split::Train)?),
                dev: ccc_pair(&get(&mut ev, i, Split::Val)?),
                test: ccc_pair(&get(&mut ev, i, Split::Test)?),
            });
        }
        let cells = rows.len() * 2 * 2;
        Some(AblationGrid { rows, cells })
    } else {
        None
    };

    let report = EvalReport { v: REPORT_VERSION, data: display(&args.data), checkpoints: reports, ablation_grid: grid };
    if let Some(path) = &args.csv {
        let grid = report.ablation_grid.as_ref().ok_or_else(|| {
            CommandError::Usage("the ablation grid needs exactly one fusion checkpoint per mask (visual-only, audio-only, both)".into())
        })?;
        write_text(path, &grid.csv())?;
    }
    if let Some(path) = &args.report {
        write_text(path, &(report_json(&report) + "\n"))?;
    }
    Ok(report)
}

/// The report as pretty-printed JSON.
pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("serializable report")
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
