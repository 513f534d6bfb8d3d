use std::path::{Path, PathBuf};

use super::{
    io_err, load_mels, load_model, save_audio, save_fusion, save_visual, write_text, AudioPart, CommandError, FusionModel,
    Model, ModelMeta, Result, RunInfo,
};
use crate::config::{RunConfig, TrainCommand};
use crate::data::{load_av_split, load_image_split, load_triplet_split, load_unlabeled, Manifest, Split};
use crate::dsp::MelConfig;
use crate::models::{AudioNet, AudioNetConfig, FusionNet, FusionNetConfig, Role, VisualNet, VisualNetConfig};
use crate::training::{
    audio_clip_set, distill_targets, evaluate_audio, evaluate_fusion, evaluate_visual, extract_fusion_features,
    finetune_audio, train_fusion, train_student, train_teacher, AudioSource, EvalMetrics, MetricsLog,
    StudentOptions, TrainError, Trained, VisualData,
};

/// Outcome of one training run within a command.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run: String,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_step: usize,
    pub best_score: f64,
    /// Validation metrics of the saved (best) parameters.
    pub val: EvalMetrics,
}

/// Run the training command of `cfg`, writing `{run}.aver`,
/// `{run}.metrics.jsonl` and `{run}.config` into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    match cfg.command {
        TrainCommand::Teacher => teachers(cfg),
        TrainCommand::Student => student(cfg).map(|s| vec![s]),
        TrainCommand::Audio => audio(cfg).map(|s| vec![s]),
        TrainCommand::Fusion => fusion(cfg).map(|s| vec![s]),
    }
}

pub fn student_run_name(cfg: &RunConfig) -> &'static str {
    match (cfg.distill, cfg.unlabeled) {
        (false, _) => "student-no-distill",
        (true, false) => "student-no-unlabeled",
        (true, true) => "student",
    }
}

/// Audio checkpoints feeding the fusion net, in concatenation order.
pub fn fusion_audio_files(source: AudioSource) -> &'static [&'static str] {
    match source {
        AudioSource::Combined => &["audio-combined.aver"],
        AudioSource::Both => &["audio-arousal.aver", "audio-valence.aver"],
    }
}

/// Per-run outputs; the log is truncated and the resolved config written
/// before training starts.
struct RunFiles {
    run: String,
    checkpoint: PathBuf,
    metrics: PathBuf,
    log: MetricsLog,
}

fn open_run(cfg: &RunConfig, run: &str) -> Result<RunFiles> {
    write_text(&cfg.out_dir.join(format!("{run}.config")), &cfg.render())?;
    let metrics = cfg.out_dir.join(format!("{run}.metrics.jsonl"));
    let log = MetricsLog::to_file(&metrics)?.with_wall_time(cfg.wall_time);
    Ok(RunFiles { run: run.into(), checkpoint: cfg.out_dir.join(format!("{run}.aver")), metrics, log })
}

fn summary(files: RunFiles, trained: &Trained, val: EvalMetrics) -> RunSummary {
    RunSummary {
        run: files.run,
        checkpoint: files.checkpoint,
        metrics: files.metrics,
        best_step: trained.best_step,
        best_score: trained.best_score,
        val,
    }
}

fn info(run: &str, seed: u64, t: &Trained) -> RunInfo {
    RunInfo { run: run.into(), seed, best_step: t.best_step, score: t.best_score }
}

fn visual_data(dir: &Path) -> Result<VisualData> {
    Ok(VisualData {
        train_triplets: load_triplet_split(dir, Split::Train)?,
        train_images: load_image_split(dir, Split::Train)?,
        unlabeled: load_unlabeled(dir)?,
        val_triplets: load_triplet_split(dir, Split::Val)?,
        val_images: load_image_split(dir, Split::Val)?,
    })
}

fn teachers(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    let size = Manifest::load(&cfg.data_dir)?.image_size;
    let data = visual_data(&cfg.data_dir)?;
    let mut out = Vec::new();
    // The two teachers differ only in seed and embedding width.
    for (k, d_face) in [(1u64, cfg.teacher1_d_face), (2, cfg.teacher2_d_face)] {
        let seed = cfg.seed + k - 1;
        let mut files = open_run(cfg, &format!("teacher{k}"))?;
        let net = VisualNet::new(VisualNetConfig { input_size: size, d_face, ..VisualNetConfig::default() }, seed)?;
        let tcfg = crate::training::TrainConfig { seed, ..cfg.train_config() };
        let (net, trained) = train_teacher(net, &tcfg, &data, &mut files.log, &files.run)?;
        save_visual(&files.checkpoint, &net, info(&files.run, seed, &trained))?;
        let val = evaluate_visual(&net, &data.val_triplets, &data.val_images, Split::Val)?;
        out.push(summary(files, &trained, val));
    }
    Ok(out)
}

/// Load `names` from `dir`, reporting every missing one at once.
fn require(dir: &Path, names: &[&str], hint: &str) -> Result<Vec<(ModelMeta, Model)>> {
    let missing: Vec<String> = names.iter().filter(|n| !dir.join(n).is_file()).map(|n| n.to_string()).collect();
    if !missing.is_empty() {
        return Err(CommandError::Missing { files: missing, hint: format!("{hint} (looked in {})", dir.display()) });
    }
    names.iter().map(|n| load_model(&dir.join(n))).collect()
}

fn expect_visual(name: &str, loaded: (ModelMeta, Model), role: Option<Role>) -> Result<VisualNet> {
    match loaded.1 {
        Model::Visual(net) if role.is_none_or(|r| net.config.role == r) => Ok(net),
        _ => Err(CommandError::Usage(format!("{name} is not a {} checkpoint", role.map_or("visual", |r| match r {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })))),
    }
}

fn student(cfg: &RunConfig) -> Result<RunSummary> {
    let names = ["teacher1.aver", "teacher2.aver"];
    let mut loaded = require(&cfg.out_dir, &names, "run `aver train teacher` with the same out_dir first")?.into_iter();
    let t1 = expect_visual(names[0], loaded.next().expect("two teachers"), Some(Role::Teacher))?;
    let t2 = expect_visual(names[1], loaded.next().expect("two teachers"), Some(Role::Teacher))?;
    let size = Manifest::load(&cfg.data_dir)?.image_size;
    let data = visual_data(&cfg.data_dir)?;
    let targets = distill_targets(&t1, &t2, &data)?;
    let mut files = open_run(cfg, student_run_name(cfg))?;
    let net = VisualNet::new(VisualNetConfig { input_size: size, ..VisualNetConfig::student() }, cfg.seed)?;
    let opts = StudentOptions { distill: cfg.distill, unlabeled: cfg.unlabeled };
    let (net, trained) = train_student(net, &cfg.train_config(), &data, &targets, opts, &mut files.log, &files.run)?;
    save_visual(&files.checkpoint, &net, info(&files.run, cfg.seed, &trained))?;
    let val = evaluate_visual(&net, &data.val_triplets, &data.val_images, Split::Val)?;
    Ok(summary(files, &trained, val))
}

fn audio(cfg: &RunConfig) -> Result<RunSummary> {
    let mel = MelConfig::default();
    let cache = cfg.cache_dir();
    let set = |split| -> Result<_> {
        let clips = load_av_split(&cfg.data_dir, split)?;
        let mels = load_mels(&cfg.data_dir, &cache, split, &mel)?;
        Ok(audio_clip_set(&clips, &mels)?)
    };
    let (train, val) = (set(Split::Train)?, set(Split::Val)?);
    let target = cfg.audio_target;
    let mut files = open_run(cfg, &format!("audio-{target}"))?;
    let net = AudioNet::new(AudioNetConfig { n_mels: mel.n_mels, outputs: target.outputs(), ..AudioNetConfig::default() }, cfg.seed)?;
    let (net, trained) = finetune_audio(net, &cfg.train_config(), target, &train, &val, &mut files.log, &files.run)?;
    save_audio(&files.checkpoint, &net, target, mel, info(&files.run, cfg.seed, &trained))?;
    let val = evaluate_audio(&net, target, &val, Split::Val)?;
    Ok(summary(files, &trained, val))
}

fn fusion(cfg: &RunConfig) -> Result<RunSummary> {
    let visual_name = cfg.visual_checkpoint.display().to_string();
    let audio_names = fusion_audio_files(cfg.audio_source);
    let mut names = vec![visual_name.as_str()];
    names.extend_from_slice(audio_names);
    let hint = "train the visual extractor (`aver train student`) and the audio net(s) (`aver train audio`) with the same out_dir first";
    let mut loaded = require(&cfg.out_dir, &names, hint)?.into_iter();
    let visual = expect_visual(&visual_name, loaded.next().expect("visual extractor"), None)?;
    let mut audio = Vec::new();
    let mut parts = Vec::new();
    let mut mel: Option<MelConfig> = None;
    for (name, (meta, model)) in audio_names.iter().zip(loaded) {
        let (ModelMeta::Audio { config, target, mel: m, .. }, Model::Audio(net)) = (meta, model) else {
            return Err(CommandError::Usage(format!("{name} is not an audio checkpoint")));
        };
        if mel.is_some_and(|prev| prev != m) {
            return Err(CommandError::Usage("audio checkpoints were trained on different mel settings".into()));
        }
        mel = Some(m);
        parts.push(AudioPart { config, target });
        audio.push(net);
    }
    let mel = mel.expect("at least one audio net");
    let checksums = |v: &VisualNet, a: &[AudioNet]| -> Vec<String> {
        std::iter::once(v.store.checksum()).chain(a.iter().map(|n| n.store.checksum())).collect()
    };
    let before = checksums(&visual, &audio);

    let cache = cfg.cache_dir();
    let refs: Vec<&AudioNet> = audio.iter().collect();
    let features = |split| -> Result<_> {
        let clips = load_av_split(&cfg.data_dir, split)?;
        let mels = load_mels(&cfg.data_dir, &cache, split, &mel)?;
        Ok(extract_fusion_features(&visual, &refs, &clips, &mels, cfg.window)?)
    };
    let (train, val) = (features(Split::Train)?, features(Split::Val)?);

    let mut files = open_run(cfg, &format!("fusion-{}", cfg.mask))?;
    let fcfg = FusionNetConfig {
        audio_dim: train.audio.shape()[2],
        visual_dim: visual.config.d_face,
        ..FusionNetConfig::default()
    };
    let net = FusionNet::new(fcfg, cfg.seed)?;
    let (net, trained) = train_fusion(net, &cfg.train_config(), cfg.mask, &train, &val, &mut files.log, &files.run)?;
    let after = checksums(&visual, &audio);
    if after != before {
        return Err(TrainError::Contract("feature extractors changed during fusion training".into()).into());
    }
    let val_metrics = evaluate_fusion(&net, &val, cfg.mask, Split::Val)?;
    let meta = ModelMeta::Fusion {
        config: net.config.clone(),
        mask: cfg.mask,
        window: cfg.window,
        mel,
        visual: visual.config.clone(),
        audio: parts,
        extractor_checksums: after,
        info: info(&files.run, cfg.seed, &trained),
    };
    save_fusion(&files.checkpoint, &FusionModel { net, visual, audio }, &meta)?;
    Ok(summary(files, &trained, val_metrics))
}
