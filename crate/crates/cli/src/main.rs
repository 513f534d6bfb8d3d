use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use aver_core::commands::{self, EvalArgs, GenDataArgs};
use aver_core::config::{parse_override, RunConfig, TrainCommand, KEYS};
use aver_core::data::Split;
use aver_core::dsp::MelConfig;

/// Audio-visual emotion recognition on synthetic data: generate datasets,
/// train the visual, audio and fusion models, and evaluate them.
#[derive(Parser)]
#[command(name = "aver", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic image, triplet and audio-visual datasets.
    GenData(GenData),
    /// Compute the log-mel spectrogram cache of the audio-visual clips.
    PreprocessAudio {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Defaults to <data>/cache.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train the teachers, a student, an audio net or a fusion net.
    Train(Train),
    /// Evaluate checkpoints and build the modality ablation grid.
    Eval(Eval),
    /// Print the documented default config of a training command.
    Config {
        #[arg(value_enum)]
        command: TrainKind,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    n_images: usize,
    #[arg(long, default_value_t = 3000)]
    n_triplets: usize,
    #[arg(long, default_value_t = 2000)]
    n_unlabeled: usize,
    /// Audio-visual clips; 0 omits the family.
    #[arg(long, default_value_t = 100)]
    n_av: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Image and video frame side length.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Replace the datasets in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Teacher,
    Student,
    Audio,
    Fusion,
}

impl From<TrainKind> for TrainCommand {
    fn from(k: TrainKind) -> Self {
        match k {
            TrainKind::Teacher => TrainCommand::Teacher,
            TrainKind::Student => TrainCommand::Student,
            TrainKind::Audio => TrainCommand::Audio,
            TrainKind::Fusion => TrainCommand::Fusion,
        }
    }
}

/// Settings resolve as: command defaults, then `--config`, then `--set`,
/// then the named flags below.
#[derive(Args)]
struct Train {
    #[arg(value_enum)]
    command: TrainKind,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Student: drop the distillation loss.
    #[arg(long)]
    no_distill: bool,
    /// Student: distil on labelled batches only.
    #[arg(long)]
    no_unlabeled: bool,
    /// Audio: arousal, valence or combined.
    #[arg(long)]
    target: Option<String>,
    /// Fusion: both, audio-only or visual-only.
    #[arg(long)]
    mask: Option<String>,
    /// Fusion: combined or both.
    #[arg(long)]
    audio_source: Option<String>,
    /// Record elapsed seconds in the metrics files.
    #[arg(long)]
    wall_time: bool,
}

impl Train {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o = Vec::new();
        for s in &self.set {
            o.push(parse_override(s)?);
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("data_dir", self.data.as_ref().map(|p| p.display().to_string()));
        put("out_dir", self.out.as_ref().map(|p| p.display().to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("steps", self.steps.map(|v| v.to_string()));
        put("distill", self.no_distill.then(|| "false".into()));
        put("unlabeled", self.no_unlabeled.then(|| "false".into()));
        put("audio_target", self.target.clone());
        put("mask", self.mask.clone());
        put("audio_source", self.audio_source.clone());
        put("wall_time", self.wall_time.then(|| "true".into()));
        Ok(o)
    }
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate. Repeatable; three fusion checkpoints with
    /// different masks add the ablation grid to the report.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Mel cache; defaults to <data>/cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// train, dev (or val), test, or all.
    #[arg(long, default_value = "all")]
    split: String,
    /// Write the JSON report here (it is printed either way).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the ablation grid as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Per-command defaults of every config key, appended to `train --help`.
fn keys_help() -> String {
    let d: Vec<RunConfig> = TrainCommand::ALL.iter().map(|&c| RunConfig::defaults(c)).collect();
    let mut out = String::from("Config keys (defaults for teacher / student / audio / fusion):\n");
    for k in KEYS.iter().filter(|k| k.name != "command") {
        let vals: Vec<String> = d.iter().map(|c| c.get(k.name).unwrap_or_default()).collect();
        let shown = if vals.iter().all(|v| v == &vals[0]) { vals[0].clone() } else { vals.join(" / ") };
        let shown = if shown.is_empty() { "\"\"".into() } else { shown };
        out.push_str(&format!("  {:<18} {:<28} {}\n", k.name, shown, k.doc));
    }
    out
}

fn main() -> Result<()> {
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_long_help(keys_help()));
    let cli = Cli::from_arg_matches(&cmd.get_matches())?;
    match cli.command {
        Cmd::GenData(g) => {
            let mut args = GenDataArgs::new(&g.out).duration(g.duration);
            args.force = g.force;
            args.spec.seed = g.seed;
            args.spec.n_images = g.n_images;
            args.spec.n_triplets = g.n_triplets;
            args.spec.n_unlabeled = g.n_unlabeled;
            args.spec.n_av = g.n_av;
            args.spec.image_size = g.image_size;
            args.spec.av.frame_size = g.image_size;
            let m = commands::gen_data(&args).with_context(|| format!("generating {}", g.out.display()))?;
            let fams: Vec<_> = m.families.iter().map(|(k, v)| if v.is_null() { format!("{k} (none)") } else { k.clone() }).collect();
            println!("wrote {} with families: {}", g.out.display(), fams.join(", "));
            for n in &m.notes {
                println!("note: {n}");
            }
        }
        Cmd::PreprocessAudio { data, cache } => {
            let cache = cache.unwrap_or_else(|| data.join("cache"));
            let r = commands::preprocess_audio(&data, &cache, &MelConfig::default())?;
            println!("preprocess-audio: {} recomputed, {} up to date ({})", r.computed.len(), r.up_to_date, cache.display());
        }
        Cmd::Train(t) => {
            let file = match &t.config {
                Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
                None => None,
            };
            let cfg = RunConfig::resolve(t.command.into(), file.as_deref(), &t.overrides()?)?;
            for r in commands::train(&cfg)? {
                println!(
                    "{}: best step {} (score {:.4}); checkpoint {}, metrics {}",
                    r.run,
                    r.best_step,
                    r.best_score,
                    r.checkpoint.display(),
                    r.metrics.display()
                );
            }
        }
        Cmd::Eval(e) => {
            let splits = if e.split == "all" {
                Split::ALL.to_vec()
            } else {
                e.split.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Split>, _>>()?
            };
            if splits.is_empty() {
                bail!("no split selected");
            }
            let args = EvalArgs { checkpoints: e.ckpts, data: e.data, cache: e.cache, splits, report: e.report, csv: e.csv };
            let report = commands::eval(&args)?;
            println!("{}", commands::report_json(&report));
        }
        Cmd::Config { command, out } => {
            let text = RunConfig::reference(command.into());
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
