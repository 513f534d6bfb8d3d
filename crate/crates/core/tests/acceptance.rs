//! Acceptance suite. Prints one PASS/FAIL line per criterion, each with its
//! measured runtime against its budget, and exits non-zero if any fail.
//!
//! Criteria 4-7 train the desk-scale models through the same command layer
//! the CLI uses, so this target takes tens of minutes on one core.

#[path = "common/gradcheck.rs"]
mod gradcheck;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use aver_core::commands::{self, load_model, EvalArgs, EvalReport, GenDataArgs, Model, ModelMeta, RunSummary};
use aver_core::config::{RunConfig, TrainCommand};
use aver_core::data::{load_av_split, load_image_split, load_triplet_split, load_unlabeled, AvParams, DatasetSpec, Split};
use aver_core::dsp::{frame_count, mel_spectrogram, stft, AudioClip, MelConfig, LOG_FLOOR};
use aver_core::losses::{ccc, pearson};
use aver_core::models::{teacher_distill_target, FusionNet, FusionNetConfig, Mask, Role, VisualNet, VisualNetConfig};
use aver_core::tensor::{Session, Tensor};
use aver_core::training::{
    extract_fusion_features, fusion_predictions, gather_rows, train_teacher, EvalMetrics, MetricsLog, TrainConfig,
    VisualData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn run(id: usize, title: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let r = f();
    let elapsed = t.elapsed();
    let (mut pass, mut detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(b) = budget {
        if elapsed >= b {
            pass = false;
            detail = format!("{detail}; over the runtime budget");
        }
    }
    let o = Outcome { id, title, pass, detail, elapsed, budget };
    print_line(&o);
    o
}

fn print_line(o: &Outcome) {
    let budget = o.budget.map_or("no budget".to_string(), |b| format!("budget {} s", b.as_secs()));
    println!(
        "{} C{} {}: {} [{:.1} s, {}]",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.detail,
        o.elapsed.as_secs_f64(),
        budget
    );
}

fn mins(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

// ---------------------------------------------------------------- C1-C3

fn c1_gradients() -> Check {
    let mut worst_all: f64 = 0.0;
    let mut bad = Vec::new();
    let cases = gradcheck::cases();
    for case in &cases {
        let w = gradcheck::worst_over_seeds(case);
        worst_all = worst_all.max(w);
        if !(w < gradcheck::TOLERANCE) {
            bad.push(format!("{} ({w:.2e})", case.name));
        }
    }
    ensure(bad.is_empty(), || format!("relative error ≥ 1e-4 in {}", bad.join(", ")))?;
    Ok(format!("{} ops × {} seeds in f64, worst relative error {worst_all:.2e} < 1e-4", cases.len(), gradcheck::SEEDS))
}

fn c2_ccc() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
    let self_ccc = ccc(&x, &x).map_err(e2s)?.ccc;
    ensure((self_ccc - 1.0).abs() < 1e-12, || format!("ccc(x, x) = {self_ccc}"))?;

    // Orthogonal centred patterns: covariance is exactly zero.
    let a = [1.0, -1.0, 1.0, -1.0];
    let b = [1.0, 1.0, -1.0, -1.0];
    let zero = ccc(&a, &b).map_err(e2s)?.ccc;
    ensure(zero == 0.0, || format!("zero-covariance ccc = {zero}"))?;

    // Hand value: cov 1.25, variances 1.25 each, mean gap 1: 2.5 / 3.5.
    let worked = ccc(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).map_err(e2s)?.ccc;
    ensure((worked - 5.0 / 7.0).abs() < 1e-9, || format!("worked example {worked}, want 5/7"))?;

    let mut worst_margin = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let shift = rng.random_range(-2.0..2.0);
        let scale = rng.random_range(0.1..3.0);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = p.iter().map(|v| scale * (v + rng.random_range(-1.0..1.0)) + shift).collect();
        let c = ccc(&p, &q).map_err(e2s)?.ccc;
        let r = pearson(&p, &q).map_err(e2s)?;
        ensure(c.abs() <= r.abs() + 1e-12, || format!("|ccc| {c} > |pearson| {r}"))?;
        worst_margin = worst_margin.min(r.abs() - c.abs());
    }
    Ok(format!("identity, zero covariance, worked 5/7 (err {:.1e}), 1000 pairs with |ccc| ≤ |r|", (worked - 5.0 / 7.0).abs()))
}

fn c3_dsp() -> Check {
    let rate = 16_000u32;
    let mut checked = 0;
    for dur_ms in (40..=2000).step_by(65) {
        for win_ms in [10.0, 25.0, 40.0, 64.0] {
            for hop_ms in [5.0, 10.0, 20.0, 40.0] {
                let n = dur_ms as usize * rate as usize / 1000;
                let (w, h) = ((win_ms * 16.0) as usize, (hop_ms * 16.0) as usize);
                // Independent count: slide the window until it overruns.
                let mut want = 0;
                while want * h + w <= n {
                    want += 1;
                }
                ensure(frame_count(n, w, h) == (want > 0).then_some(want), || format!("frame_count({n}, {w}, {h})"))?;
                if want > 0 {
                    let got = stft(&AudioClip::new(vec![0.0; n], rate).map_err(e2s)?, win_ms, hop_ms).map_err(e2s)?.n_frames;
                    ensure(got == want, || format!("stft frames {got} ≠ {want} for {dur_ms} ms / {win_ms} / {hop_ms}"))?;
                }
                checked += 1;
            }
        }
    }

    let tone: Vec<f32> = (0..rate).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin() as f32).collect();
    let s = stft(&AudioClip::new(tone, rate).map_err(e2s)?, 64.0, 32.0).map_err(e2s)?;
    ensure(s.nfft == 1024, || format!("nfft {}", s.nfft))?;
    let mags = s.magnitudes();
    for f in 0..s.n_frames {
        let row = &mags[f * s.n_bins..(f + 1) * s.n_bins];
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        ensure(peak == 64, || format!("frame {f} peaks at bin {peak}"))?;
    }

    let silence = AudioClip::new(vec![0.0; 3 * rate as usize], rate).map_err(e2s)?;
    let mel = mel_spectrogram(&silence, &MelConfig::default()).map_err(e2s)?;
    let floor = LOG_FLOOR.ln() as f32;
    ensure(mel.frames.iter().all(|&v| v == floor), || "silence is not the log floor".into())?;
    Ok(format!(
        "{checked} (duration, window, hop) cases; 1 kHz peaks at bin 64 in all {} frames; silence = ln(1e-10) over {}×{}",
        s.n_frames,
        mel.n_frames,
        mel.n_mels()
    ))
}

// ---------------------------------------------------------------- pipeline

struct Desk {
    data: PathBuf,
    out: PathBuf,
}

impl Desk {
    fn config(&self, cmd: TrainCommand, extra: &[(&str, &str)]) -> Result<RunConfig, String> {
        let mut o = vec![
            ("data_dir".to_string(), self.data.display().to_string()),
            ("out_dir".to_string(), self.out.display().to_string()),
        ];
        o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        RunConfig::resolve(cmd, None, &o).map_err(e2s)
    }

    fn train(&self, cmd: TrainCommand, extra: &[(&str, &str)]) -> Result<Vec<RunSummary>, String> {
        commands::train(&self.config(cmd, extra)?).map_err(e2s)
    }

    fn eval(&self, ckpts: &[&str], splits: &[Split]) -> Result<EvalReport, String> {
        let args = EvalArgs {
            checkpoints: ckpts.iter().map(|c| self.out.join(c)).collect(),
            data: self.data.clone(),
            cache: None,
            splits: splits.to_vec(),
            report: None,
            csv: None,
        };
        commands::eval(&args).map_err(e2s)
    }
}

fn test_metrics(report: &EvalReport, i: usize) -> Result<EvalMetrics, String> {
    report.checkpoints[i].records.iter().find_map(|r| r.eval.clone().filter(|e| e.split == Some(Split::Test))).ok_or("no test record".into())
}

fn c4_teacher(desk: &Desk) -> Check {
    // Overfit: 32 training samples, full batch every step.
    let d = &desk.data;
    let imgs = load_image_split(d, Split::Train).map_err(e2s)?;
    let trips = load_triplet_split(d, Split::Train).map_err(e2s)?;
    let idx: Vec<usize> = (0..32).collect();
    let mut small_imgs = imgs.clone();
    small_imgs.images = gather_rows(&imgs.images, &idx);
    small_imgs.labels = idx.iter().map(|&i| imgs.labels[i]).collect();
    let mut small_trips = trips.clone();
    small_trips.images = std::array::from_fn(|k| gather_rows(&trips.images[k], &idx));
    small_trips.labels = idx.iter().map(|&i| trips.labels[i]).collect();
    let data = VisualData {
        train_triplets: small_trips.clone(),
        train_images: small_imgs.clone(),
        unlabeled: load_unlabeled(d).map_err(e2s)?,
        val_triplets: small_trips,
        val_images: small_imgs,
    };
    let cfg = TrainConfig { steps: 500, batch_triplets: 32, batch_images: 32, log_every: 1, eval_every: 500, ..TrainConfig::visual() };
    let mut log = MetricsLog::in_memory();
    train_teacher(VisualNet::new(VisualNetConfig::default(), 0).map_err(e2s)?, &cfg, &data, &mut log, "overfit").map_err(e2s)?;
    let hit = log.records().iter().find_map(|r| {
        let l = r.loss.as_ref()?;
        (l.aff? < 0.1 && l.fec? < 0.05).then_some((r.step, l.aff?, l.fec?))
    });
    let (step, aff, fec) = hit.ok_or_else(|| {
        let last = log.records().iter().rev().find_map(|r| r.loss.clone()).unwrap_or_default();
        format!("overfit never reached L_Aff < 0.1 and triplet < 0.05 (last {:?} / {:?})", last.aff, last.fec)
    })?;

    let cfg = desk.config(TrainCommand::Teacher, &[])?;
    ensure(cfg.steps >= 3000, || format!("desk run has only {} steps", cfg.steps))?;
    desk.train(TrainCommand::Teacher, &[])?;
    let report = desk.eval(&["teacher1.aver", "teacher2.aver"], &[Split::Test])?;
    let mut parts = vec![format!("overfit at step {step} (L_Aff {aff:.3}, triplet {fec:.4})")];
    for (i, name) in ["teacher1", "teacher2"].iter().enumerate() {
        let m = test_metrics(&report, i)?;
        let (cls, trip) = (m.class_acc.unwrap_or(f64::NAN), m.triplet_acc.unwrap_or(f64::NAN));
        ensure(cls >= 0.85 && trip >= 0.90, || format!("{name} test class acc {cls:.3}, triplet acc {trip:.3}"))?;
        parts.push(format!("{name} {} steps: test class acc {cls:.3} ≥ 0.85, triplet acc {trip:.3} ≥ 0.90", cfg.steps));
    }
    Ok(parts.join("; "))
}

fn c5_student(desk: &Desk) -> Check {
    desk.train(TrainCommand::Student, &[])?;
    desk.train(TrainCommand::Student, &[("distill", "false")])?;
    desk.train(TrainCommand::Student, &[("unlabeled", "false")])?;
    let names = ["teacher1", "teacher2", "student", "student-no-distill", "student-no-unlabeled"];
    let files: Vec<String> = names.iter().map(|n| format!("{n}.aver")).collect();
    let report = desk.eval(&files.iter().map(String::as_str).collect::<Vec<_>>(), &[Split::Test])?;
    let mut trip = Vec::new();
    println!("     ablation report (test split):");
    println!("     {:<22} {:>11} {:>10}", "run", "triplet acc", "class acc");
    for (i, n) in names.iter().enumerate() {
        let m = test_metrics(&report, i)?;
        let t = m.triplet_acc.unwrap_or(f64::NAN);
        println!("     {n:<22} {t:>11.4} {:>10.4}", m.class_acc.unwrap_or(f64::NAN));
        trip.push(t);
    }
    let teacher = trip[0].max(trip[1]);
    ensure(trip[2] >= teacher - 0.02, || format!("student triplet acc {:.4} < best teacher {teacher:.4} − 0.02", trip[2]))?;
    Ok(format!("student triplet acc {:.4} ≥ best teacher {teacher:.4} − 0.02; three-run ablation report printed above", trip[2]))
}

fn c6_audio(desk: &Desk) -> Check {
    desk.train(TrainCommand::Audio, &[("audio_target", "arousal")])?;
    let report = desk.eval(&["audio-arousal.aver"], &[Split::Test])?;
    let c = test_metrics(&report, 0)?.ccc_arousal.unwrap_or(f64::NAN);
    ensure(c >= 0.8, || format!("test arousal CCC {c:.4} < 0.8"))?;
    Ok(format!("test arousal CCC {c:.4} ≥ 0.8"))
}

fn c7_fusion(desk: &Desk) -> Check {
    desk.train(TrainCommand::Audio, &[("audio_target", "combined")])?;
    for mask in ["visual-only", "audio-only", "both"] {
        desk.train(TrainCommand::Fusion, &[("mask", mask)])?;
    }
    let report = desk.eval(&["fusion-visual-only.aver", "fusion-audio-only.aver", "fusion-both.aver"], &[Split::Test])?;
    let grid = report.ablation_grid.as_ref().ok_or("no ablation grid")?;
    ensure(grid.cells == 12, || format!("grid has {} cells", grid.cells))?;
    println!("     ablation grid (CCC arousal / valence):");
    println!("     {:<13} {:>15} {:>15} {:>15}", "row", "train", "dev", "test");
    for r in &grid.rows {
        let f = |s: &commands::SplitCcc| format!("{:.4} / {:.4}", s.arousal, s.valence);
        println!("     {:<13} {:>15} {:>15} {:>15}", r.row, f(&r.train), f(&r.dev), f(&r.test));
    }
    let row = |name: &str| grid.rows.iter().find(|r| r.row == name).map(|r| r.test).ok_or(format!("missing row {name}"));
    let (v, a, both) = (row("visual-only")?, row("audio-only")?, row("audio-visual")?);
    let bar_a = v.arousal.max(a.arousal) - 0.02;
    let bar_v = v.valence.max(a.valence) - 0.02;
    ensure(both.arousal >= bar_a && both.valence >= bar_v, || {
        format!("fused test CCC {:.4} / {:.4} below {bar_a:.4} / {bar_v:.4}", both.arousal, both.valence)
    })?;
    Ok(format!(
        "fused test CCC arousal {:.4} ≥ {bar_a:.4}, valence {:.4} ≥ {bar_v:.4}; 12-cell grid emitted",
        both.arousal, both.valence
    ))
}

// ---------------------------------------------------------------- C8

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Forward of a loaded model on fixed inputs; the fusion net runs on
/// feature sequences of its extractors' widths.
fn forward(model: &Model) -> Result<Vec<u32>, String> {
    Ok(match model {
        Model::Visual(n) => {
            let (e, f, a) = n.infer(random_tensor(&[3, 3, n.config.input_size, n.config.input_size], 1)).map_err(e2s)?;
            [bits(&e), bits(&f), bits(&a)].concat()
        }
        Model::Audio(n) => bits(&n.predict(random_tensor(&[2, 96, n.config.n_mels], 2)).map_err(e2s)?),
        Model::Fusion(m) => {
            let c = &m.net.config;
            let a = random_tensor(&[2, c.min_audio_len() + 3, c.audio_dim], 3);
            let v = random_tensor(&[2, c.min_visual_len() + 7, c.visual_dim], 4);
            let mut out = Vec::new();
            for mask in Mask::ALL {
                out.extend(bits(&m.net.predict(a.clone(), v.clone(), mask).map_err(e2s)?));
            }
            out
        }
        Model::Oracle => Vec::new(),
    })
}

fn resave(path: &Path, meta: &ModelMeta, model: &Model, info_from: &Path) -> Result<(), String> {
    let info = || match meta {
        ModelMeta::Visual { info, .. } | ModelMeta::Audio { info, .. } | ModelMeta::Fusion { info, .. } => Ok(info.clone()),
        ModelMeta::Oracle { .. } => Err(format!("{} is an oracle", info_from.display())),
    };
    match (model, meta) {
        (Model::Visual(n), _) => commands::save_visual(path, n, info()?),
        (Model::Audio(n), ModelMeta::Audio { target, mel, .. }) => commands::save_audio(path, n, *target, *mel, info()?),
        (Model::Fusion(m), _) => commands::save_fusion(path, m, meta),
        _ => return Err("unexpected model kind".into()),
    }
    .map_err(e2s)
}

fn c8_determinism(root: &Path) -> Check {
    let spec = DatasetSpec {
        seed: 8,
        image_size: 32,
        n_images: 64,
        n_triplets: 48,
        n_unlabeled: 32,
        n_av: 20,
        av: AvParams { duration_s: 8.0, ..AvParams::default() },
    };
    let mut dirs = Vec::new();
    for k in ["a", "b"] {
        let data = root.join(k).join("data");
        commands::gen_data(&GenDataArgs { out: data.clone(), spec: spec.clone(), force: false }).map_err(e2s)?;
        commands::preprocess_audio(&data, &data.join("cache"), &MelConfig::default()).map_err(e2s)?;
        dirs.push(Desk { data, out: root.join(k).join("runs") });
    }
    let small = [
        ("steps", "4"),
        ("eval_every", "2"),
        ("log_every", "1"),
        ("batch_triplets", "4"),
        ("batch_images", "4"),
        ("batch_unlabeled", "4"),
        ("batch_clips", "2"),
        ("batch_windows", "4"),
    ];
    let plan: [(TrainCommand, &[(&str, &str)]); 6] = [
        (TrainCommand::Teacher, &[]),
        (TrainCommand::Student, &[]),
        (TrainCommand::Audio, &[("audio_target", "combined")]),
        (TrainCommand::Fusion, &[("mask", "both")]),
        (TrainCommand::Fusion, &[("mask", "visual-only")]),
        (TrainCommand::Fusion, &[("mask", "audio-only")]),
    ];
    let mut files = 0;
    for (cmd, extra) in plan {
        let mut all: Vec<(&str, &str)> = small.to_vec();
        all.extend_from_slice(extra);
        let runs: Vec<Vec<RunSummary>> = dirs.iter().map(|d| d.train(cmd, &all)).collect::<Result<_, _>>()?;
        for (ra, rb) in runs[0].iter().zip(&runs[1]) {
            let (ma, mb) = (std::fs::read(&ra.metrics).map_err(e2s)?, std::fs::read(&rb.metrics).map_err(e2s)?);
            ensure(!ma.is_empty() && ma == mb, || format!("{} metrics differ between identical runs", ra.run))?;
            let (ca, cb) = (std::fs::read(&ra.checkpoint).map_err(e2s)?, std::fs::read(&rb.checkpoint).map_err(e2s)?);
            ensure(ca == cb, || format!("{} checkpoints differ between identical runs", ra.run))?;
            files += 1;
        }
    }
    let reports: Vec<String> = dirs
        .iter()
        .map(|d| d.eval(&["fusion-visual-only.aver", "fusion-audio-only.aver", "fusion-both.aver", "student.aver"], &Split::ALL))
        .map(|r| r.map(|r| commands::report_json(&r)))
        .collect::<Result<_, _>>()?;
    ensure(reports[0].replace("/a/", "/b/") == reports[1], || "eval reports differ".into())?;

    let mut families = Vec::new();
    for f in ["teacher1", "student", "audio-combined", "fusion-both"] {
        let path = dirs[0].out.join(format!("{f}.aver"));
        let (meta, model) = load_model(&path).map_err(e2s)?;
        let before = forward(&model)?;
        let copy = root.join(format!("{f}.copy.aver"));
        resave(&copy, &meta, &model, &path)?;
        let (_, reloaded) = load_model(&copy).map_err(e2s)?;
        ensure(!before.is_empty() && forward(&reloaded)? == before, || format!("{f} forward changed after a round trip"))?;
        families.push(f);
    }
    Ok(format!(
        "{files} same-seed runs with byte-identical metrics and checkpoints, identical eval reports; bit-exact forward after round trip for {}",
        families.join(", ")
    ))
}

// ---------------------------------------------------------------- C9

fn c9_shapes(desk: &Desk) -> Check {
    let images = random_tensor(&[4, 3, 32, 32], 9);
    let mut heads = Vec::new();
    let mut outs = Vec::new();
    for d_face in [128, 256] {
        let net = VisualNet::new(VisualNetConfig { d_face, ..VisualNetConfig::default() }, d_face as u64).map_err(e2s)?;
        let (e, f, a) = net.infer(images.clone()).map_err(e2s)?;
        ensure(e.shape() == [4, d_face] && f.shape() == [4, 32] && a.shape() == [4, 8], || {
            format!("teacher heads {:?} {:?} {:?}", e.shape(), f.shape(), a.shape())
        })?;
        heads.push(format!("({d_face}, 32, 8)"));
        outs.push((f, a));
    }
    let target = teacher_distill_target(&outs[0].0, &outs[0].1, &outs[1].0, &outs[1].1).map_err(e2s)?;
    ensure(target.shape() == [4, 80], || format!("distill target {:?}", target.shape()))?;
    let mut worst: f64 = 0.0;
    for r in 0..4 {
        let norm = target.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        worst = worst.max((norm - 2.0).abs());
    }
    // Four unit rows in f32: the norm is 2 up to single-precision rounding.
    ensure(worst < 1e-6, || format!("distill target norm off 2 by {worst:.2e}"))?;
    let student = VisualNet::new(VisualNetConfig { role: Role::Student, ..VisualNetConfig::default() }, 5).map_err(e2s)?;
    let mut s = Session::inference(&student.store);
    let x = s.input(images);
    let so = student.forward(&mut s, x).map_err(e2s)?;
    let sd = so.distill.ok_or("student has no distill head")?;
    ensure(s.tape.shape(sd) == [4, 80], || format!("student distill head {:?}", s.tape.shape(sd)))?;

    let net = FusionNet::new(FusionNetConfig::default(), 9).map_err(e2s)?;
    let mut s = Session::inference(&net.store);
    let a = s.input(random_tensor(&[2, 12, 128], 10));
    let v = s.input(random_tensor(&[2, 96, 128], 11));
    let pa = net.pretransform_audio(&mut s, a).map_err(e2s)?;
    let pv = net.pretransform_visual(&mut s, v).map_err(e2s)?;
    let fused = net.fused_sequence(&mut s, a, v, Mask::Both).map_err(e2s)?;
    let shapes = [s.tape.shape(pa).to_vec(), s.tape.shape(pv).to_vec(), s.tape.shape(fused).to_vec()];
    ensure(shapes == [vec![2, 9, 64], vec![2, 9, 64], vec![2, 9, 128]], || format!("pre-transform shapes {shapes:?}"))?;

    // Range on the trained fusion model's held-out windows.
    let (meta, model) = load_model(&desk.out.join("fusion-both.aver")).map_err(e2s)?;
    let (Model::Fusion(m), ModelMeta::Fusion { window, mel, .. }) = (model, meta) else {
        return Err("fusion-both.aver is not a fusion checkpoint".into());
    };
    let clips = load_av_split(&desk.data, Split::Test).map_err(e2s)?;
    let mels = commands::load_mels(&desk.data, &desk.data.join("cache"), Split::Test, &mel).map_err(e2s)?;
    let audio: Vec<&_> = m.audio.iter().collect();
    let feats = extract_fusion_features(&m.visual, &audio, &clips, &mels, window).map_err(e2s)?;
    let preds = fusion_predictions(&m.net, &feats, Mask::Both).map_err(e2s)?;
    let extreme = preds.iter().flatten().map(|v| v.abs()).fold(0.0f32, f32::max);
    ensure(extreme < 1.0, || format!("fusion output reaches {extreme}"))?;
    Ok(format!(
        "teacher heads {}; distill target [B, 80] with |norm − 2| ≤ {worst:.1e}; pre-transforms [9, 64] ×2, concat [9, 128]; {} held-out fusion outputs in (−1, 1)², max |y| {extreme:.4}",
        heads.join(" and "),
        preds.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let desk = Desk { data: tmp.path().join("data"), out: tmp.path().join("runs") };
    let mut outcomes = Vec::new();
    outcomes.push(run(1, "gradient oracle suite", mins(2), c1_gradients));
    outcomes.push(run(2, "CCC metric suite", Some(Duration::from_secs(10)), c2_ccc));
    outcomes.push(run(3, "DSP suite", Some(Duration::from_secs(30)), c3_dsp));

    let t = Instant::now();
    let setup = commands::gen_data(&GenDataArgs::new(&desk.data))
        .map_err(e2s)
        .and_then(|_| commands::preprocess_audio(&desk.data, &desk.data.join("cache"), &MelConfig::default()).map_err(e2s));
    println!("     desk dataset generated and preprocessed in {:.1} s", t.elapsed().as_secs_f64());
    match setup {
        Ok(_) => {
            outcomes.push(run(4, "teacher training", mins(10), || c4_teacher(&desk)));
            outcomes.push(run(5, "distillation pipeline", mins(15), || c5_student(&desk)));
            outcomes.push(run(6, "audio fine-tuning", mins(10), || c6_audio(&desk)));
            outcomes.push(run(7, "fusion", mins(15), || c7_fusion(&desk)));
        }
        Err(e) => {
            for (id, title) in [(4, "teacher training"), (5, "distillation pipeline"), (6, "audio fine-tuning"), (7, "fusion")] {
                outcomes.push(run(id, title, None, || Err(format!("dataset setup failed: {e}"))));
            }
        }
    }
    outcomes.push(run(8, "determinism and persistence", None, || c8_determinism(&tmp.path().join("det"))));
    outcomes.push(run(9, "shape contracts", None, || c9_shapes(&desk)));

    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("C{}", o.id)).collect();
    println!("\nacceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        for o in outcomes.iter().filter(|o| !o.pass) {
            println!("  failed C{} {}", o.id, o.title);
        }
        std::process::exit(1);
    }
}
