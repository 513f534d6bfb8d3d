//! Every command end to end on a tiny dataset, in process.

use std::path::{Path, PathBuf};

use aver_core::commands::{eval, gen_data, preprocess_audio, train, CommandError, EvalArgs, GenDataArgs};
use aver_core::config::{RunConfig, TrainCommand};
use aver_core::data::{AvParams, DatasetSpec, Split};
use aver_core::dsp::MelConfig;
use aver_core::training::MetricsRecord;

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let spec = DatasetSpec {
        seed: 5,
        image_size: 16,
        n_images: 32,
        n_triplets: 24,
        n_unlabeled: 16,
        n_av: 20,
        av: AvParams { duration_s: 8.0, frame_size: 16, ..AvParams::default() },
    };
    gen_data(&GenDataArgs { out: data.clone(), spec, force: false }).unwrap();
    preprocess_audio(&data, &data.join("cache"), &MelConfig::default()).unwrap();
    data
}

fn config(cmd: TrainCommand, data: &Path, out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut o: Vec<(String, String)> = vec![
        ("data_dir".into(), data.display().to_string()),
        ("out_dir".into(), out.display().to_string()),
        ("steps".into(), "3".into()),
        ("eval_every".into(), "2".into()),
        ("log_every".into(), "1".into()),
        ("batch_triplets".into(), "4".into()),
        ("batch_images".into(), "4".into()),
        ("batch_unlabeled".into(), "4".into()),
        ("batch_clips".into(), "2".into()),
        ("batch_windows".into(), "4".into()),
    ];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(cmd, None, &o).unwrap()
}

fn records(path: &Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("runs");

    let err = train(&config(TrainCommand::Student, &data, &out, &[])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CommandError::Missing { .. }));
    assert!(msg.contains("teacher1.aver") && msg.contains("teacher2.aver"), "{msg}");

    let teachers = train(&config(TrainCommand::Teacher, &data, &out, &[])).unwrap();
    assert_eq!(teachers.iter().map(|r| r.run.as_str()).collect::<Vec<_>>(), ["teacher1", "teacher2"]);
    for r in &teachers {
        let recs = records(&r.metrics);
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(r.checkpoint.is_file());
        let cfg_text = std::fs::read_to_string(out.join(format!("{}.config", r.run))).unwrap();
        assert_eq!(RunConfig::resolve(TrainCommand::Teacher, Some(&cfg_text), &[]).unwrap().steps, 3);
    }

    for (flags, run) in [(vec![], "student"), (vec![("distill", "false")], "student-no-distill"), (vec![("unlabeled", "false")], "student-no-unlabeled")] {
        let s = train(&config(TrainCommand::Student, &data, &out, &flags)).unwrap();
        assert_eq!(s[0].run, run);
        let first = records(&s[0].metrics)[0].loss.clone().unwrap();
        assert_eq!(first.distill.is_some(), run != "student-no-distill");
    }

    let err = train(&config(TrainCommand::Fusion, &data, &out, &[])).unwrap_err();
    assert!(err.to_string().contains("audio-combined.aver"), "{err}");
    train(&config(TrainCommand::Audio, &data, &out, &[("audio_target", "combined")])).unwrap();
    let mut ckpts = Vec::new();
    for mask in ["visual-only", "audio-only", "both"] {
        let r = train(&config(TrainCommand::Fusion, &data, &out, &[("mask", mask)])).unwrap();
        assert_eq!(r[0].run, format!("fusion-{mask}"));
        ckpts.push(r[0].checkpoint.clone());
    }
    let err = RunConfig::resolve(TrainCommand::Fusion, None, &[("mask".into(), "none".into())]).unwrap_err();
    assert!(err.to_string().contains("mask"));

    ckpts.push(out.join("student.aver"));
    ckpts.push(out.join("audio-combined.aver"));
    let args = EvalArgs {
        checkpoints: ckpts,
        data: data.clone(),
        cache: None,
        splits: vec![Split::Val, Split::Test],
        report: Some(dir.path().join("report.json")),
        csv: Some(dir.path().join("grid.csv")),
    };
    let report = eval(&args).unwrap();
    assert_eq!(report.ablation_grid.as_ref().unwrap().cells, 12);
    let kinds: Vec<_> = report.checkpoints.iter().map(|c| c.kind.as_str()).collect();
    assert_eq!(kinds, ["fusion", "fusion", "fusion", "visual", "audio"]);
    assert!(report.checkpoints[3].records[0].eval.as_ref().unwrap().triplet_acc.is_some());
    assert_eq!(eval(&args).unwrap(), report);

    // Same config and seed in a fresh directory: byte-identical metrics.
    let again = dir.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    for f in ["teacher1.aver", "teacher2.aver"] {
        std::fs::copy(out.join(f), again.join(f)).unwrap();
    }
    let a = train(&config(TrainCommand::Student, &data, &again, &[])).unwrap();
    assert_eq!(std::fs::read(&a[0].metrics).unwrap(), std::fs::read(out.join("student.metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(&a[0].checkpoint).unwrap(), std::fs::read(out.join("student.aver")).unwrap());
}
