use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::data::Split;

pub const METRICS_VERSION: u32 = 1;

/// Logged loss terms. Each term is already weighted, and `total` is the
/// in-order `f32` sum `fec + aff + distill + ccc` over the present terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fec: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aff: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ccc: Option<f32>,
}

impl LossTerms {
    pub fn sum_of_terms(&self) -> f32 {
        [self.fec, self.aff, self.distill, self.ccc]
            .into_iter()
            .flatten()
            .reduce(|a, b| a + b)
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub triplet_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_acc_balanced: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ccc_arousal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ccc_valence: Option<f64>,
}

impl EvalMetrics {
    /// Model-selection score: triplet accuracy for visual nets, otherwise
    /// the mean of the available CCCs.
    pub fn selection_score(&self) -> f64 {
        if let Some(t) = self.triplet_acc {
            return t;
        }
        let cccs: Vec<f64> = [self.ccc_arousal, self.ccc_valence].into_iter().flatten().collect();
        if cccs.is_empty() {
            f64::NEG_INFINITY
        } else {
            cccs.iter().sum::<f64>() / cccs.len() as f64
        }
    }

    fn all_finite(&self) -> bool {
        [self.triplet_acc, self.class_acc, self.class_acc_balanced, self.ccc_arousal, self.ccc_valence]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

/// One JSON line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub v: u32,
    pub run: String,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<LossTerms>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

/// Append-only metrics sink, optionally mirrored to a JSON-lines file.
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
    wall_time: bool,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), file: None, start: Instant::now(), wall_time: false }
    }

    /// Truncates `path`.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { file: Some((path.to_path_buf(), BufWriter::new(f))), ..Self::in_memory() })
    }

    pub fn with_wall_time(mut self, on: bool) -> Self {
        self.wall_time = on;
        self
    }

    pub fn set_wall_time(&mut self, on: bool) {
        self.wall_time = on;
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Append a record; steps of one run must not decrease and every
    /// logged value must be finite.
    pub fn push(&mut self, run: &str, step: usize, loss: Option<LossTerms>, eval: Option<EvalMetrics>) -> Result<()> {
        if let Some(prev) = self.records.iter().rev().find(|r| r.run == run) {
            if step < prev.step {
                return Err(TrainError::Contract(format!("{run}: step {step} logged after step {}", prev.step)));
            }
        }
        if let Some(l) = &loss {
            let finite = [Some(l.total), l.fec, l.aff, l.distill, l.ccc].into_iter().flatten().all(f32::is_finite);
            if !finite {
                return Err(TrainError::NonFinite { run: run.into(), step });
            }
        }
        if eval.as_ref().is_some_and(|e| !e.all_finite()) {
            return Err(TrainError::NonFinite { run: run.into(), step });
        }
        let rec = MetricsRecord {
            v: METRICS_VERSION,
            run: run.to_string(),
            step,
            loss,
            eval,
            wall_time_s: self.wall_time.then(|| self.start.elapsed().as_secs_f64()),
        };
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&rec).expect("serializable record");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| TrainError::Io { path: path.clone(), source })?;
        }
        self.records.push(rec);
        Ok(())
    }
}
