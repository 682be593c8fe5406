use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, Faithfulness};
use crate::scalar::Scalar;

use super::TrainError;

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub sigma_jitter: f64,
    pub sigma_scale: f64,
    pub sigma_magw: f64,
    pub segments: usize,
    pub segments_relaxed: f64,
    pub gmm_mean_of_means: f64,
    pub gmm_mean_of_scales: f64,
    pub faithfulness_rmse: f64,
    pub faithfulness_corr: f64,
}

impl StepRecord {
    /// Hyper-parameter snapshot of `params` after the step.
    pub fn new<S: Scalar>(step: u64, epoch: u64, loss: f64, params: &AugmentParams<S>, faith: &Faithfulness) -> Self {
        let e = params.effective();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            step,
            epoch,
            loss,
            sigma_jitter: e.sigma_jitter,
            sigma_scale: e.sigma_scale,
            sigma_magw: e.sigma_magw,
            segments: e.segments,
            segments_relaxed: e.segments_relaxed,
            gmm_mean_of_means: mean(&e.gmm_means),
            gmm_mean_of_scales: mean(&e.gmm_scales),
            faithfulness_rmse: faith.rmse,
            faithfulness_corr: faith.mean_correlation(),
        }
    }
}

/// End-of-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_loss: f64,
    /// Leave-one-out 1-nearest-neighbour accuracy of evaluation embeddings
    /// under cosine similarity, when evaluation data was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Append-only training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    entries: Vec<LogEntry>,
}

pub const TRAJECTORY_HEADER: &str =
    "step,sigma_jitter,sigma_scale,sigma_magw,segments,segments_relaxed,gmm_mean_of_means,gmm_mean_of_scales";

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a step record. Step indices must increase strictly.
    pub fn push_step(&mut self, rec: StepRecord) -> Result<(), TrainError> {
        if let Some(last) = self.steps().last() {
            if rec.step <= last.step {
                return Err(TrainError::RunLog(format!(
                    "step {} after step {}",
                    rec.step, last.step
                )));
            }
        }
        self.entries.push(LogEntry::Step(rec));
        Ok(())
    }

    pub fn push_epoch(&mut self, rec: EpochRecord) {
        self.entries.push(LogEntry::Epoch(rec));
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn steps(&self) -> impl DoubleEndedIterator<Item = &StepRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step(s) => Some(s),
            LogEntry::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Epoch(r) => Some(r),
            LogEntry::Step(_) => None,
        })
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), TrainError> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut log = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogEntry::Step(s) => log.push_step(s)?,
                LogEntry::Epoch(r) => log.push_epoch(r),
            }
        }
        Ok(log)
    }

    /// Hyper-parameter series, one row per logged step.
    pub fn write_trajectories<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_HEADER.split(','))?;
        for s in self.steps() {
            w.write_record([
                s.step.to_string(),
                s.sigma_jitter.to_string(),
                s.sigma_scale.to_string(),
                s.sigma_magw.to_string(),
                s.segments.to_string(),
                s.segments_relaxed.to_string(),
                s.gmm_mean_of_means.to_string(),
                s.gmm_mean_of_scales.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
