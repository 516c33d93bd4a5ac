use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Mean loss over the epoch's (augmented) minibatches, when it differs
    /// from `loss`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
    pub holdout_accuracy: Option<f64>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Writes one JSON record per line. The held-out score, when present,
    /// is appended as a record with `step` equal to the number of epochs.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut write = |v: serde_json::Value| -> Result<()> {
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))
        };
        for r in &self.records {
            write(serde_json::to_value(r)?)?;
        }
        if let Some(acc) = self.holdout_accuracy {
            write(serde_json::json!({
                "step": self.records.len(),
                "split": "holdout",
                "accuracy": acc,
            }))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainingLog::default();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if v.get("split").and_then(|s| s.as_str()) == Some("holdout") {
                log.holdout_accuracy = v.get("accuracy").and_then(|a| a.as_f64());
            } else {
                log.records.push(serde_json::from_value(v)?);
            }
        }
        Ok(log)
    }
}
