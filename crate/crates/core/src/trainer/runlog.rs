use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Losses after one epoch. Train values are minibatch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub train_l2: f64,
    pub train_total: f64,
    pub val_l1: f64,
    pub params: usize,
}

/// Training history. `wall_s` is kept out of the line-delimited log so
/// that log is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub wall_s: Vec<f64>,
    pub params: usize,
    /// Full-batch factual MSE of the initial model (training scale).
    pub initial_train_l1: f64,
    pub initial_val_l1: f64,
    /// Full-batch factual MSE of the returned model.
    pub final_train_l1: f64,
    pub best_epoch: usize,
    pub best_val_l1: f64,
    /// Minibatches whose representation loss was skipped for a missing
    /// treatment.
    pub skipped_l2_batches: usize,
}

impl RunLog {
    pub fn min_val_l1(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_l1).fold(f64::INFINITY, f64::min)
    }

    pub fn total_wall_s(&self) -> f64 {
        self.wall_s.iter().sum()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("plain record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Summary fields as JSON (includes timing).
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "best_val_l1": self.best_val_l1,
            "initial_train_l1": self.initial_train_l1,
            "initial_val_l1": self.initial_val_l1,
            "final_train_l1": self.final_train_l1,
            "params": self.params,
            "skipped_l2_batches": self.skipped_l2_batches,
            "wall_s": self.total_wall_s(),
        })
    }
}
