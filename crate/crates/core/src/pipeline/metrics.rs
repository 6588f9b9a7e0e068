//! JSON Lines training/eval logs.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::Result;

/// Append-per-step metrics file; created fresh at stage start so reruns are
/// byte-identical.
pub struct MetricsLog {
    out: BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn log<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Per-step line for the supervised stages.
#[derive(Debug, Serialize)]
pub struct SupervisedMetrics {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    pub lr: f64,
}
