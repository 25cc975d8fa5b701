//! Per-step metrics as JSON lines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::trainer::StepMetrics;

/// One JSONL row. Timing fields are `null` unless timing is enabled, which
/// keeps metrics files byte-identical across identically seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub temperature: f64,
    pub lr: f64,
    pub mean_len: f64,
    pub collapse: bool,
    pub wall_time: Option<f64>,
    pub tokens_per_sec: Option<f64>,
}

pub const FIELDS: [&str; 8] =
    ["step", "loss", "temperature", "lr", "mean_len", "collapse", "wall_time", "tokens_per_sec"];

impl MetricsRecord {
    /// `timing` is `(seconds since start, seconds spent on this step)`.
    pub fn from_step(m: &StepMetrics, timing: Option<(f64, f64)>) -> Self {
        Self {
            step: m.step,
            loss: m.loss,
            temperature: m.temperature,
            lr: m.lr,
            mean_len: m.mean_len,
            collapse: m.collapse,
            wall_time: timing.map(|(t, _)| t),
            tokens_per_sec: timing.map(|(_, dt)| if dt > 0.0 { m.tokens as f64 / dt } else { 0.0 }),
        }
    }
}

/// Appends records to a sink, enforcing strictly increasing steps.
pub struct MetricsWriter<W: Write> {
    out: W,
    last_step: Option<u64>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, last_step: None }
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> crate::Result<()> {
        if self.last_step.is_some_and(|s| rec.step <= s) {
            return Err(crate::Error::State(format!("metrics step {} is not after {:?}", rec.step, self.last_step)));
        }
        let line = serde_json::to_string(rec).expect("metrics serialize");
        writeln!(self.out, "{line}")?;
        self.last_step = Some(rec.step);
        Ok(())
    }

    pub fn flush(&mut self) -> crate::Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
