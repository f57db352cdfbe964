//! Storage and latency budget calculator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wal::RECORD_BYTES;

/// FP32 Adam moments: two 4-byte tensors per parameter.
pub const ADAM_MOMENT_BYTES: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub param_count: u64,
    pub dtype_bytes: u64,
    pub window: u64,
    pub compress_ratio: f64,
    pub checkpoint_every: u64,
    pub step_seconds: f64,
    pub microbatches: u64,
    /// Measured per-step delta size; defaults to `dtype_bytes * param_count`.
    pub per_step_bytes: Option<u64>,
}

impl Default for BudgetInputs {
    fn default() -> Self {
        Self {
            param_count: 1_300_000_000,
            dtype_bytes: 2,
            window: 16,
            compress_ratio: 0.70,
            checkpoint_every: 1000,
            step_seconds: 1.0,
            microbatches: 800_000,
            per_step_bytes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub artifact: String,
    pub formula: String,
    pub bytes: Option<u64>,
    pub seconds: Option<f64>,
    pub display: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTable {
    pub inputs: BudgetInputs,
    pub rows: Vec<BudgetRow>,
}

impl BudgetTable {
    pub fn row(&self, artifact: &str) -> Option<&BudgetRow> {
        self.rows.iter().find(|r| r.artifact == artifact)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("artifact | formula | size\n");
        for r in &self.rows {
            out.push_str(&format!("{} | {} | {}\n", r.artifact, r.formula, r.display));
        }
        out
    }
}

/// Decimal gigabytes with one fractional digit, as `≈ 13.0 GB`.
pub fn human_bytes(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= 1e9 {
        format!("≈ {:.1} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("≈ {:.1} MB", b / 1e6)
    } else if b >= 1e3 {
        format!("≈ {:.1} KB", b / 1e3)
    } else {
        format!("{bytes} B")
    }
}

/// `round(per_step * window * ratio)`.
pub fn ring_stored_bytes(per_step: u64, window: u64, ratio: f64) -> u64 {
    (per_step as f64 * window as f64 * ratio).round() as u64
}

pub fn budget_report(inp: &BudgetInputs) -> Result<BudgetTable> {
    if inp.param_count == 0
        || inp.dtype_bytes == 0
        || inp.window == 0
        || !(inp.compress_ratio > 0.0)
        || inp.checkpoint_every == 0
        || !(inp.step_seconds > 0.0)
    {
        return Err(Error::InvalidConfig("budget inputs must be positive".into()));
    }
    let p = inp.param_count;
    let weights = inp.dtype_bytes * p;
    let opt = ADAM_MOMENT_BYTES * p;
    let full = weights + opt;
    let per_step = inp.per_step_bytes.unwrap_or(weights);
    let pre = per_step * inp.window;
    let stored = ring_stored_bytes(per_step, inp.window, inp.compress_ratio);
    let wal = RECORD_BYTES as u64 * inp.microbatches;
    let latency = inp.checkpoint_every as f64 * inp.step_seconds;
    let row = |artifact: &str, formula: String, bytes: Option<u64>, seconds: Option<f64>, display: String| BudgetRow {
        artifact: artifact.into(),
        formula,
        bytes,
        seconds,
        display,
    };
    let rows = vec![
        row(
            "full_checkpoint",
            format!("({} + {ADAM_MOMENT_BYTES})·P B", inp.dtype_bytes),
            Some(full),
            None,
            format!("{} (w) + {} (opt) {}", human_bytes(weights), human_bytes(opt), human_bytes(full)),
        ),
        row("micro_checkpoint", format!("{}·P B", inp.dtype_bytes), Some(weights), None, human_bytes(weights)),
        row("delta_per_step", "pre-compress".into(), Some(per_step), None, human_bytes(per_step)),
        row("ring_pre_compress", format!("per-step × {}", inp.window), Some(pre), None, human_bytes(pre)),
        row(
            "ring_stored",
            format!("pre-compress × {}", inp.compress_ratio),
            Some(stored),
            None,
            format!("{} ({stored} B)", human_bytes(stored)),
        ),
        row(
            "wal",
            format!("{RECORD_BYTES} B × {} records", inp.microbatches),
            Some(wal),
            None,
            human_bytes(wal),
        ),
        row(
            "replay_latency_worst",
            format!("{} × t_step", inp.checkpoint_every),
            None,
            Some(latency),
            format!("≤ {latency} s"),
        ),
    ];
    Ok(BudgetTable { inputs: inp.clone(), rows })
}
