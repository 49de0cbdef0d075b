use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::error::Result;
use crate::scheduler::{Phase, SchedulePlan};

pub const METRICS_SCHEMA: &str = "kvtier.metrics.v1";
pub const STEPS_CSV_SCHEMA: &str = "kvtier.steps.v1";

/// Simulated accounting of one decode step. Counts are `(layer, token)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub input_token: usize,
    pub output_token: usize,
    /// Tokens attended to in each layer.
    pub kept_tokens: usize,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub recompute_s: f64,
    pub offloaded: u64,
    pub reloaded: u64,
    pub recomputed: u64,
    pub deleted: u64,
    pub device_bytes: u64,
    pub host_bytes: u64,
    pub peak_device_bytes: u64,
    /// Mean over layers of the step's attention sparsity.
    pub sparsity: f64,
}

impl StepRecord {
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.transfer_s + self.recompute_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: String,
    pub variant: Variant,
    pub ratio: f64,
    pub policy: String,
    pub plan: SchedulePlan,
    pub prompt: Vec<usize>,
    /// Outputs of the decode steps; the prefill's argmax is the first input.
    pub generated: Vec<usize>,
    pub tokens_generated: usize,
    pub prefill_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub recompute_s: f64,
    /// Prefill plus all decode steps.
    pub total_s: f64,
    pub throughput_tokens_per_s: f64,
    pub seconds_per_token: f64,
    pub transferred_bytes: u64,
    pub peak_device_bytes: u64,
    pub peak_host_bytes: u64,
    /// Deleted entries whose recomputed KV differed from the original.
    pub recompute_mismatches: usize,
    /// Causal sparsity of each layer's prefill attention map.
    pub prefill_sparsity: Vec<f64>,
    /// `[layer][step]` sparsity of the weights used at each decode step.
    pub sparsity: Vec<Vec<f64>>,
    /// Per layer, mean per-step Spearman ρ between the weights used and dense
    /// weights over the same cache. `None` when no step had a defined ρ.
    pub correlation: Vec<Option<f64>>,
    pub steps: Vec<StepRecord>,
}

impl RunMetrics {
    pub fn mean_correlation(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.correlation.iter().copied().collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_sparsity_per_layer(&self) -> Vec<f64> {
        self.sparsity
            .iter()
            .map(|row| {
                if row.is_empty() {
                    0.0
                } else {
                    row.iter().sum::<f64>() / row.len() as f64
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            STEPS_CSV_SCHEMA,
            "step",
            "phase",
            "compute_s",
            "transfer_s",
            "recompute_s",
            "device_bytes",
            "host_bytes",
            "sparsity",
            "kept_tokens",
            "offloaded",
            "reloaded",
            "recomputed",
            "deleted",
        ])?;
        for s in &self.steps {
            w.write_record([
                String::new(),
                s.step.to_string(),
                s.phase.name().to_string(),
                s.compute_s.to_string(),
                s.transfer_s.to_string(),
                s.recompute_s.to_string(),
                s.device_bytes.to_string(),
                s.host_bytes.to_string(),
                s.sparsity.to_string(),
                s.kept_tokens.to_string(),
                s.offloaded.to_string(),
                s.reloaded.to_string(),
                s.recomputed.to_string(),
                s.deleted.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
