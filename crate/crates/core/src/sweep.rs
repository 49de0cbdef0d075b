//! One-axis parameter sweeps. Every point is an independent run; failing
//! points are reported as rows rather than aborting the sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::config::{Policy, RunConfig};
use crate::engine;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const SWEEP_CSV_SCHEMA: &str = "kvtier.sweep.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Batch,
    Ratio,
    Bandwidth,
    Capacity,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Batch => "batch",
            Axis::Ratio => "ratio",
            Axis::Bandwidth => "bandwidth",
            Axis::Capacity => "capacity",
        }
    }

    /// Axis values used when none are given.
    pub fn default_values(self, base: &RunConfig) -> Vec<f64> {
        match self {
            Axis::Batch => vec![1.0, 2.0, 4.0, 8.0, 16.0],
            Axis::Ratio => vec![0.2, 0.4, 0.6, 0.8, 1.0],
            Axis::Bandwidth => vec![1e5, 1e6, 1e7, 1e8, 1e9],
            Axis::Capacity => {
                let p = base.cost_params();
                let full = ((p.prompt_len + p.gen_len) as u64 * p.token_kv_bytes()) as f64;
                [0.25, 0.5, 0.75, 1.0]
                    .iter()
                    .map(|f| (f * full).floor())
                    .collect()
            }
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 {
                Ok(v as u64)
            } else {
                Err(Error::Config(format!(
                    "{} value {v} must be a whole number",
                    self.name()
                )))
            }
        };
        match self {
            Axis::Batch => cfg.workload.batch = count(value)? as usize,
            Axis::Ratio => {
                // dense attention has no ratio; SWA at r = 1 is its equivalent
                if cfg.sparsity.variant == Variant::Dense {
                    cfg.sparsity.variant = Variant::Swa;
                }
                cfg.sparsity.ratio = value;
            }
            Axis::Bandwidth => cfg.schedule.bandwidth = value,
            Axis::Capacity => cfg.schedule.device_capacity = Some(count(value)?),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Axis::Batch),
            "ratio" => Ok(Axis::Ratio),
            "bandwidth" => Ok(Axis::Bandwidth),
            "capacity" => Ok(Axis::Capacity),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub policy: Policy,
    pub status: String,
    pub error_class: Option<String>,
    pub error: Option<String>,
    pub throughput_tokens_per_s: f64,
    pub total_s: f64,
    pub prefill_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub recompute_s: f64,
    pub transferred_bytes: u64,
    pub peak_device_bytes: u64,
    pub alpha: f64,
    pub beta: f64,
    pub p1: usize,
    pub p2: usize,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(axis: Axis, value: f64, policy: Policy, e: &Error) -> Self {
        SweepRow {
            axis,
            value,
            policy,
            status: "failed".into(),
            error_class: Some(e.class().into()),
            error: Some(e.to_string()),
            throughput_tokens_per_s: 0.0,
            total_s: 0.0,
            prefill_s: 0.0,
            compute_s: 0.0,
            transfer_s: 0.0,
            recompute_s: 0.0,
            transferred_bytes: 0,
            peak_device_bytes: 0,
            alpha: 0.0,
            beta: 0.0,
            p1: 0,
            p2: 0,
        }
    }
}

fn run_point(base: &RunConfig, axis: Axis, value: f64, policy: Policy) -> SweepRow {
    let result = axis.apply(base, value).and_then(|mut cfg| {
        cfg.schedule.policy = policy;
        engine::run_inference(&cfg)
    });
    match result {
        Ok(m) => SweepRow {
            axis,
            value,
            policy,
            status: "ok".into(),
            error_class: None,
            error: None,
            throughput_tokens_per_s: m.throughput_tokens_per_s,
            total_s: m.total_s,
            prefill_s: m.prefill_s,
            compute_s: m.compute_s,
            transfer_s: m.transfer_s,
            recompute_s: m.recompute_s,
            transferred_bytes: m.transferred_bytes,
            peak_device_bytes: m.peak_device_bytes,
            alpha: m.plan.alpha,
            beta: m.plan.beta,
            p1: m.plan.p1,
            p2: m.plan.p2,
        },
        Err(e) => SweepRow::failed(axis, value, policy, &e),
    }
}

/// Runs every `(value, policy)` pair; rows come back in value-major order
/// regardless of execution mode.
pub fn sweep(
    base: &RunConfig,
    axis: Axis,
    values: &[f64],
    policies: &[Policy],
    exec: Exec,
) -> Vec<SweepRow> {
    let points: Vec<(f64, Policy)> = values
        .iter()
        .flat_map(|&v| policies.iter().map(move |&p| (v, p)))
        .collect();
    par::map(exec, &points, |&(v, p)| run_point(base, axis, v, p))
}

fn opt_str(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        SWEEP_CSV_SCHEMA,
        "axis",
        "value",
        "policy",
        "status",
        "error_class",
        "throughput_tokens_per_s",
        "total_s",
        "prefill_s",
        "compute_s",
        "transfer_s",
        "recompute_s",
        "transferred_bytes",
        "peak_device_bytes",
        "alpha",
        "beta",
        "p1",
        "p2",
    ])?;
    for r in rows {
        w.write_record([
            String::new(),
            r.axis.name().to_string(),
            r.value.to_string(),
            r.policy.name().to_string(),
            r.status.clone(),
            opt_str(&r.error_class),
            r.throughput_tokens_per_s.to_string(),
            r.total_s.to_string(),
            r.prefill_s.to_string(),
            r.compute_s.to_string(),
            r.transfer_s.to_string(),
            r.recompute_s.to_string(),
            r.transferred_bytes.to_string(),
            r.peak_device_bytes.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.p1.to_string(),
            r.p2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
