//! Fits the simulator's `mac_rate` to measured decode-step times.
//!
//! The compute model is `t = macs / mac_rate`, so the least-squares fit
//! through the origin is `mac_rate = Σm² / Σ(m·t)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::SparsityConfig;
use crate::config::RunConfig;
use crate::engine::{build_model, Session};
use crate::error::{Error, Result};
use crate::scheduler::SchedulePlan;

/// One measured shape: mean attention MACs and mean seconds per decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub prompt_len: usize,
    pub steps: usize,
    pub macs: f64,
}

pub trait StepTimer {
    /// Mean seconds per decode step at `point`.
    fn seconds(&mut self, point: &BenchPoint) -> Result<f64>;
}

/// Times real decode steps of the toy engine.
#[derive(Debug, Clone)]
pub struct WallTimer {
    pub config: RunConfig,
}

impl StepTimer for WallTimer {
    fn seconds(&mut self, point: &BenchPoint) -> Result<f64> {
        let cfg = point_config(&self.config, point);
        let model = build_model(&cfg)?;
        let prompt = cfg.prompt_tokens();
        let mut session = Session::start(
            &model,
            &prompt,
            SparsityConfig::dense(),
            SchedulePlan::all_device(point.steps),
            cfg.cost_params(),
        )?
        .without_correlation();
        let start = Instant::now();
        for _ in 0..point.steps {
            session.decode_step()?;
        }
        Ok(start.elapsed().as_secs_f64() / point.steps as f64)
    }
}

/// Reports `macs / rate`; a clock with a known answer.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTimer {
    pub mac_rate: f64,
}

impl StepTimer for SyntheticTimer {
    fn seconds(&mut self, point: &BenchPoint) -> Result<f64> {
        Ok(point.macs / self.mac_rate)
    }
}

fn point_config(base: &RunConfig, point: &BenchPoint) -> RunConfig {
    let mut cfg = base.clone();
    cfg.workload.prompt_len = point.prompt_len;
    cfg.workload.gen_len = point.steps;
    cfg.workload.prompt = None;
    cfg.workload.eos = None;
    cfg.model.context = cfg.model.context.max(point.prompt_len + point.steps);
    cfg.sparsity = SparsityConfig::dense();
    cfg.schedule.device_capacity = None;
    cfg
}

pub fn bench_points(base: &RunConfig, prompt_lens: &[usize], steps: usize) -> Vec<BenchPoint> {
    prompt_lens
        .iter()
        .map(|&s| {
            let params = point_config(
                base,
                &BenchPoint {
                    prompt_len: s,
                    steps,
                    macs: 0.0,
                },
            )
            .cost_params();
            let macs = (0..steps)
                .map(|j| params.compute_macs((s + j + 1) as u64))
                .sum::<f64>()
                / steps.max(1) as f64;
            BenchPoint {
                prompt_len: s,
                steps,
                macs,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub prompt_len: usize,
    pub macs: f64,
    pub seconds: f64,
    pub predicted_seconds: f64,
    /// `|measured − predicted|`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFit {
    /// Least-squares rate, `None` when the fit is degenerate.
    pub fitted_mac_rate: Option<f64>,
    /// Rate to use: the fit, or the default it could not replace.
    pub mac_rate: f64,
    pub warning: Option<String>,
    pub samples: Vec<BenchSample>,
}

/// Least-squares `mac_rate` from `(macs, seconds)` pairs.
pub fn fit_mac_rate(points: &[(usize, f64, f64)], default_rate: f64) -> BenchFit {
    let smm: f64 = points.iter().map(|&(_, m, _)| m * m).sum();
    let smt: f64 = points.iter().map(|&(_, m, t)| m * t).sum();
    let rate = smm / smt;
    let (fitted, warning) = if points.is_empty() {
        (
            None,
            Some("no timing points; keeping the default mac_rate".to_string()),
        )
    } else if !(rate.is_finite() && rate > 0.0) {
        (
            None,
            Some(format!(
                "degenerate fit (Σm²={smm}, Σm·t={smt}); keeping the default mac_rate"
            )),
        )
    } else {
        (Some(rate), None)
    };
    let used = fitted.unwrap_or(default_rate);
    let samples = points
        .iter()
        .map(|&(prompt_len, macs, seconds)| {
            let predicted_seconds = macs / used;
            BenchSample {
                prompt_len,
                macs,
                seconds,
                predicted_seconds,
                residual: (seconds - predicted_seconds).abs(),
            }
        })
        .collect();
    BenchFit {
        fitted_mac_rate: fitted,
        mac_rate: used,
        warning,
        samples,
    }
}

pub fn run_bench<T: StepTimer>(
    base: &RunConfig,
    points: &[BenchPoint],
    timer: &mut T,
) -> Result<BenchFit> {
    if points.iter().any(|p| p.steps == 0 || p.prompt_len == 0) {
        return Err(Error::Config(
            "bench points need positive prompt length and steps".into(),
        ));
    }
    let mut measured = Vec::with_capacity(points.len());
    for p in points {
        measured.push((p.prompt_len, p.macs, timer.seconds(p)?));
    }
    Ok(fit_mac_rate(&measured, base.schedule.mac_rate))
}
