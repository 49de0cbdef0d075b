//! JSON run configuration.
//!
//! ```json
//! {
//!   "model":    { "layers": 2, "heads": 2, "head_dim": 8, "vocab": 64,
//!                 "context": 512, "ffn_mult": 4, "skew": 0.0 },
//!   "workload": { "batch": 1, "prompt_len": 8, "gen_len": 16, "seed": 0,
//!                 "eos": null, "prompt": null },
//!   "sparsity": { "variant": "swa", "ratio": 0.5, "stride": null },
//!   "schedule": { "policy": "dynamic", "device_capacity": null,
//!                 "bandwidth": 1e9, "mac_rate": 1e9,
//!                 "recompute_overhead": 1.0, "quant_bits": null,
//!                 "plan": null },
//!   "output":   { "dir": "out" }
//! }
//! ```
//!
//! Every section and field except `model` shape sizes has a default.
//! Unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::SparsityConfig;
use crate::engine::model::ModelShape;
use crate::error::{Error, Result};
use crate::math::SeededRng;
use crate::memsim::{CostParams, KvPrecision};
use crate::scheduler::{self, SchedulePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Strength of the heavy-tailed attention initializer; 0 disables it.
    #[serde(default)]
    pub skew: f64,
}

fn default_vocab() -> usize {
    64
}

fn default_context() -> usize {
    512
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            vocab: self.vocab,
            context: self.context,
            ffn_mult: self.ffn_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default = "one")]
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Generation stops after emitting this token. Synthetic runs leave it unset.
    #[serde(default)]
    pub eos: Option<usize>,
    /// Explicit prompt; otherwise `prompt_len` tokens are drawn from the seed.
    #[serde(default)]
    pub prompt: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Three-phase plan from the greedy solver.
    Dynamic,
    /// Best fixed host fraction for every step.
    Static,
    AllDevice,
    AllHost,
    /// The solver's plan with Phase III switched off.
    NoRecompute,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Dynamic => "dynamic",
            Policy::Static => "static",
            Policy::AllDevice => "all_device",
            Policy::AllHost => "all_host",
            Policy::NoRecompute => "no_recompute",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown schedule policy {s:?}")))
    }
}

/// Fixed `(α, β, p1, p2)` that bypasses the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOverride {
    pub alpha: f64,
    pub beta: f64,
    pub p1: usize,
    pub p2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    /// KV budget on the device in bytes; `null` means unlimited.
    #[serde(default)]
    pub device_capacity: Option<u64>,
    #[serde(default = "default_rate")]
    pub bandwidth: f64,
    #[serde(default = "default_rate")]
    pub mac_rate: f64,
    #[serde(default = "default_overhead")]
    pub recompute_overhead: f64,
    /// 8 or 4 stores the cache quantized; `null` keeps FP16 accounting.
    #[serde(default)]
    pub quant_bits: Option<u32>,
    #[serde(default)]
    pub plan: Option<PlanOverride>,
}

fn default_policy() -> Policy {
    Policy::Dynamic
}

fn default_rate() -> f64 {
    1e9
}

fn default_overhead() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            policy: default_policy(),
            device_capacity: None,
            bandwidth: default_rate(),
            mac_rate: default_rate(),
            recompute_overhead: default_overhead(),
            quant_bits: None,
            plan: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out_dir(),
        }
    }
}

fn default_sparsity() -> SparsityConfig {
    SparsityConfig::dense()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    #[serde(default = "default_sparsity")]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Small two-layer fixture used by examples and tests.
    pub fn minimal() -> Self {
        RunConfig {
            model: ModelConfig {
                layers: 2,
                heads: 2,
                head_dim: 8,
                vocab: default_vocab(),
                context: default_context(),
                ffn_mult: default_ffn_mult(),
                skew: 0.0,
            },
            workload: WorkloadConfig {
                batch: 1,
                prompt_len: 8,
                gen_len: 16,
                seed: 0,
                eos: None,
                prompt: None,
            },
            sparsity: SparsityConfig::dense(),
            schedule: ScheduleConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.shape().validate()?;
        if !(self.model.skew >= 0.0 && self.model.skew.is_finite()) {
            return Err(Error::Config("model.skew must be finite and >= 0".into()));
        }
        let w = &self.workload;
        if w.batch == 0 {
            return Err(Error::Config("workload.batch must be positive".into()));
        }
        if w.prompt_len == 0 {
            return Err(Error::Config("workload.prompt_len must be positive".into()));
        }
        if let Some(p) = &w.prompt {
            if p.len() != w.prompt_len {
                return Err(Error::Config(format!(
                    "workload.prompt has {} tokens but workload.prompt_len is {}",
                    p.len(),
                    w.prompt_len
                )));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= self.model.vocab) {
                return Err(Error::Config(format!(
                    "workload.prompt token {t} outside vocabulary of {}",
                    self.model.vocab
                )));
            }
        }
        if w.eos.is_some_and(|e| e >= self.model.vocab) {
            return Err(Error::Config("workload.eos outside the vocabulary".into()));
        }
        if w.prompt_len + w.gen_len > self.model.context {
            return Err(Error::Config(format!(
                "workload.prompt_len + workload.gen_len = {} exceeds model.context {}",
                w.prompt_len + w.gen_len,
                self.model.context
            )));
        }
        self.sparsity.validate()?;
        let s = &self.schedule;
        if s.bandwidth.is_nan() || s.bandwidth <= 0.0 {
            return Err(Error::Config("schedule.bandwidth must be positive".into()));
        }
        if !(s.mac_rate > 0.0 && s.mac_rate.is_finite()) {
            return Err(Error::Config(
                "schedule.mac_rate must be positive and finite".into(),
            ));
        }
        if !(s.recompute_overhead >= 1.0 && s.recompute_overhead.is_finite()) {
            return Err(Error::Config(
                "schedule.recompute_overhead must be >= 1".into(),
            ));
        }
        if let Some(b) = s.quant_bits {
            if b != 4 && b != 8 {
                return Err(Error::Config(format!(
                    "schedule.quant_bits must be 4 or 8, got {b}"
                )));
            }
            if self.model.head_dim == 0 {
                return Err(Error::Config("model.head_dim must be positive".into()));
            }
        }
        if let Some(p) = s.plan {
            SchedulePlan::dynamic(p.alpha, p.beta, p.p1, p.p2)
                .validate(w.gen_len)
                .map_err(|e| Error::Config(format!("schedule.plan: {e}")))?;
        }
        Ok(())
    }

    pub fn precision(&self) -> KvPrecision {
        match self.schedule.quant_bits {
            Some(8) => KvPrecision::Int8,
            Some(4) => KvPrecision::Int4,
            _ => KvPrecision::Fp16,
        }
    }

    pub fn cost_params(&self) -> CostParams {
        CostParams {
            hidden: self.model.heads * self.model.head_dim,
            layers: self.model.layers,
            batch: self.workload.batch,
            prompt_len: self.workload.prompt_len,
            gen_len: self.workload.gen_len,
            ratio: self.sparsity.planning_ratio(),
            bandwidth: self.schedule.bandwidth,
            precision: self.precision(),
            device_capacity: self.schedule.device_capacity,
            mac_rate: self.schedule.mac_rate,
            recompute_overhead: self.schedule.recompute_overhead,
        }
    }

    pub fn prompt_tokens(&self) -> Vec<usize> {
        if let Some(p) = &self.workload.prompt {
            return p.clone();
        }
        let mut rng = SeededRng::new(self.workload.seed ^ 0x9e37_79b9_7f4a_7c15);
        (0..self.workload.prompt_len)
            .map(|_| rng.below(self.model.vocab))
            .collect()
    }

    /// The plan this configuration runs under, solved or fixed.
    pub fn resolve_plan(&self) -> Result<SchedulePlan> {
        let params = self.cost_params();
        let n = params.gen_len;
        if let Some(p) = self.schedule.plan {
            return scheduler::evaluate(
                &SchedulePlan::dynamic(p.alpha, p.beta, p.p1, p.p2),
                &params,
            )
            .or_else(|e| match e {
                Error::OutOfDeviceMemory { .. } => {
                    Ok(SchedulePlan::dynamic(p.alpha, p.beta, p.p1, p.p2))
                }
                other => Err(other),
            });
        }
        match self.schedule.policy {
            Policy::Dynamic => scheduler::solve_plan(&params),
            Policy::NoRecompute => {
                let plan = scheduler::solve_plan(&params)?;
                scheduler::evaluate(&plan.without_recompute(n), &params)
            }
            Policy::Static => scheduler::static_split_plan(&params),
            Policy::AllHost => scheduler::all_host_plan(&params),
            // not predicted: an oversubscribed device must fail in the run itself
            Policy::AllDevice => Ok(SchedulePlan::all_device(n)),
        }
    }
}
