//! Paired dense/sparse runs on identical seeds: attention sparsity per layer
//! and step, and how closely each sparse variant tracks dense attention.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{SparsityConfig, Variant};
use crate::config::{Policy, RunConfig};
use crate::engine::{self, Session, ToyModel};
use crate::error::Result;
use crate::math;
use crate::par::{self, Exec};
use crate::scheduler::SchedulePlan;

pub const ANALYSIS_SCHEMA: &str = "kvtier.analysis.v1";
pub const SPARSITY_CSV_SCHEMA: &str = "kvtier.sparsity.v1";
pub const CORRELATION_CSV_SCHEMA: &str = "kvtier.correlation.v1";

pub const SPARSE_VARIANTS: [Variant; 3] = [Variant::Swa, Variant::Local, Variant::Strided];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub ratio: f64,
    /// Mean over decode steps of the Spearman ρ between this variant's and
    /// dense attention's output scores over the vocabulary, both fed the
    /// dense run's tokens.
    pub score_correlation: Option<f64>,
    /// Per layer, mean per-step ρ between the attention weights used and
    /// dense weights over the same cache.
    pub weight_correlation: Vec<Option<f64>>,
    pub mean_sparsity_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema: String,
    pub seed: u64,
    pub ratios: Vec<f64>,
    /// Causal sparsity of each layer's prefill attention.
    pub prefill_sparsity: Vec<f64>,
    /// `[layer][step]` sparsity of dense decode attention.
    pub dense_sparsity: Vec<Vec<f64>>,
    pub dense: VariantReport,
    pub variants: Vec<VariantReport>,
}

impl AnalysisReport {
    pub fn find(&self, variant: Variant, ratio: f64) -> Option<&VariantReport> {
        self.variants
            .iter()
            .find(|v| v.variant == variant && v.ratio == ratio)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_sparsity_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([SPARSITY_CSV_SCHEMA, "phase", "layer", "step", "sparsity"])?;
        for (layer, s) in self.prefill_sparsity.iter().enumerate() {
            w.write_record(["", "prefill", &layer.to_string(), "", &s.to_string()])?;
        }
        for (layer, row) in self.dense_sparsity.iter().enumerate() {
            for (step, s) in row.iter().enumerate() {
                w.write_record([
                    "",
                    "decode",
                    &layer.to_string(),
                    &step.to_string(),
                    &s.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_correlation_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            CORRELATION_CSV_SCHEMA,
            "variant",
            "ratio",
            "measure",
            "layer",
            "rho",
        ])?;
        let fmt = |rho: Option<f64>| rho.map_or_else(|| "undefined".to_string(), |r| r.to_string());
        for v in std::iter::once(&self.dense).chain(&self.variants) {
            let (name, ratio) = (v.variant.name(), v.ratio.to_string());
            w.write_record(["", name, &ratio, "scores", "", &fmt(v.score_correlation)])?;
            for (layer, rho) in v.weight_correlation.iter().enumerate() {
                w.write_record(["", name, &ratio, "weights", &layer.to_string(), &fmt(*rho)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The configuration an analysis run uses: unlimited device memory, no
/// offloading, only the attention variant changed.
pub fn analysis_config(base: &RunConfig, sparsity: SparsityConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sparsity = sparsity;
    cfg.schedule.device_capacity = None;
    cfg.schedule.policy = Policy::AllDevice;
    cfg.schedule.plan = None;
    cfg.workload.eos = None;
    cfg
}

fn start<'m>(model: &'m ToyModel, cfg: &RunConfig) -> Result<Session<'m>> {
    Session::start(
        model,
        &cfg.prompt_tokens(),
        cfg.sparsity,
        SchedulePlan::all_device(cfg.workload.gen_len),
        cfg.cost_params(),
    )
}

/// Runs `cfg` on `inputs` (teacher forcing) and compares each step's logits
/// with `reference`.
fn forced_run(
    model: &ToyModel,
    cfg: &RunConfig,
    inputs: &[usize],
    reference: &[Vec<f64>],
) -> Result<VariantReport> {
    let mut session = start(model, cfg)?;
    let mut rhos = Vec::with_capacity(inputs.len());
    for (&input, dense) in inputs.iter().zip(reference) {
        let out = session.decode_step_with(input)?;
        if let Ok(rho) = math::spearman(dense, &out.logits) {
            rhos.push(rho);
        }
    }
    let metrics = session.into_metrics(Policy::AllDevice.name());
    Ok(VariantReport {
        variant: cfg.sparsity.variant,
        ratio: cfg.sparsity.ratio,
        score_correlation: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
        weight_correlation: metrics.correlation.clone(),
        mean_sparsity_per_layer: metrics.mean_sparsity_per_layer(),
    })
}

pub fn analyze(base: &RunConfig, ratios: &[f64], exec: Exec) -> Result<AnalysisReport> {
    base.validate()?;
    let model = engine::build_model(base)?;
    let dense_cfg = analysis_config(base, SparsityConfig::dense());
    let mut dense = start(&model, &dense_cfg)?;
    let mut inputs = Vec::with_capacity(base.workload.gen_len);
    let mut logits = Vec::with_capacity(base.workload.gen_len);
    while dense.step() < base.workload.gen_len {
        inputs.push(dense.next_input());
        logits.push(dense.decode_step()?.logits);
    }
    let dense_metrics = dense.into_metrics(Policy::AllDevice.name());

    let mut jobs = vec![dense_cfg];
    for &r in ratios {
        for v in SPARSE_VARIANTS {
            jobs.push(analysis_config(
                base,
                SparsityConfig {
                    variant: v,
                    ratio: r,
                    stride: base.sparsity.stride,
                },
            ));
        }
    }
    let reports = par::map(exec, &jobs, |cfg| forced_run(&model, cfg, &inputs, &logits));
    let mut reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let dense_report = reports.remove(0);
    Ok(AnalysisReport {
        schema: ANALYSIS_SCHEMA.to_string(),
        seed: base.workload.seed,
        ratios: ratios.to_vec(),
        prefill_sparsity: dense_metrics.prefill_sparsity.clone(),
        dense_sparsity: dense_metrics.sparsity.clone(),
        dense: dense_report,
        variants: reports,
    })
}
