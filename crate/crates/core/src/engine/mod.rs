//! Toy transformer decoder wired to sparse attention, quantized KV storage
//! and the tiered-memory schedule.

pub mod metrics;
pub mod model;
pub mod runtime;

pub use metrics::{RunMetrics, StepRecord};
pub use model::{ModelShape, ToyModel};
pub use runtime::{prefill, Prefill, Session, StepOutput};

use crate::config::RunConfig;
use crate::error::Result;
use crate::memsim::TransferLedger;
use crate::scheduler::SchedulePlan;

pub fn build_model(config: &RunConfig) -> Result<ToyModel> {
    ToyModel::with_skew(
        config.model.shape(),
        config.workload.seed,
        config.model.skew,
    )
}

/// Prefill plus up to `gen_len` decode steps, stopping early at EOS.
pub fn run_inference(config: &RunConfig) -> Result<RunMetrics> {
    run_with_ledger(config).map(|(m, _)| m)
}

/// [`run_inference`] plus the per-step transfer ledger.
pub fn run_with_ledger(config: &RunConfig) -> Result<(RunMetrics, TransferLedger)> {
    config.validate()?;
    let model = build_model(config)?;
    let plan = config.resolve_plan()?;
    execute(config, &model, plan)
}

pub fn run_with_plan(
    config: &RunConfig,
    model: &ToyModel,
    plan: SchedulePlan,
) -> Result<RunMetrics> {
    execute(config, model, plan).map(|(m, _)| m)
}

fn execute(
    config: &RunConfig,
    model: &ToyModel,
    plan: SchedulePlan,
) -> Result<(RunMetrics, TransferLedger)> {
    let prompt = config.prompt_tokens();
    let mut session = Session::start(model, &prompt, config.sparsity, plan, config.cost_params())?;
    while session.step() < config.workload.gen_len {
        let out = session.decode_step()?;
        if Some(out.token) == config.workload.eos {
            break;
        }
    }
    let policy = if config.schedule.plan.is_some() {
        "fixed"
    } else {
        config.schedule.policy.name()
    };
    let ledger = session.ledger().transfer_ledger().clone();
    Ok((session.into_metrics(policy), ledger))
}
