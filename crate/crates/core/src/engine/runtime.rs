//! Prefill and cached decode over the simulated two-tier memory.

use crate::attention::{self, AttentionState, SparsityConfig};
use crate::engine::metrics::{RunMetrics, StepRecord, METRICS_SCHEMA};
use crate::engine::model::{argmax, ToyModel};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::memsim::{CostParams, KvLedger};
use crate::quant;
use crate::scheduler::{self, SchedulePlan};

pub const SPARSITY_THRESHOLD: f64 = 0.01;

/// Result of running the prompt through the model in one pass.
#[derive(Debug, Clone)]
pub struct Prefill {
    /// Logits at the last prompt position.
    pub logits: Vec<f64>,
    pub states: Vec<AttentionState>,
    /// Residual input of every layer at every prompt position, kept so that
    /// dropped KV can be recomputed.
    pub layer_inputs: Vec<Vec<Vec<f64>>>,
    /// Last attention row of each layer, `heads × s`.
    pub final_aw_rows: Vec<Matrix>,
    /// Causal sparsity of each layer's attention map, averaged over heads.
    pub sparsity: Vec<f64>,
}

fn stored(m: Matrix, bits: Option<u32>, head_dim: usize) -> Result<Matrix> {
    match bits {
        None => Ok(m),
        Some(b) => {
            let (rows, cols) = (m.rows(), m.cols());
            Matrix::from_vec(rows, cols, quant::fake_quantize(m.data(), b, head_dim)?)
        }
    }
}

/// Dense causal pass over the whole prompt.
pub fn prefill(model: &ToyModel, prompt: &[usize], quant_bits: Option<u32>) -> Result<Prefill> {
    if prompt.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    let shape = model.shape;
    if prompt.len() > shape.context {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            context: shape.context,
        });
    }
    let (heads, d) = (shape.heads, shape.head_dim);
    let s = prompt.len();
    let mut xs = prompt
        .iter()
        .enumerate()
        .map(|(pos, &t)| model.embed(t, pos))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Prefill {
        logits: Vec::new(),
        states: Vec::with_capacity(shape.layers),
        layer_inputs: Vec::with_capacity(shape.layers),
        final_aw_rows: Vec::with_capacity(shape.layers),
        sparsity: Vec::with_capacity(shape.layers),
    };
    for layer in 0..shape.layers {
        out.layer_inputs.push(xs.clone());
        let mut state = AttentionState::new(heads, d);
        let mut qs = vec![Matrix::zeros(0, d); heads];
        let mut ks = vec![Matrix::zeros(0, d); heads];
        let mut vs = vec![Matrix::zeros(0, d); heads];
        for x in &xs {
            let (q, k, v) = model.qkv(layer, x);
            let k = stored(k, quant_bits, d)?;
            let v = stored(v, quant_bits, d)?;
            for h in 0..heads {
                qs[h].push_row(q.row(h))?;
                ks[h].push_row(k.row(h))?;
                vs[h].push_row(v.row(h))?;
            }
            state.append(&k, &v)?;
        }
        let mut attn = Vec::with_capacity(heads);
        let mut aw = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, w) = attention::dense_attention(&qs[h], &ks[h], &vs[h], true)?;
            attn.push(a);
            aw.push(w);
        }
        state.seed_from_prefill(&aw)?;
        let mut last = Matrix::zeros(heads, s);
        let mut sparsity = 0.0;
        for (h, w) in aw.iter().enumerate() {
            last.row_mut(h).copy_from_slice(w.row(s - 1));
            sparsity += attention::causal_attention_sparsity(w, SPARSITY_THRESHOLD)?;
        }
        out.final_aw_rows.push(last);
        out.sparsity.push(sparsity / heads as f64);
        out.states.push(state);
        for (t, x) in xs.iter_mut().enumerate() {
            let mut heads_out = Matrix::zeros(heads, d);
            for (h, a) in attn.iter().enumerate() {
                heads_out.row_mut(h).copy_from_slice(a.row(t));
            }
            let y = model.attention_residual(layer, x, &heads_out);
            *x = model.ffn_residual(layer, &y);
        }
    }
    out.logits = model.logits(&xs[s - 1]);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub token: usize,
    pub record: StepRecord,
}

/// A prefilled sequence being decoded under a schedule plan.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m ToyModel,
    sparsity: SparsityConfig,
    plan: SchedulePlan,
    params: CostParams,
    quant_bits: Option<u32>,
    states: Vec<AttentionState>,
    layer_inputs: Vec<Vec<Vec<f64>>>,
    ledger: KvLedger,
    tokens: Vec<usize>,
    prompt_len: usize,
    next_input: usize,
    step: usize,
    track_correlation: bool,
    recompute_mismatches: usize,
    step_rho: Vec<Vec<f64>>,
    sparsity_trace: Vec<Vec<f64>>,
    prefill_logits: Vec<f64>,
    prefill_sparsity: Vec<f64>,
    prefill_s: f64,
    records: Vec<StepRecord>,
}

impl<'m> Session<'m> {
    pub fn start(
        model: &'m ToyModel,
        prompt: &[usize],
        sparsity: SparsityConfig,
        plan: SchedulePlan,
        params: CostParams,
    ) -> Result<Self> {
        sparsity.validate()?;
        params.validate()?;
        plan.validate(params.gen_len)?;
        let shape = model.shape;
        if params.layers != shape.layers || params.hidden != shape.hidden() {
            return Err(Error::contract(
                "cost parameters do not match the model shape",
            ));
        }
        if params.prompt_len != prompt.len() {
            return Err(Error::contract(format!(
                "cost parameters expect a prompt of {} tokens, got {}",
                params.prompt_len,
                prompt.len()
            )));
        }
        let quant_bits = params.precision.quant_bits();
        let pre = prefill(model, prompt, quant_bits)?;
        let mut ledger = KvLedger::new(&params);
        for layer in 0..shape.layers {
            for t in 0..prompt.len() {
                ledger.store(layer, t)?;
            }
        }
        let s = prompt.len() as u64;
        Ok(Session {
            model,
            sparsity,
            plan,
            params,
            quant_bits,
            states: pre.states,
            layer_inputs: pre.layer_inputs,
            ledger,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            next_input: argmax(&pre.logits),
            step: 0,
            track_correlation: true,
            recompute_mismatches: 0,
            step_rho: vec![Vec::new(); shape.layers],
            sparsity_trace: vec![Vec::new(); shape.layers],
            prefill_logits: pre.logits,
            prefill_sparsity: pre.sparsity,
            prefill_s: params.compute_time(s * (s + 1) / 2),
            records: Vec::new(),
        })
    }

    /// Skips the dense reference pass kept for the correlation metric.
    pub fn without_correlation(mut self) -> Self {
        self.track_correlation = false;
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn ledger(&self) -> &KvLedger {
        &self.ledger
    }

    pub fn states(&self) -> &[AttentionState] {
        &self.states
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn prefill_logits(&self) -> &[f64] {
        &self.prefill_logits
    }

    /// Token the next decode step will consume.
    pub fn next_input(&self) -> usize {
        self.next_input
    }

    pub fn decode_step(&mut self) -> Result<StepOutput> {
        self.decode_step_with(self.next_input)
    }

    /// One decode step consuming `input` instead of the previous argmax.
    pub fn decode_step_with(&mut self, input: usize) -> Result<StepOutput> {
        let j = self.step;
        if j >= self.params.gen_len {
            return Err(Error::contract(format!(
                "decode step {j} beyond the planned {} steps",
                self.params.gen_len
            )));
        }
        let pos = self.tokens.len();
        let mut x = self.model.embed(input, pos)?;
        let layers = self.model.shape.layers;
        let d = self.model.shape.head_dim;

        for layer in 0..layers {
            let a = scheduler::rebalance_actions(&self.plan, &self.params, j, &self.ledger, layer)?;
            self.ledger.delete(layer, &a.delete)?;
            self.ledger.offload(layer, &a.offload)?;
        }

        let mut kept = 0;
        let mut step_sparsity = 0.0;
        for layer in 0..layers {
            self.layer_inputs[layer].push(x.clone());
            let (q, k, v) = self.model.qkv(layer, &x);
            let k = stored(k, self.quant_bits, d)?;
            let v = stored(v, self.quant_bits, d)?;
            self.ledger.store(layer, pos)?;
            let state = &mut self.states[layer];
            state.append(&k, &v)?;
            let sel = state.select(&self.sparsity)?;
            let (reload, recompute) =
                scheduler::fetch_actions(&sel.indices, self.ledger.tiers(layer));
            self.ledger.stage(layer, &reload)?;
            self.ledger.stage_recomputed(layer, &recompute)?;
            for &p in &recompute {
                let (rk, rv) = self.model.kv(layer, &self.layer_inputs[layer][p]);
                let rk = stored(rk, self.quant_bits, d)?;
                let rv = stored(rv, self.quant_bits, d)?;
                if (rk.clone(), rv.clone()) != state.token(p) {
                    self.recompute_mismatches += 1;
                }
                state.replace(p, &rk, &rv)?;
            }
            let reference = if self.track_correlation {
                Some(state.reference_weights(&q)?)
            } else {
                None
            };
            let out = state.attend(&q, &sel.indices)?;
            self.ledger
                .charge_compute(self.params.layer_compute_time(sel.indices.len() as u64));
            self.ledger.release_staged(layer);
            kept = sel.indices.len();

            let sp = attention::attention_sparsity(&out.aw_rows, SPARSITY_THRESHOLD)?;
            self.sparsity_trace[layer].push(sp);
            step_sparsity += sp;
            if let Some(reference) = reference {
                let dense = attention::head_sum(&reference);
                let sparse = attention::head_sum(&out.aw_rows);
                if let Ok(rho) = attention::score_distribution_correlation(&dense, &sparse) {
                    self.step_rho[layer].push(rho);
                }
            }

            let y = self.model.attention_residual(layer, &x, &out.attn);
            x = self.model.ffn_residual(layer, &y);
        }

        let logits = self.model.logits(&x);
        let token = argmax(&logits);
        let charge = self.ledger.finish_step(j);
        let record = StepRecord {
            step: j,
            phase: self.plan.phase(j),
            input_token: input,
            output_token: token,
            kept_tokens: kept,
            compute_s: charge.compute_seconds,
            transfer_s: charge.transfer_seconds,
            recompute_s: charge.recompute_seconds,
            offloaded: charge.offloaded,
            reloaded: charge.reloaded,
            recomputed: charge.recomputed,
            deleted: charge.deleted,
            device_bytes: charge.device_bytes,
            host_bytes: charge.host_bytes,
            peak_device_bytes: charge.peak_device_bytes,
            sparsity: step_sparsity / layers as f64,
        };
        self.records.push(record.clone());
        self.tokens.push(input);
        self.next_input = token;
        self.step += 1;
        Ok(StepOutput {
            logits,
            token,
            record,
        })
    }

    /// Per layer, the mean over decode steps of the Spearman ρ between the
    /// weights this run used and dense weights over the same cache. Steps
    /// where ρ is undefined (a single cached token) are skipped.
    pub fn correlation(&self) -> Vec<Option<f64>> {
        self.step_rho
            .iter()
            .map(|r| (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64))
            .collect()
    }

    pub fn into_metrics(self, policy: &str) -> RunMetrics {
        let correlation = self.correlation();
        let steps = self.records;
        let compute_s: f64 = steps.iter().map(|s| s.compute_s).sum();
        let transfer_s: f64 = steps.iter().map(|s| s.transfer_s).sum();
        let recompute_s: f64 = steps.iter().map(|s| s.recompute_s).sum();
        let total_s = self.prefill_s + compute_s + transfer_s + recompute_s;
        let n = steps.len();
        let ltb = self.params.layer_token_bytes();
        let transferred_bytes = steps.iter().map(|s| (s.offloaded + s.reloaded) * ltb).sum();
        RunMetrics {
            schema: METRICS_SCHEMA.to_string(),
            variant: self.sparsity.variant,
            ratio: self.sparsity.ratio,
            policy: policy.to_string(),
            plan: self.plan,
            prompt: self.tokens[..self.prompt_len].to_vec(),
            generated: steps.iter().map(|s| s.output_token).collect(),
            tokens_generated: n,
            prefill_s: self.prefill_s,
            compute_s,
            transfer_s,
            recompute_s,
            total_s,
            throughput_tokens_per_s: if total_s > 0.0 {
                n as f64 / total_s
            } else {
                0.0
            },
            seconds_per_token: if n > 0 { total_s / n as f64 } else { 0.0 },
            transferred_bytes,
            peak_device_bytes: self.ledger.peak_device_bytes(),
            peak_host_bytes: self.ledger.peak_host_bytes(),
            recompute_mismatches: self.recompute_mismatches,
            prefill_sparsity: self.prefill_sparsity,
            sparsity: self.sparsity_trace,
            correlation,
            steps,
        }
    }
}
