//! Offline planning of the three-phase cache/offload/recompute schedule and
//! the per-step actions that carry it out.
//!
//! At decode step `j` the cache holds `s + j` tokens and one more is added.
//! Off-device tokens always form a prefix of the sequence: positions
//! `[0, deleted)` are deleted, `[deleted, offloaded)` live on the host and
//! the rest, which always includes the locally static window, stay on the
//! device. The prefix only ever grows.
//!
//! * Phase I (`j < p1`): everything on the device.
//! * Phase II (`p1 <= j < p2`): the host holds `ceil(α·(j+s))` of the
//!   non-local tokens; selected host tokens are fetched for compute.
//! * Phase III (`j >= p2`): additionally the oldest `ceil(β·offloaded)`
//!   tokens are deleted and recomputed when a selection references them.

use serde::{Deserialize, Serialize};

use crate::attention::swa_split;
use crate::error::{Error, Result};
use crate::memsim::{CostParams, KvLedger, Tier};
use crate::par::{self, Exec};

/// Offload and recompute ratios are searched on this grid.
pub const GRID_STEP: f64 = 0.05;
pub const GREEDY_SWEEPS: usize = 2;

/// `⌈x⌉` that ignores rounding noise just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

pub fn ratio_grid() -> Vec<f64> {
    (1..=19)
        .map(|i| (i as f64 * GRID_STEP * 100.0).round() / 100.0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Three-phase schedule driven by `(α, β, p1, p2)`.
    Dynamic,
    /// Fixed fraction `α` of every token on the host from the first step.
    StaticSplit,
    /// All KV on the host; every selected token is fetched.
    AllHost,
    /// Never offload.
    AllDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub steps: usize,
    pub compute_seconds: f64,
    pub transfer_seconds: f64,
    pub recompute_seconds: f64,
}

impl PhaseTotals {
    pub fn total(&self) -> f64 {
        self.compute_seconds + self.transfer_seconds + self.recompute_seconds
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub phase_i: PhaseTotals,
    pub phase_ii: PhaseTotals,
    pub phase_iii: PhaseTotals,
}

impl Breakdown {
    pub fn get_mut(&mut self, phase: Phase) -> &mut PhaseTotals {
        match phase {
            Phase::I => &mut self.phase_i,
            Phase::II => &mut self.phase_ii,
            Phase::III => &mut self.phase_iii,
        }
    }

    pub fn compute_seconds(&self) -> f64 {
        self.phase_i.compute_seconds
            + self.phase_ii.compute_seconds
            + self.phase_iii.compute_seconds
    }

    pub fn transfer_seconds(&self) -> f64 {
        self.phase_i.transfer_seconds
            + self.phase_ii.transfer_seconds
            + self.phase_iii.transfer_seconds
    }

    pub fn recompute_seconds(&self) -> f64 {
        self.phase_i.recompute_seconds
            + self.phase_ii.recompute_seconds
            + self.phase_iii.recompute_seconds
    }

    pub fn total(&self) -> f64 {
        self.phase_i.total() + self.phase_ii.total() + self.phase_iii.total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub kind: PlanKind,
    pub alpha: f64,
    pub beta: f64,
    pub p1: usize,
    pub p2: usize,
    pub predicted_total_seconds: f64,
    pub breakdown: Breakdown,
}

impl SchedulePlan {
    fn bare(kind: PlanKind, alpha: f64, beta: f64, p1: usize, p2: usize) -> Self {
        SchedulePlan {
            kind,
            alpha,
            beta,
            p1,
            p2,
            predicted_total_seconds: 0.0,
            breakdown: Breakdown::default(),
        }
    }

    pub fn dynamic(alpha: f64, beta: f64, p1: usize, p2: usize) -> Self {
        Self::bare(PlanKind::Dynamic, alpha, beta, p1, p2)
    }

    /// Pure Phase I, encoded as `p1 = p2 = n`.
    pub fn all_device(n: usize) -> Self {
        Self::bare(PlanKind::AllDevice, 0.0, 0.0, n, n)
    }

    pub fn static_split(fraction: f64, n: usize) -> Self {
        Self::bare(PlanKind::StaticSplit, fraction, 0.0, 0, n)
    }

    pub fn all_host(n: usize) -> Self {
        Self::bare(PlanKind::AllHost, 1.0, 0.0, 0, n)
    }

    /// The same plan with Phase III switched off.
    pub fn without_recompute(&self, n: usize) -> Self {
        let mut p = Self::bare(self.kind, self.alpha, 0.0, self.p1, n);
        if p.p1 == n {
            p.alpha = 0.0;
        }
        p
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if self.p1 > self.p2 || self.p2 > n {
            return Err(Error::contract(format!(
                "phase steps must satisfy 0 <= p1 <= p2 <= n, got p1={} p2={} n={n}",
                self.p1, self.p2
            )));
        }
        match self.kind {
            PlanKind::Dynamic => {
                if self.p1 == self.p2 && self.p1 != n {
                    return Err(Error::contract("p1 must be < p2 unless both equal n"));
                }
                if self.p1 < n && !open(self.alpha) {
                    return Err(Error::contract(format!(
                        "alpha {} not in (0, 1)",
                        self.alpha
                    )));
                }
                if self.p2 < n && !open(self.beta) {
                    return Err(Error::contract(format!("beta {} not in (0, 1)", self.beta)));
                }
            }
            PlanKind::StaticSplit => {
                if !open(self.alpha) {
                    return Err(Error::contract(format!(
                        "static fraction {} not in (0, 1)",
                        self.alpha
                    )));
                }
            }
            PlanKind::AllHost | PlanKind::AllDevice => {}
        }
        Ok(())
    }

    pub fn phase(&self, step: usize) -> Phase {
        match self.kind {
            PlanKind::AllDevice => Phase::I,
            PlanKind::StaticSplit | PlanKind::AllHost => Phase::II,
            PlanKind::Dynamic => {
                if step < self.p1 {
                    Phase::I
                } else if step < self.p2 {
                    Phase::II
                } else {
                    Phase::III
                }
            }
        }
    }

    /// Off-device and deleted prefix lengths the plan asks for at `step`,
    /// before the monotone clamp against earlier steps.
    pub fn targets(&self, params: &CostParams, step: usize) -> Targets {
        let existing = params.prompt_len + step;
        let (local, _) = swa_split(existing + 1, params.ratio);
        let non_local = existing + 1 - local;
        let phase = self.phase(step);
        let ceil_frac = |f: f64| ceil_tol(f * existing as f64);
        let offloaded = match (self.kind, phase) {
            (_, Phase::I) => 0,
            (PlanKind::Dynamic, _) => ceil_frac(self.alpha).min(non_local),
            (PlanKind::StaticSplit, _) => ceil_frac(self.alpha).min(existing),
            (PlanKind::AllHost, _) => existing,
            (PlanKind::AllDevice, _) => 0,
        };
        let deleted = if phase == Phase::III {
            ceil_tol(self.beta * offloaded as f64).min(offloaded)
        } else {
            0
        };
        Targets {
            phase,
            offloaded,
            deleted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub phase: Phase,
    pub offloaded: usize,
    pub deleted: usize,
}

/// Deterministic stand-in for the data-dependent SWA selection, used by the
/// offline predictor: the local window plus global picks spread evenly over
/// the candidate positions.
pub fn planning_selection(tokens: usize, ratio: f64) -> Vec<usize> {
    let (local, global) = swa_split(tokens, ratio);
    let candidates = tokens - local;
    let mut sel: Vec<usize> = if global >= candidates {
        (0..candidates).collect()
    } else {
        (0..global)
            .map(|i| (2 * i + 1) * candidates / (2 * global))
            .collect()
    };
    sel.extend(candidates..tokens);
    sel
}

/// Most selected entries of one layer that can sit in the off-device prefix.
fn worst_case_fetch(tokens: usize, ratio: f64, offloaded: usize) -> usize {
    let (local, global) = swa_split(tokens, ratio);
    let candidates = tokens - local;
    global.min(offloaded.min(candidates)) + offloaded.saturating_sub(candidates)
}

fn oom(params: &CostParams, layer_entries: u64) -> Error {
    Error::OutOfDeviceMemory {
        required: layer_entries * params.layer_token_bytes(),
        capacity: params.capacity_bytes(),
    }
}

/// Evaluates `Σ T^c + Σ T^m(α) + Σ T^r(β)` over the decode steps, rejecting
/// plans whose worst-case device residency exceeds the capacity.
pub fn predict_total_time(plan: &SchedulePlan, params: &CostParams) -> Result<Breakdown> {
    params.validate()?;
    plan.validate(params.gen_len)?;
    let layers = params.layers as u64;
    let cap = params.capacity_bytes();
    let ltb = params.layer_token_bytes();
    if layers * params.prompt_len as u64 * ltb > cap {
        return Err(oom(params, layers * params.prompt_len as u64));
    }
    let mut out = Breakdown::default();
    let (mut off, mut del) = (0usize, 0usize);
    for j in 0..params.gen_len {
        let existing = params.prompt_len + j;
        let tokens = existing + 1;
        let t = plan.targets(params, j);
        let new_off = off.max(t.offloaded);
        let new_del = del.max(t.deleted);
        // device tokens entering the deleted prefix skip the host
        let offloaded = new_off.saturating_sub(off.max(new_del));
        off = new_off;
        del = new_del;

        let worst = worst_case_fetch(tokens, params.ratio, off) as u64;
        let peak = layers * (tokens - off) as u64 + worst;
        if peak * ltb > cap {
            return Err(oom(params, peak));
        }

        let sel = planning_selection(tokens, params.ratio);
        let fetched = sel.iter().filter(|&&p| p >= del && p < off).count() as u64;
        let recomputed = sel.iter().filter(|&&p| p < del).count() as u64;
        let totals = out.get_mut(t.phase);
        totals.steps += 1;
        totals.compute_seconds += params.compute_time(sel.len() as u64);
        totals.transfer_seconds += params.transfer_time(offloaded as u64, fetched);
        totals.recompute_seconds += params.recompute_time(recomputed);
    }
    Ok(out)
}

/// Fills in the prediction fields of `plan`.
pub fn evaluate(plan: &SchedulePlan, params: &CostParams) -> Result<SchedulePlan> {
    let breakdown = predict_total_time(plan, params)?;
    Ok(SchedulePlan {
        predicted_total_seconds: breakdown.total(),
        breakdown,
        ..plan.clone()
    })
}

fn cost(plan: &SchedulePlan, params: &CostParams) -> f64 {
    predict_total_time(plan, params).map_or(f64::INFINITY, |b| b.total())
}

/// Checks the hard constraints and returns `p1`: the first step whose KV no
/// longer fits on the device, or `n` when everything fits.
pub fn first_offload_step(params: &CostParams) -> Result<usize> {
    params.validate()?;
    let token = params.token_kv_bytes();
    let cap = params.capacity_bytes();
    if token > cap {
        return Err(Error::Infeasible(format!(
            "one token's KV ({token} bytes) exceeds device capacity ({cap} bytes)"
        )));
    }
    if params.prompt_len as u64 * token > cap {
        return Err(Error::Infeasible(format!(
            "prompt KV ({} bytes) exceeds device capacity ({cap} bytes)",
            params.prompt_len as u64 * token
        )));
    }
    let fit = params.capacity_tokens() as usize;
    // step j holds s + j + 1 tokens once the new one is stored
    Ok(fit.saturating_sub(params.prompt_len).min(params.gen_len))
}

/// Moves only on a real improvement, so summation noise cannot break ties.
fn improves(c: f64, best: f64) -> bool {
    if best.is_finite() {
        c < best - 1e-12 * best.abs()
    } else {
        c.is_finite()
    }
}

/// Solves for `(α, β, p2)` by greedy coordinate descent over the ratio
/// grid with `p1` fixed by capacity. `β` only matters once Phase III
/// starts, so `(β, p2)` move together as one coordinate block.
pub fn solve_plan(params: &CostParams) -> Result<SchedulePlan> {
    let n = params.gen_len;
    let p1 = first_offload_step(params)?;
    if p1 >= n {
        return evaluate(&SchedulePlan::dynamic(0.0, 0.0, n, n), params);
    }
    let grid = ratio_grid();
    let feasible_alpha = grid
        .iter()
        .position(|&a| cost(&SchedulePlan::dynamic(a, 0.5, p1, n), params).is_finite())
        .ok_or_else(|| {
            Error::Infeasible("no offload ratio keeps device residency within capacity".into())
        })?;

    let p2_values: Vec<usize> = (p1 + 1..=n).collect();
    let (mut ai, mut bi, mut pi) = (feasible_alpha, grid.len() / 2, p2_values.len() - 1);
    let eval = |ai: usize, bi: usize, pi: usize| {
        cost(
            &SchedulePlan::dynamic(grid[ai], grid[bi], p1, p2_values[pi]),
            params,
        )
    };
    let mut best = eval(ai, bi, pi);
    for _ in 0..GREEDY_SWEEPS {
        for i in 0..grid.len() {
            let c = eval(i, bi, pi);
            if improves(c, best) {
                (best, ai) = (c, i);
            }
        }
        for i in 0..grid.len() {
            for k in 0..p2_values.len() {
                let c = eval(ai, i, k);
                if improves(c, best) {
                    (best, bi, pi) = (c, i, k);
                }
            }
        }
    }
    evaluate(
        &SchedulePlan::dynamic(grid[ai], grid[bi], p1, p2_values[pi]),
        params,
    )
}

/// Exhaustive search over the same grid; the reference the greedy solver
/// is checked against.
pub fn exhaustive_plan(params: &CostParams, exec: Exec) -> Result<SchedulePlan> {
    let n = params.gen_len;
    let p1 = first_offload_step(params)?;
    if p1 >= n {
        return evaluate(&SchedulePlan::dynamic(0.0, 0.0, n, n), params);
    }
    let grid = ratio_grid();
    let mut points = Vec::with_capacity(grid.len() * grid.len() * (n - p1));
    for &a in &grid {
        for &b in &grid {
            for p2 in p1 + 1..=n {
                points.push((a, b, p2));
            }
        }
    }
    let costs = par::map(exec, &points, |&(a, b, p2)| {
        cost(&SchedulePlan::dynamic(a, b, p1, p2), params)
    });
    let (i, c) =
        costs.iter().enumerate().fold(
            (0, f64::INFINITY),
            |(bi, bc), (i, &c)| if c < bc { (i, c) } else { (bi, bc) },
        );
    if !c.is_finite() {
        return Err(Error::Infeasible(
            "no grid point fits the device capacity".into(),
        ));
    }
    let (a, b, p2) = points[i];
    evaluate(&SchedulePlan::dynamic(a, b, p1, p2), params)
}

/// Best static host fraction on the ratio grid.
pub fn static_split_plan(params: &CostParams) -> Result<SchedulePlan> {
    let n = params.gen_len;
    let best = ratio_grid()
        .into_iter()
        .map(|f| SchedulePlan::static_split(f, n))
        .map(|p| (cost(&p, params), p))
        .fold(None::<(f64, SchedulePlan)>, |acc, (c, p)| match acc {
            Some((bc, _)) if bc <= c => acc,
            _ if c.is_finite() => Some((c, p)),
            _ => acc,
        })
        .ok_or_else(|| Error::Infeasible("no static split fits the device capacity".into()))?;
    evaluate(&best.1, params)
}

pub fn all_host_plan(params: &CostParams) -> Result<SchedulePlan> {
    evaluate(&SchedulePlan::all_host(params.gen_len), params)
}

/// Ledger mutations and fetches one layer needs at one step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepActions {
    pub offload: Vec<usize>,
    pub delete: Vec<usize>,
    /// Selected host tokens fetched for this step's compute.
    pub reload: Vec<usize>,
    /// Selected deleted tokens recomputed for this step's compute.
    pub recompute: Vec<usize>,
}

impl StepActions {
    pub fn is_empty(&self) -> bool {
        self.offload.is_empty()
            && self.delete.is_empty()
            && self.reload.is_empty()
            && self.recompute.is_empty()
    }
}

/// Deletes and offloads that bring `layer` to the plan's split for `step`.
/// Only ever moves tokens off the device.
pub fn rebalance_actions(
    plan: &SchedulePlan,
    params: &CostParams,
    step: usize,
    ledger: &KvLedger,
    layer: usize,
) -> Result<StepActions> {
    if step >= params.gen_len {
        return Err(Error::contract(format!(
            "step {step} beyond n = {}",
            params.gen_len
        )));
    }
    let t = plan.targets(params, step);
    let tiers = ledger.tiers(layer);
    let mut actions = StepActions::default();
    for (pos, &tier) in tiers.iter().enumerate().take(t.offloaded.max(t.deleted)) {
        if pos < t.deleted {
            if tier != Tier::Deleted {
                actions.delete.push(pos);
            }
        } else if tier == Tier::Device {
            actions.offload.push(pos);
        }
    }
    Ok(actions)
}

/// Splits a selection into tokens to fetch from the host and tokens to
/// recompute, given the layer's tiers after rebalancing. Positions past
/// the ledger (the token being generated) are on the device.
pub fn fetch_actions(selection: &[usize], tiers: &[Tier]) -> (Vec<usize>, Vec<usize>) {
    let mut reload = Vec::new();
    let mut recompute = Vec::new();
    for &p in selection {
        match tiers.get(p) {
            Some(Tier::Host) => reload.push(p),
            Some(Tier::Deleted) => recompute.push(p),
            _ => {}
        }
    }
    (reload, recompute)
}

/// Everything `layer` has to do at `step` for the given selection: the
/// rebalance against the plan, then fetches against the rebalanced tiers.
pub fn step_actions(
    plan: &SchedulePlan,
    params: &CostParams,
    step: usize,
    selection: &[usize],
    ledger: &KvLedger,
    layer: usize,
) -> Result<StepActions> {
    let mut actions = rebalance_actions(plan, params, step, ledger, layer)?;
    let mut tiers = ledger.tiers(layer).to_vec();
    for &p in &actions.delete {
        tiers[p] = Tier::Deleted;
    }
    for &p in &actions.offload {
        tiers[p] = Tier::Host;
    }
    let (reload, recompute) = fetch_actions(selection, &tiers);
    actions.reload = reload;
    actions.recompute = recompute;
    Ok(actions)
}
