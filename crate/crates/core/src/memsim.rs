//! Two-tier (device/host) KV memory simulator.
//!
//! Capacity is tracked per `(layer, token)` entry. Transfers are charged
//! synchronously at `bytes / bandwidth`; compute and recompute are charged
//! from multiply-accumulate counts at a fixed `mac_rate`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvPrecision {
    Fp16,
    Int8,
    Int4,
}

impl KvPrecision {
    pub fn bits(self) -> u64 {
        match self {
            KvPrecision::Fp16 => 16,
            KvPrecision::Int8 => 8,
            KvPrecision::Int4 => 4,
        }
    }

    /// Quantizer bit width, `None` for the unquantized cache.
    pub fn quant_bits(self) -> Option<u32> {
        match self {
            KvPrecision::Fp16 => None,
            KvPrecision::Int8 => Some(8),
            KvPrecision::Int4 => Some(4),
        }
    }
}

/// Shape of the workload plus the simulator's throughput constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Hidden dimension `h`.
    pub hidden: usize,
    /// Layer count `l`.
    pub layers: usize,
    /// Batch size `b`.
    pub batch: usize,
    /// Input length `s`.
    pub prompt_len: usize,
    /// Output length `n`.
    pub gen_len: usize,
    /// Caching ratio `r`.
    pub ratio: f64,
    /// Host-device bandwidth `B` in bytes per second.
    pub bandwidth: f64,
    pub precision: KvPrecision,
    /// KV budget on the device in bytes; `None` means unlimited.
    pub device_capacity: Option<u64>,
    /// Simulated multiply-accumulates per second.
    pub mac_rate: f64,
    pub recompute_overhead: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("batch", self.batch),
            ("prompt_len", self.prompt_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(self.mac_rate > 0.0 && self.mac_rate.is_finite()) {
            return Err(Error::Config("mac_rate must be positive and finite".into()));
        }
        if !(self.recompute_overhead >= 1.0 && self.recompute_overhead.is_finite()) {
            return Err(Error::Config("recompute_overhead must be >= 1".into()));
        }
        Ok(())
    }

    /// K and V bytes of one token in one layer: `2 · bytes_per_element · b · h`.
    pub fn layer_token_bytes(&self) -> u64 {
        2 * self.batch as u64 * self.hidden as u64 * self.precision.bits() / 8
    }

    /// K and V bytes of one token across all layers (`4·b·l·h` at FP16).
    pub fn token_kv_bytes(&self) -> u64 {
        self.layers as u64 * self.layer_token_bytes()
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.device_capacity.unwrap_or(u64::MAX)
    }

    /// Whole tokens that fit in the device budget.
    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_bytes() / self.token_kv_bytes().max(1)
    }

    pub fn bytes_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth
    }

    /// Seconds to move `theta_c` tokens to the host and `theta_g` back.
    pub fn transfer_time(&self, theta_c: u64, theta_g: u64) -> f64 {
        self.bytes_time(self.token_kv_bytes() * (theta_c + theta_g))
    }

    pub fn layer_transfer_time(&self, layer_tokens: u64) -> f64 {
        self.bytes_time(self.layer_token_bytes() * layer_tokens)
    }

    /// Attention MACs of one decode step over `kept_tokens`, all layers:
    /// `b·l·h·kept` for `QKᵀ` plus the same for `AW·V`.
    pub fn compute_macs(&self, kept_tokens: u64) -> f64 {
        2.0 * self.batch as f64 * self.layers as f64 * self.hidden as f64 * kept_tokens as f64
    }

    pub fn compute_time(&self, kept_tokens: u64) -> f64 {
        self.compute_macs(kept_tokens) / self.mac_rate
    }

    pub fn layer_compute_time(&self, kept_tokens: u64) -> f64 {
        2.0 * self.batch as f64 * self.hidden as f64 * kept_tokens as f64 / self.mac_rate
    }

    /// K and V projections of `tokens` in every layer, scaled by the overhead.
    pub fn recompute_time(&self, tokens: u64) -> f64 {
        self.layers as f64 * self.layer_recompute_time(tokens)
    }

    pub fn layer_recompute_time(&self, layer_tokens: u64) -> f64 {
        let h = self.hidden as f64;
        self.recompute_overhead * 2.0 * self.batch as f64 * h * h * layer_tokens as f64
            / self.mac_rate
    }

    /// Bandwidth below which recomputing a token beats fetching it.
    pub fn recompute_breakeven_bandwidth(&self) -> f64 {
        self.layer_token_bytes() as f64 * self.mac_rate
            / (self.recompute_overhead
                * 2.0
                * self.batch as f64
                * (self.hidden * self.hidden) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Host,
    Deleted,
}

/// Per-step charges, in layer-token units for the counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCharge {
    pub step: usize,
    /// `θ^c`: entries moved device → host.
    pub offloaded: u64,
    /// `θ^g`: entries moved or staged host → device.
    pub reloaded: u64,
    pub recomputed: u64,
    pub deleted: u64,
    pub transfer_seconds: f64,
    pub compute_seconds: f64,
    pub recompute_seconds: f64,
    pub peak_device_bytes: u64,
    pub device_bytes: u64,
    pub host_bytes: u64,
}

impl StepCharge {
    pub fn total_seconds(&self) -> f64 {
        self.compute_seconds + self.transfer_seconds + self.recompute_seconds
    }
}

/// Time accounting of a simulation, one record per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub steps: Vec<StepCharge>,
}

pub const LEDGER_CSV_SCHEMA: &str = "kvtier.ledger.v1";

impl TransferLedger {
    pub fn total_transfer(&self) -> f64 {
        self.steps.iter().map(|s| s.transfer_seconds).sum()
    }

    pub fn total_compute(&self) -> f64 {
        self.steps.iter().map(|s| s.compute_seconds).sum()
    }

    pub fn total_recompute(&self) -> f64 {
        self.steps.iter().map(|s| s.recompute_seconds).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.steps.iter().map(StepCharge::total_seconds).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            LEDGER_CSV_SCHEMA,
            "step",
            "device_bytes",
            "host_bytes",
            "peak_device_bytes",
            "offloaded",
            "reloaded",
            "recomputed",
            "deleted",
            "transfer_s",
        ])?;
        for s in &self.steps {
            w.write_record([
                String::new(),
                s.step.to_string(),
                s.device_bytes.to_string(),
                s.host_bytes.to_string(),
                s.peak_device_bytes.to_string(),
                s.offloaded.to_string(),
                s.reloaded.to_string(),
                s.recomputed.to_string(),
                s.deleted.to_string(),
                s.transfer_seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tier of every `(layer, token)` KV entry plus the transient device
/// working set used while a layer attends over off-device tokens.
#[derive(Debug, Clone)]
pub struct KvLedger {
    params: CostParams,
    entries: Vec<Vec<Tier>>,
    staged: Vec<Vec<usize>>,
    device_entries: u64,
    host_entries: u64,
    staged_entries: u64,
    current: StepCharge,
    history: TransferLedger,
    peak_device_bytes: u64,
    peak_host_bytes: u64,
}

impl KvLedger {
    pub fn new(params: &CostParams) -> Self {
        KvLedger {
            params: *params,
            entries: vec![Vec::new(); params.layers],
            staged: vec![Vec::new(); params.layers],
            device_entries: 0,
            host_entries: 0,
            staged_entries: 0,
            current: StepCharge::default(),
            history: TransferLedger::default(),
            peak_device_bytes: 0,
            peak_host_bytes: 0,
        }
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    pub fn layers(&self) -> usize {
        self.entries.len()
    }

    /// Tokens recorded for `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.entries[layer].len()
    }

    pub fn tier(&self, layer: usize, token: usize) -> Option<Tier> {
        self.entries.get(layer)?.get(token).copied()
    }

    pub fn tiers(&self, layer: usize) -> &[Tier] {
        &self.entries[layer]
    }

    pub fn device_bytes(&self) -> u64 {
        (self.device_entries + self.staged_entries) * self.params.layer_token_bytes()
    }

    pub fn resident_device_bytes(&self) -> u64 {
        self.device_entries * self.params.layer_token_bytes()
    }

    pub fn host_bytes(&self) -> u64 {
        self.host_entries * self.params.layer_token_bytes()
    }

    pub fn peak_device_bytes(&self) -> u64 {
        self.peak_device_bytes
    }

    pub fn peak_host_bytes(&self) -> u64 {
        self.peak_host_bytes
    }

    pub fn count(&self, tier: Tier) -> u64 {
        self.entries
            .iter()
            .flat_map(|l| l.iter())
            .filter(|&&t| t == tier)
            .count() as u64
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.entries.len() {
            return Err(Error::contract(format!("layer {layer} out of range")));
        }
        Ok(())
    }

    fn ensure_fits(&self, extra_entries: u64) -> Result<()> {
        let required = (self.device_entries + self.staged_entries + extra_entries)
            * self.params.layer_token_bytes();
        let capacity = self.params.capacity_bytes();
        if required > capacity {
            return Err(Error::OutOfDeviceMemory { required, capacity });
        }
        Ok(())
    }

    fn check_tiers(&self, layer: usize, tokens: &[usize], from: &[Tier], op: &str) -> Result<()> {
        self.check_layer(layer)?;
        for &t in tokens {
            match self.entries[layer].get(t) {
                None => {
                    return Err(Error::contract(format!(
                        "{op}: token {t} not in layer {layer}"
                    )))
                }
                Some(Tier::Deleted) if !from.contains(&Tier::Deleted) => {
                    return Err(Error::contract(format!(
                        "{op}: token {t} of layer {layer} is deleted"
                    )))
                }
                Some(tier) if !from.contains(tier) => {
                    return Err(Error::contract(format!(
                        "{op}: token {t} of layer {layer} is on {tier:?}"
                    )))
                }
                _ => {}
            }
        }
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(format!("{op}: duplicate tokens")));
        }
        Ok(())
    }

    fn note_peaks(&mut self) {
        let dev = self.device_bytes();
        self.peak_device_bytes = self.peak_device_bytes.max(dev);
        self.current.peak_device_bytes = self.current.peak_device_bytes.max(dev);
        self.peak_host_bytes = self.peak_host_bytes.max(self.host_bytes());
    }

    /// Records a freshly computed token on the device.
    pub fn store(&mut self, layer: usize, token: usize) -> Result<()> {
        self.check_layer(layer)?;
        if token != self.entries[layer].len() {
            return Err(Error::contract(format!(
                "store of token {token} but layer {layer} holds {}",
                self.entries[layer].len()
            )));
        }
        self.ensure_fits(1)?;
        self.entries[layer].push(Tier::Device);
        self.device_entries += 1;
        self.note_peaks();
        Ok(())
    }

    /// Moves device entries to the host. Returns the charged seconds.
    pub fn offload(&mut self, layer: usize, tokens: &[usize]) -> Result<f64> {
        self.check_tiers(layer, tokens, &[Tier::Device], "offload")?;
        for &t in tokens {
            self.entries[layer][t] = Tier::Host;
        }
        let n = tokens.len() as u64;
        self.device_entries -= n;
        self.host_entries += n;
        self.current.offloaded += n;
        let secs = self.params.layer_transfer_time(n);
        self.current.transfer_seconds += secs;
        self.note_peaks();
        Ok(secs)
    }

    /// Moves host entries back to the device. Returns the charged seconds.
    pub fn reload(&mut self, layer: usize, tokens: &[usize]) -> Result<f64> {
        self.check_tiers(layer, tokens, &[Tier::Host], "reload")?;
        let n = tokens.len() as u64;
        self.ensure_fits(n)?;
        for &t in tokens {
            self.entries[layer][t] = Tier::Device;
        }
        self.host_entries -= n;
        self.device_entries += n;
        self.current.reloaded += n;
        let secs = self.params.layer_transfer_time(n);
        self.current.transfer_seconds += secs;
        self.note_peaks();
        Ok(secs)
    }

    /// Drops entries from either tier. Free of transfer time.
    pub fn delete(&mut self, layer: usize, tokens: &[usize]) -> Result<f64> {
        self.check_tiers(layer, tokens, &[Tier::Device, Tier::Host], "delete")?;
        for &t in tokens {
            match self.entries[layer][t] {
                Tier::Device => self.device_entries -= 1,
                Tier::Host => self.host_entries -= 1,
                Tier::Deleted => unreachable!(),
            }
            self.entries[layer][t] = Tier::Deleted;
        }
        self.current.deleted += tokens.len() as u64;
        Ok(0.0)
    }

    /// Copies host entries into the device working set for one layer's
    /// compute; the host copy stays authoritative. Returns charged seconds.
    pub fn stage(&mut self, layer: usize, tokens: &[usize]) -> Result<f64> {
        self.check_tiers(layer, tokens, &[Tier::Host], "stage")?;
        let n = tokens.len() as u64;
        self.ensure_fits(n)?;
        self.staged[layer].extend_from_slice(tokens);
        self.staged_entries += n;
        self.current.reloaded += n;
        let secs = self.params.layer_transfer_time(n);
        self.current.transfer_seconds += secs;
        self.note_peaks();
        Ok(secs)
    }

    /// Recomputes deleted entries into the device working set. Returns the
    /// charged recompute seconds.
    pub fn stage_recomputed(&mut self, layer: usize, tokens: &[usize]) -> Result<f64> {
        self.check_tiers(layer, tokens, &[Tier::Deleted], "recompute")?;
        let n = tokens.len() as u64;
        self.ensure_fits(n)?;
        self.staged[layer].extend_from_slice(tokens);
        self.staged_entries += n;
        self.current.recomputed += n;
        let secs = self.params.layer_recompute_time(n);
        self.current.recompute_seconds += secs;
        self.note_peaks();
        Ok(secs)
    }

    pub fn staged(&self, layer: usize) -> &[usize] {
        &self.staged[layer]
    }

    /// Frees the working set of `layer`.
    pub fn release_staged(&mut self, layer: usize) {
        let n = self.staged[layer].len() as u64;
        self.staged[layer].clear();
        self.staged_entries -= n;
    }

    pub fn charge_compute(&mut self, seconds: f64) {
        self.current.compute_seconds += seconds;
    }

    /// Closes the current step and starts a fresh one.
    pub fn finish_step(&mut self, step: usize) -> StepCharge {
        let mut done = std::mem::take(&mut self.current);
        done.step = step;
        done.device_bytes = self.device_bytes();
        done.host_bytes = self.host_bytes();
        done.peak_device_bytes = done.peak_device_bytes.max(done.device_bytes);
        self.history.steps.push(done.clone());
        done
    }

    pub fn transfer_ledger(&self) -> &TransferLedger {
        &self.history
    }

    /// Bytes on each tier summed over entries, recomputed from scratch.
    pub fn audit(&self) -> (u64, u64) {
        let b = self.params.layer_token_bytes();
        (self.count(Tier::Device) * b, self.count(Tier::Host) * b)
    }
}
