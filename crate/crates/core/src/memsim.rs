//! Memory tiers, expert residency, the migration ledger and the step cost model.
//!
//! Experts live on an offload tier (host DRAM, or SSD when an SSD bandwidth is
//! configured) and are copied to the device when a step needs them. Every copy
//! is appended to a [`MigrationLedger`] tagged with the phase that caused it.
//! Dense parameters are always device resident and never appear in the ledger.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Host→device bandwidth of a PCIe 5.0 x16 link, one direction.
pub const DEFAULT_HOST_BANDWIDTH: f64 = 64e9;
pub const DEFAULT_DTYPE_BYTES: u64 = 4;
pub const DEFAULT_COMPUTE_RATE: f64 = 1e8;
pub const DEFAULT_EXPERT_COST_S: f64 = 2e-8;

/// An expert, addressed by MoE-layer ordinal and index within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertKey {
    pub fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Device,
    Host,
    Ssd,
}

/// What caused a migration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Speculation,
    Verification,
    BaselineStep,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Speculation => "speculation",
            Phase::Verification => "verification",
            Phase::BaselineStep => "baseline-step",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Capacities, bandwidths and the linear cost-model coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub device_capacity_bytes: u64,
    pub host_bandwidth_bytes_per_s: f64,
    /// When set, offloaded experts live on SSD and migrate at this rate.
    pub ssd_bandwidth_bytes_per_s: Option<f64>,
    pub bytes_per_expert: u64,
    pub compute_rate_tokens_per_s: f64,
    pub compute_cost_per_active_expert_s: f64,
}

impl TierConfig {
    /// Defaults for `spec`: 64 GB/s host link and a device large enough for every expert.
    pub fn for_model(spec: &ModelSpec, dtype_bytes: u64) -> Self {
        let bytes_per_expert = spec.params_per_expert() as u64 * dtype_bytes;
        let all = bytes_per_expert * (spec.num_moe_layers() * spec.experts_per_block) as u64;
        Self {
            device_capacity_bytes: all,
            host_bandwidth_bytes_per_s: DEFAULT_HOST_BANDWIDTH,
            ssd_bandwidth_bytes_per_s: None,
            bytes_per_expert,
            compute_rate_tokens_per_s: DEFAULT_COMPUTE_RATE,
            compute_cost_per_active_expert_s: DEFAULT_EXPERT_COST_S,
        }
    }

    pub fn offload_tier(&self) -> Tier {
        if self.ssd_bandwidth_bytes_per_s.is_some() {
            Tier::Ssd
        } else {
            Tier::Host
        }
    }

    /// Bandwidth of the link experts migrate over.
    pub fn migration_bandwidth(&self) -> f64 {
        self.ssd_bandwidth_bytes_per_s
            .unwrap_or(self.host_bandwidth_bytes_per_s)
    }

    /// Replace whichever bandwidth is active.
    pub fn with_migration_bandwidth(mut self, bandwidth: f64) -> Self {
        match &mut self.ssd_bandwidth_bytes_per_s {
            Some(bw) => *bw = bandwidth,
            None => self.host_bandwidth_bytes_per_s = bandwidth,
        }
        self
    }

    /// Check invariants; `pinned_per_layer` is N (or the cache size) for `moe_layers` layers.
    pub fn validate(&self, moe_layers: usize, pinned_per_layer: usize) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.host_bandwidth_bytes_per_s)
            || !self.ssd_bandwidth_bytes_per_s.is_none_or(positive)
        {
            return Err(Error::config("bandwidths must be positive"));
        }
        if self.bytes_per_expert == 0 {
            return Err(Error::config("bytes_per_expert must be positive"));
        }
        if !positive(self.compute_rate_tokens_per_s)
            || !(self.compute_cost_per_active_expert_s >= 0.0)
        {
            return Err(Error::config("cost-model coefficients must be positive"));
        }
        let needed = (pinned_per_layer * moe_layers) as u64 * self.bytes_per_expert;
        if self.device_capacity_bytes < needed {
            return Err(Error::CapacityExceeded {
                needed,
                capacity: self.device_capacity_bytes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: Phase,
    pub step: usize,
    pub key: ExpertKey,
    pub bytes: u64,
}

/// Totals of a ledger at one point in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub speculation_bytes: u64,
    pub verification_bytes: u64,
    pub baseline_bytes: u64,
    pub total_bytes: u64,
    pub migrations: usize,
}

/// Append-only record of expert migrations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MigrationLedger {
    entries: Vec<LedgerEntry>,
    phase_totals: [u64; 3],
}

impl MigrationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.phase_totals[entry.phase.slot()] += entry.bytes;
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.phase_totals[phase.slot()]
    }

    pub fn total(&self) -> u64 {
        self.phase_totals.iter().sum()
    }

    pub fn migrations(&self) -> usize {
        self.entries.len()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            speculation_bytes: self.phase_total(Phase::Speculation),
            verification_bytes: self.phase_total(Phase::Verification),
            baseline_bytes: self.phase_total(Phase::BaselineStep),
            total_bytes: self.total(),
            migrations: self.migrations(),
        }
    }

    /// Clear all entries, returning the totals as they were.
    pub fn reset(&mut self) -> LedgerSnapshot {
        let snap = self.snapshot();
        *self = Self::default();
        snap
    }

    /// One row per migration under the header `phase,step,layer,expert,bytes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "step", "layer", "expert", "bytes"])?;
        for e in &self.entries {
            w.write_record([
                e.phase.as_str().to_string(),
                e.step.to_string(),
                e.key.layer.to_string(),
                e.key.expert.to_string(),
                e.bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Where every expert currently lives, and which device residents are pinned.
#[derive(Debug, Clone)]
pub struct Residency {
    location: Vec<Vec<Tier>>,
    pinned: Vec<Vec<bool>>,
    home: Tier,
    device_bytes: u64,
    capacity: u64,
    bytes_per_expert: u64,
}

impl Residency {
    /// All experts start on the offload tier.
    pub fn new(layers: usize, experts: usize, tier: &TierConfig) -> Self {
        let home = tier.offload_tier();
        Self {
            location: vec![vec![home; experts]; layers],
            pinned: vec![vec![false; experts]; layers],
            home,
            device_bytes: 0,
            capacity: tier.device_capacity_bytes,
            bytes_per_expert: tier.bytes_per_expert,
        }
    }

    pub fn tier_of(&self, key: ExpertKey) -> Tier {
        self.location[key.layer][key.expert]
    }

    pub fn is_resident(&self, key: ExpertKey) -> bool {
        self.tier_of(key) == Tier::Device
    }

    pub fn is_pinned(&self, key: ExpertKey) -> bool {
        self.pinned[key.layer][key.expert]
    }

    pub fn device_bytes(&self) -> u64 {
        self.device_bytes
    }

    pub fn pinned_keys(&self) -> BTreeSet<ExpertKey> {
        self.keys_where(|l, e| self.pinned[l][e])
    }

    pub fn resident_keys(&self) -> BTreeSet<ExpertKey> {
        self.keys_where(|l, e| self.location[l][e] == Tier::Device)
    }

    fn keys_where(&self, pred: impl Fn(usize, usize) -> bool) -> BTreeSet<ExpertKey> {
        (0..self.location.len())
            .flat_map(|l| (0..self.location[l].len()).map(move |e| (l, e)))
            .filter(|&(l, e)| pred(l, e))
            .map(|(l, e)| ExpertKey::new(l, e))
            .collect()
    }

    fn check_key(&self, key: ExpertKey) -> Result<()> {
        if key.layer >= self.location.len() || key.expert >= self.location[key.layer].len() {
            return Err(Error::Domain(format!("invalid expert key {key:?}")));
        }
        Ok(())
    }

    fn migrate(
        &mut self,
        key: ExpertKey,
        phase: Phase,
        step: usize,
        ledger: &mut MigrationLedger,
    ) -> Result<u64> {
        if self.is_resident(key) {
            return Ok(0);
        }
        let needed = self.device_bytes + self.bytes_per_expert;
        if needed > self.capacity {
            return Err(Error::CapacityExceeded {
                needed,
                capacity: self.capacity,
            });
        }
        self.location[key.layer][key.expert] = Tier::Device;
        self.device_bytes = needed;
        ledger.record(LedgerEntry {
            phase,
            step,
            key,
            bytes: self.bytes_per_expert,
        });
        Ok(self.bytes_per_expert)
    }

    /// Bring every key onto the device; each non-resident key is migrated once.
    ///
    /// Newly migrated experts are transient (unpinned). Eviction only happens in
    /// [`Residency::evict_transients`], so an overflow here is an error.
    pub fn ensure_resident(
        &mut self,
        keys: &BTreeSet<ExpertKey>,
        phase: Phase,
        step: usize,
        ledger: &mut MigrationLedger,
    ) -> Result<u64> {
        for &key in keys {
            self.check_key(key)?;
        }
        let mut bytes = 0;
        for &key in keys {
            bytes += self.migrate(key, phase, step, ledger)?;
        }
        Ok(bytes)
    }

    /// Make `sets[layer]` the pinned experts of each layer.
    ///
    /// Previously pinned experts outside the new sets are unpinned but stay
    /// resident until the next eviction. Keys already on the device cost nothing.
    pub fn pin_draft_experts(
        &mut self,
        sets: &[Vec<usize>],
        phase: Phase,
        step: usize,
        ledger: &mut MigrationLedger,
    ) -> Result<u64> {
        if sets.len() != self.location.len() {
            return Err(Error::Domain(format!(
                "pin sets cover {} layers, residency has {}",
                sets.len(),
                self.location.len()
            )));
        }
        for (layer, set) in sets.iter().enumerate() {
            for &expert in set {
                self.check_key(ExpertKey::new(layer, expert))?;
            }
        }
        for (layer, set) in sets.iter().enumerate() {
            for (expert, pin) in self.pinned[layer].iter_mut().enumerate() {
                *pin = set.contains(&expert);
            }
        }
        let mut bytes = 0;
        for (layer, set) in sets.iter().enumerate() {
            for &expert in set {
                bytes += self.migrate(ExpertKey::new(layer, expert), phase, step, ledger)?;
            }
        }
        Ok(bytes)
    }

    /// Drop every unpinned expert from the device back to its home tier.
    pub fn evict_transients(&mut self) {
        for (loc, pin) in self.location.iter_mut().zip(&self.pinned) {
            for (l, &p) in loc.iter_mut().zip(pin) {
                if *l == Tier::Device && !p {
                    *l = self.home;
                    self.device_bytes -= self.bytes_per_expert;
                }
            }
        }
    }
}

/// Modeled latency of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub compute_s: f64,
    pub migration_s: f64,
    pub total_s: f64,
    pub overlap: bool,
}

impl std::ops::AddAssign for StepTiming {
    fn add_assign(&mut self, rhs: Self) {
        self.compute_s += rhs.compute_s;
        self.migration_s += rhs.migration_s;
        self.total_s += rhs.total_s;
    }
}

/// Linear cost model:
/// `compute = tokens / rate + experts · cost_per_expert`, `migration = bytes / bandwidth`,
/// summed, or overlapped (max) when `overlap` is set.
pub fn step_latency(
    active_tokens: usize,
    distinct_active_experts: usize,
    bytes_migrated: u64,
    tier: &TierConfig,
    overlap: bool,
) -> StepTiming {
    let compute_s = active_tokens as f64 / tier.compute_rate_tokens_per_s
        + distinct_active_experts as f64 * tier.compute_cost_per_active_expert_s;
    let migration_s = bytes_migrated as f64 / tier.migration_bandwidth();
    let total_s = if overlap {
        compute_s.max(migration_s)
    } else {
        compute_s + migration_s
    };
    StepTiming {
        compute_s,
        migration_s,
        total_s,
        overlap,
    }
}
