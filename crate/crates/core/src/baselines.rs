//! Comparison systems: on-demand fetching, oracle overlap and static expert caching.
//!
//! All three decode one token per target step and differ only in memory policy
//! and timing, so their token streams are identical for identical inputs.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafting::HotnessCounter;
use crate::error::{Error, Result};
use crate::memsim::{step_latency, MigrationLedger, Phase, Residency, TierConfig};
use crate::model::{greedy_next, Decoder, sample_next, ModelWeights, Token, TokenActivation};
use crate::run::{push_trace, raw_keys, validate_prompts, DecodeMode, DecodeRun, RunMetrics, Sequence};

pub const DEFAULT_CACHE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    OnDemand,
    Overlap,
    Caching,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::OnDemand => "ondemand",
            BaselineKind::Overlap => "overlap",
            BaselineKind::Caching => "caching",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Fraction of each layer's experts kept on the device (caching only).
    pub cache_fraction: f64,
    /// On-demand steps profiled to rank experts for the cache.
    pub warmup_steps: usize,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            cache_fraction: DEFAULT_CACHE_FRACTION,
            warmup_steps: crate::specdec::DEFAULT_WARMUP_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BaselineKind::Caching
            && !(self.cache_fraction > 0.0 && self.cache_fraction < 1.0)
        {
            return Err(Error::config("0 < cache_fraction < 1"));
        }
        if self.warmup_steps < 1 {
            return Err(Error::config("warmup_steps >= 1"));
        }
        Ok(())
    }

    /// Experts cached per layer: `ceil(fraction · E)`.
    pub fn cached_per_layer(&self, experts: usize) -> usize {
        ((self.cache_fraction * experts as f64).ceil() as usize).min(experts)
    }
}

/// One target forward per token; each step migrates its experts (coalesced
/// across the batch) and flushes them afterwards.
pub fn run_ondemand(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    mode: DecodeMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<DecodeRun> {
    decode_loop(weights, prompts, tier, mode, max_new_tokens, seed, false, None)
}

/// Same tokens and ledger as [`run_ondemand`], but every step costs
/// `max(compute, migration)`: perfect prefetching as an upper bound.
pub fn run_overlap(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    mode: DecodeMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<DecodeRun> {
    decode_loop(weights, prompts, tier, mode, max_new_tokens, seed, true, None)
}

/// On-demand decoding with the hottest `ceil(fraction · E)` experts per layer
/// pinned for the whole run. Hotness comes from a greedy warmup over the same
/// prompts; warmup traffic is reported in `warmup_bytes`, outside the ledger.
pub fn run_caching(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    config: &BaselineConfig,
    mode: DecodeMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<DecodeRun> {
    config.validate()?;
    let spec = &weights.spec;
    let per_layer = config.cached_per_layer(spec.experts_per_block);
    tier.validate(spec.num_moe_layers(), per_layer)?;
    let (counter, warmup_bytes) = warmup_hotness(weights, prompts, tier, config.warmup_steps)?;
    let cache: Vec<Vec<usize>> = (0..counter.num_layers())
        .map(|l| {
            let mut top = counter.top_experts(l, per_layer);
            top.sort_unstable();
            top
        })
        .collect();
    let mut run = decode_loop(weights, prompts, tier, mode, max_new_tokens, seed, false, Some(&cache))?;
    run.metrics.warmup_bytes = warmup_bytes;
    Ok(run)
}

/// Dispatch on `config.kind`.
pub fn run_baseline(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    config: &BaselineConfig,
    mode: DecodeMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<DecodeRun> {
    config.validate()?;
    match config.kind {
        BaselineKind::OnDemand => run_ondemand(weights, prompts, tier, mode, max_new_tokens, seed),
        BaselineKind::Overlap => run_overlap(weights, prompts, tier, mode, max_new_tokens, seed),
        BaselineKind::Caching => {
            run_caching(weights, prompts, tier, config, mode, max_new_tokens, seed)
        }
    }
}

/// Expert hotness over `steps` greedy on-demand steps on `prompts`, and the
/// bytes that profiling run migrated.
pub fn warmup_hotness(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    steps: usize,
) -> Result<(HotnessCounter, u64)> {
    let run = decode_loop(weights, prompts, tier, DecodeMode::Greedy, steps, 0, false, None)?;
    Ok((run.hotness, run.metrics.ledger.total_bytes))
}

#[allow(clippy::too_many_arguments)]
fn decode_loop(
    weights: &ModelWeights,
    prompts: &[Vec<Token>],
    tier: &TierConfig,
    mode: DecodeMode,
    max_new_tokens: usize,
    seed: u64,
    overlap: bool,
    cache: Option<&[Vec<usize>]>,
) -> Result<DecodeRun> {
    let spec = &weights.spec;
    mode.validate()?;
    if max_new_tokens < 1 {
        return Err(Error::config("max_new_tokens >= 1"));
    }
    validate_prompts(prompts, spec.vocab_size)?;
    let layers = spec.num_moe_layers();
    let experts = spec.experts_per_block;
    tier.validate(layers, cache.map_or(0, |c| c.iter().map(Vec::len).max().unwrap_or(0)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residency = Residency::new(layers, experts, tier);
    let mut ledger = MigrationLedger::new();
    let mut hotness = HotnessCounter::new(layers, experts);
    let mut trace = Vec::new();
    let mut metrics = RunMetrics::default();
    let mut seqs = prompts.iter().map(|p| Sequence::new(p)).collect::<Result<Vec<_>>>()?;

    if let Some(sets) = cache {
        metrics.initial_pin_bytes = residency.pin_draft_experts(sets, Phase::BaselineStep, 0, &mut ledger)?;
    }

    let mut decoders = vec![Decoder::new(weights, None)?; seqs.len()];
    let mut step = 0;
    while seqs.iter().any(|s| !s.done) {
        let mut processed: Vec<TokenActivation> = Vec::new();
        let mut next = Vec::new();
        for (i, seq) in seqs.iter().enumerate().filter(|(_, s)| !s.done) {
            let decoder = &mut decoders[i];
            debug_assert_eq!(decoder.len(), seq.target_frontier);
            for &t in &seq.tokens[decoder.len()..] {
                let tok = decoder.push(t)?;
                push_trace(&mut trace, step, i, &tok);
                processed.push(tok);
            }
            let logits = decoder.logits();
            let token = match mode {
                DecodeMode::Greedy => greedy_next(&logits),
                DecodeMode::Sampling { temperature } => sample_next(&logits, temperature, &mut rng)?,
            };
            next.push((i, token));
        }
        let needed = raw_keys(&processed);
        let bytes = residency.ensure_resident(&needed, Phase::BaselineStep, step, &mut ledger)?;
        hotness.record_activations(&processed);
        metrics.decode += step_latency(processed.len(), needed.len(), bytes, tier, overlap);
        residency.evict_transients();

        for (i, token) in next {
            let seq = &mut seqs[i];
            seq.target_frontier = seq.tokens.len();
            seq.tokens.push(token);
            seq.clamp(max_new_tokens);
        }
        step += 1;
    }

    metrics.steps = step;
    metrics.tau = 1.0;
    metrics.tokens_generated = seqs.iter().map(Sequence::generated).sum();
    metrics.ledger = ledger.snapshot();
    metrics.decode.overlap = overlap;
    Ok(DecodeRun {
        outputs: seqs.iter().map(Sequence::output).collect(),
        metrics,
        ledger,
        hotness,
        trace,
    })
}
