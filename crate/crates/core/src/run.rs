//! Types shared by every decoding engine: decode mode, per-run metrics and the
//! bookkeeping for sequences that advance through a batch.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::drafting::HotnessCounter;
use crate::error::{Error, Result};
use crate::memsim::{ExpertKey, LedgerSnapshot, MigrationLedger, StepTiming};
use crate::model::{Token, TokenActivation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sampling { temperature: f64 },
}

impl DecodeMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeMode::Sampling { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::config("temperature must be > 0 in sampling mode"))
            }
            _ => Ok(()),
        }
    }
}

/// Target-model routing of one token in one MoE layer, as written to trace files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sequence: usize,
    pub layer: usize,
    pub experts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Tokens emitted across the batch, after truncation to `max_new_tokens`.
    pub tokens_generated: usize,
    /// Target steps (baselines) or speculative rounds (excluding the prefill step).
    pub steps: usize,
    /// Mean tokens produced per (speculative round, sequence), before truncation.
    /// Exactly 1 for the baselines.
    pub tau: f64,
    pub ledger: LedgerSnapshot,
    pub prefill: StepTiming,
    pub speculation: StepTiming,
    pub verification: StepTiming,
    /// Baseline decode steps.
    pub decode: StepTiming,
    /// Bytes of the first pinning (draft set or expert cache); part of the ledger.
    pub initial_pin_bytes: u64,
    /// Bytes of warmup profiling; never part of the ledger.
    pub warmup_bytes: u64,
    /// Modeled latency of verifying the B·γ draft positions, summed over rounds.
    pub lambda_verify_s: f64,
    /// Modeled latency of one batched target step over B tokens, summed over rounds.
    pub lambda_single_s: f64,
}

impl RunMetrics {
    pub fn total_time_s(&self) -> f64 {
        self.prefill.total_s + self.speculation.total_s + self.verification.total_s + self.decode.total_s
    }

    /// Tokens per modeled second.
    pub fn tokens_per_sec(&self) -> f64 {
        let t = self.total_time_s();
        if t > 0.0 {
            self.tokens_generated as f64 / t
        } else {
            0.0
        }
    }

    /// Draft-to-target latency ratio c: mean draft step over mean single target step.
    pub fn measured_c(&self, gamma: usize) -> Option<f64> {
        if self.steps == 0 || gamma == 0 || self.lambda_single_s <= 0.0 {
            return None;
        }
        let draft = self.speculation.total_s / (self.steps * gamma) as f64;
        let target = self.lambda_single_s / self.steps as f64;
        Some(draft / target)
    }
}

/// Output of a decoding run.
#[derive(Debug, Clone)]
pub struct DecodeRun {
    /// Generated tokens (prompt excluded) per sequence.
    pub outputs: Vec<Vec<Token>>,
    pub metrics: RunMetrics,
    pub ledger: MigrationLedger,
    /// Raw routing of all target-model tokens, accumulated over the run.
    pub hotness: HotnessCounter,
    pub trace: Vec<TraceRow>,
}

/// One sequence of a batch.
#[derive(Debug, Clone)]
pub(crate) struct Sequence {
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
    /// Positions below this have already been processed by the target model.
    pub target_frontier: usize,
    /// Same, for the draft model.
    pub draft_frontier: usize,
    pub done: bool,
}

impl Sequence {
    pub fn new(prompt: &[Token]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        Ok(Self {
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            target_frontier: 0,
            draft_frontier: 0,
            done: false,
        })
    }

    pub fn generated(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Mark done once `max_new` tokens exist, discarding overshoot.
    pub fn clamp(&mut self, max_new: usize) {
        if self.generated() >= max_new {
            self.tokens.truncate(self.prompt_len + max_new);
            self.done = true;
        }
    }

    pub fn output(&self) -> Vec<Token> {
        self.tokens[self.prompt_len..].to_vec()
    }
}

pub(crate) fn validate_prompts(prompts: &[Vec<Token>], vocab: usize) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::config("batch must contain at least one prompt"));
    }
    for p in prompts {
        if p.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        if let Some(&token) = p.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
    }
    Ok(())
}

/// Union of raw gate picks over the given tokens.
pub(crate) fn raw_keys<'a>(tokens: impl IntoIterator<Item = &'a TokenActivation>) -> BTreeSet<ExpertKey> {
    let mut keys = BTreeSet::new();
    for t in tokens {
        for (layer, picks) in t.raw.iter().enumerate() {
            keys.extend(picks.iter().map(|&e| ExpertKey::new(layer, e)));
        }
    }
    keys
}

/// Union of the experts that actually ran over the given tokens.
pub(crate) fn routed_keys<'a>(tokens: impl IntoIterator<Item = &'a TokenActivation>) -> BTreeSet<ExpertKey> {
    let mut keys = BTreeSet::new();
    for t in tokens {
        for (layer, picks) in t.routed.iter().enumerate() {
            keys.extend(picks.iter().map(|&e| ExpertKey::new(layer, e)));
        }
    }
    keys
}

pub(crate) fn push_trace(trace: &mut Vec<TraceRow>, step: usize, sequence: usize, tok: &TokenActivation) {
    for (layer, picks) in tok.raw.iter().enumerate() {
        trace.push(TraceRow {
            step,
            sequence,
            layer,
            experts: picks.clone(),
        });
    }
}
