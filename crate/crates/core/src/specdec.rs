//! Self-drafting speculative decoding.
//!
//! The draft model is the target model restricted to N pinned experts per MoE
//! layer, with off-draft gate picks remapped onto the nearest draft expert.
//! Each round:
//!
//! 1. **speculate**: every sequence drafts γ tokens using only pinned experts,
//!    so no expert crosses the link;
//! 2. **verify**: the target model scores all γ+1 positions of every sequence;
//!    the experts they need are migrated once, as one coalesced request for the
//!    whole batch;
//! 3. **accept**: the longest agreeing prefix is kept plus one corrected (or
//!    bonus) token;
//! 4. **replace**: the verification's hottest experts become the next draft set.
//!    They were just migrated, so pinning them is free.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::warmup_hotness;
use crate::drafting::{
    build_affinity_table, select_draft_experts, DraftPolicy, DraftState, HotnessCounter,
};
use crate::error::{Error, Result};
use crate::memsim::{
    step_latency, ExpertKey, MigrationLedger, Phase, Residency, StepTiming, TierConfig,
};
use crate::model::{
    forward_range, Decoder, greedy_next, probabilities, sample_from_probs, ExpertRestriction,
    ModelWeights, RemapStrategy, Token, TokenActivation,
};
use crate::run::{
    push_trace, raw_keys, routed_keys, validate_prompts, DecodeMode, DecodeRun, RunMetrics,
    Sequence,
};

pub const DEFAULT_GAMMA: usize = 10;
pub const DEFAULT_N_DRAFT: usize = 4;
pub const DEFAULT_WARMUP_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    /// Draft tokens per speculation phase.
    pub gamma: usize,
    pub mode: DecodeMode,
    pub batch: usize,
    pub max_new_tokens: usize,
    /// Seeds the sampling stream and the random draft policy.
    pub seed: u64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            mode: DecodeMode::Greedy,
            batch: 1,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 {
            return Err(Error::config("gamma >= 1 (gamma)"));
        }
        if self.batch < 1 {
            return Err(Error::config("B >= 1 (batch)"));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::config("max_new_tokens >= 1"));
        }
        self.mode.validate()
    }
}

/// How off-draft gate picks are substituted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapKind {
    Affinity,
    Random,
}

impl RemapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RemapKind::Affinity => "affinity",
            RemapKind::Random => "random",
        }
    }
}

impl std::str::FromStr for RemapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affinity" => Ok(RemapKind::Affinity),
            "random" => Ok(RemapKind::Random),
            other => Err(Error::config(format!("unknown remap `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftConfig {
    pub policy: DraftPolicy,
    /// Draft experts pinned per MoE layer (N).
    pub n_draft: usize,
    pub remap: RemapKind,
    /// Greedy on-demand steps profiled before the hot-global set is frozen.
    pub warmup_steps: usize,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            policy: DraftPolicy::HotTemporal,
            n_draft: DEFAULT_N_DRAFT,
            remap: RemapKind::Affinity,
            warmup_steps: DEFAULT_WARMUP_STEPS,
        }
    }
}

/// Draft tokens for one sequence.
#[derive(Debug, Clone)]
pub struct Drafts {
    pub tokens: Vec<Token>,
    /// Draft distribution at each position (sampling mode only), post-remap.
    pub q: Option<Vec<Vec<f64>>>,
    /// Per draft step, the tokens the draft model processed in that step.
    pub processed: Vec<Vec<TokenActivation>>,
}

/// Autoregressively draft `gamma` tokens with the restricted model.
///
/// `frontier` is the first position the draft model has not yet processed;
/// it only affects which activations are reported in `processed`.
pub fn speculate<R: Rng + ?Sized>(
    weights: &ModelWeights,
    restriction: &ExpertRestriction<'_>,
    prefix: &[Token],
    frontier: usize,
    gamma: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Drafts> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let frontier = frontier.min(prefix.len() - 1);
    let mut decoder = Decoder::new(weights, Some(restriction))?;
    let mut first = Vec::new();
    for &t in prefix {
        let act = decoder.push(t)?;
        if act.position >= frontier {
            first.push(act);
        }
    }
    let mut tokens = Vec::with_capacity(gamma);
    let mut q = matches!(mode, DecodeMode::Sampling { .. }).then(Vec::new);
    let mut processed = Vec::with_capacity(gamma);
    processed.push(first);
    for i in 0..gamma {
        let logits = decoder.logits();
        let token = match mode {
            DecodeMode::Greedy => greedy_next(&logits),
            DecodeMode::Sampling { temperature } => {
                let probs = probabilities(&logits, temperature)?;
                let t = sample_from_probs(&probs, rng)?;
                q.as_mut().expect("sampling keeps q").push(probs);
                t
            }
        };
        tokens.push(token);
        // the last draft is never fed back through the draft model
        if i + 1 < gamma {
            processed.push(vec![decoder.push(token)?]);
        }
    }
    Ok(Drafts {
        tokens,
        q,
        processed,
    })
}

/// Greedy acceptance given target logits for the γ+1 positions ending each
/// prefix `prefix + drafts[..i]`, i = 0..=γ.
///
/// Returns `(accepted, corrected)`; when every draft matches, `corrected` is the bonus token.
pub fn accept_greedy(target_logits: &[Vec<f64>], drafts: &[Token]) -> Result<(usize, Token)> {
    if target_logits.len() != drafts.len() + 1 {
        return Err(Error::Domain(format!(
            "need {} target logit rows, got {}",
            drafts.len() + 1,
            target_logits.len()
        )));
    }
    let accepted = drafts
        .iter()
        .zip(target_logits)
        .take_while(|(&d, logits)| greedy_next(logits) == d)
        .count();
    Ok((accepted, greedy_next(&target_logits[accepted])))
}

/// Target-model verification of `drafts` under greedy decoding.
pub fn verify_greedy(weights: &ModelWeights, prefix: &[Token], drafts: &[Token]) -> Result<(usize, Token)> {
    let logits = target_logits(weights, prefix, drafts)?;
    accept_greedy(&logits, drafts)
}

/// Speculative-sampling acceptance.
///
/// Draft `i` is kept with probability `min(1, p_i(x) / q_i(x))`. At the first
/// rejection the output is drawn from `normalize(max(0, p_i − q_i))`; if all
/// drafts survive, a bonus token is drawn from `p_γ`. The emitted tokens are
/// distributed exactly as target-model samples.
pub fn accept_sampling<R: Rng + ?Sized>(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    drafts: &[Token],
    rng: &mut R,
) -> Result<(usize, Token)> {
    if p.len() != drafts.len() + 1 || q.len() != drafts.len() {
        return Err(Error::Domain("distribution count does not match drafts".into()));
    }
    for (i, &x) in drafts.iter().enumerate() {
        let (pi, qi) = (p[i][x], q[i][x]);
        if qi <= 0.0 {
            return Err(Error::InvariantBreach(format!(
                "draft token {x} at position {i} has zero draft probability"
            )));
        }
        let u: f64 = rng.random();
        if u < (pi / qi).min(1.0) {
            continue;
        }
        let residual: Vec<f64> = p[i].iter().zip(&q[i]).map(|(a, b)| (a - b).max(0.0)).collect();
        let token = if residual.iter().sum::<f64>() > 0.0 {
            sample_from_probs(&residual, rng)?
        } else {
            sample_from_probs(&p[i], rng)?
        };
        return Ok((i, token));
    }
    Ok((drafts.len(), sample_from_probs(&p[drafts.len()], rng)?))
}

/// Target-model verification of `drafts` under speculative sampling.
pub fn verify_sampling<R: Rng + ?Sized>(
    weights: &ModelWeights,
    prefix: &[Token],
    drafts: &[Token],
    q: &[Vec<f64>],
    temperature: f64,
    rng: &mut R,
) -> Result<(usize, Token)> {
    let p = target_logits(weights, prefix, drafts)?
        .iter()
        .map(|l| probabilities(l, temperature))
        .collect::<Result<Vec<_>>>()?;
    accept_sampling(&p, q, drafts, rng)
}

fn target_logits(weights: &ModelWeights, prefix: &[Token], drafts: &[Token]) -> Result<Vec<Vec<f64>>> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(drafts);
    Ok(forward_range(weights, &seq, prefix.len() - 1, None)?.logits)
}

/// Expected speedup `τ / (γ·c + 1)`.
pub fn speedup_eq1(tau: f64, gamma: usize, c: f64) -> Result<f64> {
    speedup_eq2(tau, gamma, c, 1.0)
}

/// Expected batched speedup `τ / (γ·c + λ)`.
pub fn speedup_eq2(tau: f64, gamma: usize, c: f64, lambda: f64) -> Result<f64> {
    if gamma < 1 {
        return Err(Error::Domain("gamma must be >= 1".into()));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("c must be >= 0, got {c}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    if !(1.0..=(gamma + 1) as f64).contains(&tau) {
        return Err(Error::Domain(format!("tau {tau} outside [1, {}]", gamma + 1)));
    }
    Ok(tau / (gamma as f64 * c + lambda))
}

/// λ: verification latency over B·γ draft positions relative to one batched
/// target step over B positions, aggregated over every round of the run.
pub fn measure_lambda(metrics: &RunMetrics) -> Result<f64> {
    if metrics.steps == 0 || metrics.lambda_single_s <= 0.0 {
        return Err(Error::Domain("no speculative rounds to measure lambda from".into()));
    }
    Ok(metrics.lambda_verify_s / metrics.lambda_single_s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub sequence: usize,
    pub drafts: Vec<Token>,
    pub accepted: usize,
    /// Corrected token, or the bonus token when every draft was accepted.
    pub token: Token,
    /// `accepted + 1`, before truncation.
    pub tokens_generated: usize,
}

/// One speculative round across the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub round: usize,
    pub sequences: Vec<SequenceOutcome>,
    pub speculation_bytes: u64,
    pub verification_bytes: u64,
    /// Bytes migrated by re-pinning the draft experts after this verification.
    pub replacement_bytes: u64,
    pub speculation: StepTiming,
    pub verification: StepTiming,
}

#[derive(Debug, Clone)]
pub struct SpecRun {
    pub run: DecodeRun,
    pub rounds: Vec<StepOutcome>,
    /// Draft sets in force during each round.
    pub draft_history: Vec<Vec<Vec<usize>>>,
}

impl SpecRun {
    pub fn outputs(&self) -> &[Vec<Token>] {
        &self.run.outputs
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.run.metrics
    }
}

/// Run self-drafting speculative decoding over a batch of prompts (B = `prompts.len()`).
pub fn run_specmoe(
    weights: &ModelWeights,
    spec: &SpecConfig,
    draft: &DraftConfig,
    tier: &TierConfig,
    prompts: &[Vec<Token>],
) -> Result<SpecRun> {
    spec.validate()?;
    let mspec = &weights.spec;
    let layers = mspec.num_moe_layers();
    let experts = mspec.experts_per_block;
    if draft.n_draft < mspec.top_k || draft.n_draft > experts {
        return Err(Error::config(format!(
            "K <= N <= E violated: K = {}, N = {}, E = {experts}",
            mspec.top_k, draft.n_draft
        )));
    }
    tier.validate(layers, draft.n_draft)?;
    validate_prompts(prompts, mspec.vocab_size)?;

    let affinity = build_affinity_table(weights);
    let remap = match draft.remap {
        RemapKind::Affinity => RemapStrategy::Affinity(&affinity),
        RemapKind::Random => RemapStrategy::Random {
            seed: spec.seed ^ 0x005e_ed0f_4e4a_9a1d,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut residency = Residency::new(layers, experts, tier);
    let mut ledger = MigrationLedger::new();
    let mut hotness = HotnessCounter::new(layers, experts);
    let mut trace = Vec::new();
    let mut metrics = RunMetrics::default();
    let mut seqs = prompts.iter().map(|p| Sequence::new(p)).collect::<Result<Vec<_>>>()?;

    let warmup = match draft.policy {
        DraftPolicy::HotGlobal => {
            let (counter, bytes) = warmup_hotness(weights, prompts, tier, draft.warmup_steps.max(1))?;
            metrics.warmup_bytes = bytes;
            Some(counter)
        }
        _ => None,
    };

    // Prefill: one target step over every prompt, then the first draft set.
    let mut phase_counter = HotnessCounter::new(layers, experts);
    let mut prefill_tokens = Vec::new();
    let mut first_tokens = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let mut decoder = Decoder::new(weights, None)?;
        let acts = seq.tokens.iter().map(|&t| decoder.push(t)).collect::<Result<Vec<_>>>()?;
        let logits = decoder.logits();
        let token = match spec.mode {
            DecodeMode::Greedy => greedy_next(&logits),
            DecodeMode::Sampling { temperature } => {
                sample_from_probs(&probabilities(&logits, temperature)?, &mut rng)?
            }
        };
        first_tokens.push(token);
        for tok in &acts {
            push_trace(&mut trace, 0, i, tok);
        }
        prefill_tokens.extend(acts);
        targets.push(decoder);
    }
    let needed = raw_keys(&prefill_tokens);
    let bytes = residency.ensure_resident(&needed, Phase::Verification, 0, &mut ledger)?;
    phase_counter.record_activations(&prefill_tokens);
    hotness.record_activations(&prefill_tokens);
    metrics.prefill = step_latency(prefill_tokens.len(), needed.len(), bytes, tier, false);

    let mut state = DraftState::new(draft.policy, draft.n_draft, layers);
    let selection_counter = warmup.as_ref().unwrap_or(&phase_counter);
    state.sets = select_draft_experts(draft.policy, selection_counter, &state, &mut rng)?;
    metrics.initial_pin_bytes =
        residency.pin_draft_experts(&state.sets, Phase::Verification, 0, &mut ledger)?;
    residency.evict_transients();

    for (seq, token) in seqs.iter_mut().zip(first_tokens) {
        seq.target_frontier = seq.tokens.len();
        seq.tokens.push(token);
        seq.clamp(spec.max_new_tokens);
    }

    let mut rounds = Vec::new();
    let mut draft_history = Vec::new();
    let mut tau_sum = 0usize;
    let mut tau_count = 0usize;
    let mut round = 0;
    while seqs.iter().any(|s| !s.done) {
        round += 1;
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].done).collect();
        check_draft_resident(&residency, &state)?;
        let restriction = ExpertRestriction {
            allowed: &state.sets,
            remap,
        };

        // speculation
        let before = ledger.total();
        let mut drafts = Vec::with_capacity(active.len());
        for &i in &active {
            let s = &seqs[i];
            drafts.push(speculate(
                weights,
                &restriction,
                &s.tokens,
                s.draft_frontier,
                spec.gamma,
                spec.mode,
                &mut rng,
            )?);
        }
        let mut speculation = StepTiming::default();
        for step in 0..spec.gamma {
            let processed: Vec<&TokenActivation> =
                drafts.iter().flat_map(|d| &d.processed[step]).collect();
            let ran = routed_keys(processed.iter().copied());
            if let Some(key) = ran.iter().find(|&&k| !residency.is_pinned(k)) {
                return Err(Error::InvariantBreach(format!(
                    "draft model used non-pinned expert {key:?}"
                )));
            }
            speculation += step_latency(processed.len(), ran.len(), 0, tier, false);
        }
        let speculation_bytes = ledger.total() - before;
        if speculation_bytes != 0 {
            return Err(Error::InvariantBreach("speculation migrated experts".into()));
        }

        // verification: one coalesced migration for every position of every sequence
        // `snapshots[j][a]` is the target state with `a` drafts of sequence j committed.
        let mut logits = Vec::with_capacity(active.len());
        let mut snapshots = Vec::with_capacity(active.len());
        let mut verified: Vec<TokenActivation> = Vec::new();
        let mut draft_positions: Vec<TokenActivation> = Vec::new();
        let mut first_draft_positions: Vec<TokenActivation> = Vec::new();
        for (&i, d) in active.iter().zip(&drafts) {
            let s = &seqs[i];
            let len = s.tokens.len();
            let mut probe = targets[i].clone();
            debug_assert_eq!(probe.len(), s.target_frontier);
            let mut rows = Vec::with_capacity(spec.gamma + 1);
            let mut snaps = Vec::with_capacity(spec.gamma + 1);
            for &t in s.tokens[probe.len()..].iter().chain(&d.tokens) {
                let tok = probe.push(t)?;
                if tok.position + 1 >= len {
                    rows.push(probe.logits());
                    snaps.push(probe.clone());
                }
                push_trace(&mut trace, round, i, &tok);
                if tok.position >= len {
                    draft_positions.push(tok.clone());
                }
                if tok.position == len {
                    first_draft_positions.push(tok.clone());
                }
                verified.push(tok);
            }
            logits.push(rows);
            snapshots.push(snaps);
        }
        let needed = raw_keys(&verified);
        let verification_bytes =
            residency.ensure_resident(&needed, Phase::Verification, round, &mut ledger)?;
        let verification = step_latency(verified.len(), needed.len(), verification_bytes, tier, false);

        // λ bookkeeping: B·γ draft positions versus the B first-draft positions
        let pinned = residency.pinned_keys();
        let lambda_cost = |toks: &[TokenActivation]| {
            let keys = raw_keys(toks);
            let missing = keys.difference(&pinned).count() as u64;
            step_latency(toks.len(), keys.len(), missing * tier.bytes_per_expert, tier, false).total_s
        };
        metrics.lambda_verify_s += lambda_cost(&draft_positions);
        metrics.lambda_single_s += lambda_cost(&first_draft_positions);

        // acceptance
        let mut sequences = Vec::with_capacity(active.len());
        for ((&i, d), rows) in active.iter().zip(&drafts).zip(&logits) {
            let (accepted, token) = match spec.mode {
                DecodeMode::Greedy => accept_greedy(rows, &d.tokens)?,
                DecodeMode::Sampling { temperature } => {
                    let p = rows
                        .iter()
                        .map(|l| probabilities(l, temperature))
                        .collect::<Result<Vec<_>>>()?;
                    let q = d.q.as_ref().expect("sampling drafts carry q");
                    accept_sampling(&p, q, &d.tokens, &mut rng)?
                }
            };
            sequences.push(SequenceOutcome {
                sequence: i,
                drafts: d.tokens.clone(),
                accepted,
                token,
                tokens_generated: accepted + 1,
            });
        }

        // draft-expert replacement from this verification's hotness
        phase_counter.clear();
        phase_counter.record_activations(&verified);
        hotness.record_activations(&verified);
        draft_history.push(state.sets.clone());
        state.sets = select_draft_experts(draft.policy, &phase_counter, &state, &mut rng)?;
        let replacement_bytes =
            residency.pin_draft_experts(&state.sets, Phase::Verification, round, &mut ledger)?;
        residency.evict_transients();

        for ((outcome, d), mut snaps) in sequences.iter().zip(&drafts).zip(snapshots) {
            targets[outcome.sequence] = snaps.swap_remove(outcome.accepted);
            let s = &mut seqs[outcome.sequence];
            let len = s.tokens.len();
            s.tokens.extend_from_slice(&d.tokens[..outcome.accepted]);
            s.tokens.push(outcome.token);
            s.target_frontier = len + outcome.accepted;
            s.draft_frontier = (len + spec.gamma - 1).min(len + outcome.accepted);
            s.clamp(spec.max_new_tokens);
            tau_sum += outcome.tokens_generated;
            tau_count += 1;
        }

        metrics.speculation += speculation;
        metrics.verification += verification;
        rounds.push(StepOutcome {
            round,
            sequences,
            speculation_bytes,
            verification_bytes,
            replacement_bytes,
            speculation,
            verification,
        });
    }

    metrics.steps = rounds.len();
    metrics.tau = if tau_count > 0 {
        tau_sum as f64 / tau_count as f64
    } else {
        1.0
    };
    metrics.tokens_generated = seqs.iter().map(Sequence::generated).sum();
    metrics.ledger = ledger.snapshot();

    Ok(SpecRun {
        run: DecodeRun {
            outputs: seqs.iter().map(Sequence::output).collect(),
            metrics,
            ledger,
            hotness,
            trace,
        },
        rounds,
        draft_history,
    })
}

fn check_draft_resident(residency: &Residency, state: &DraftState) -> Result<()> {
    let missing: BTreeSet<ExpertKey> = state
        .sets
        .iter()
        .enumerate()
        .flat_map(|(l, set)| set.iter().map(move |&e| ExpertKey::new(l, e)))
        .filter(|&k| !(residency.is_resident(k) && residency.is_pinned(k)))
        .collect();
    if let Some(k) = missing.first() {
        return Err(Error::InvariantBreach(format!(
            "draft expert {k:?} is not pinned on the device"
        )));
    }
    Ok(())
}
