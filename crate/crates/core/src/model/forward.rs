use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{route_topk, softmax};
use super::weights::{FfnBlock, ModelWeights};
use super::Token;
use crate::drafting::{nearest_draft_expert, AffinityTable};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// How a gate pick outside the allowed set is substituted.
#[derive(Debug, Clone, Copy)]
pub enum RemapStrategy<'a> {
    /// Closest allowed expert by weight-space L2 distance.
    Affinity(&'a AffinityTable),
    /// A uniformly random allowed expert. The draw is a pure function of
    /// (seed, layer, position, raw pick), so repeated passes over the same
    /// prefix remap identically.
    Random { seed: u64 },
}

/// Draft-model semantics for a forward pass: per MoE layer, the experts that may run.
#[derive(Debug, Clone, Copy)]
pub struct ExpertRestriction<'a> {
    pub allowed: &'a [Vec<usize>],
    pub remap: RemapStrategy<'a>,
}

/// Routing of one token through every MoE layer (outer index: MoE-layer ordinal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenActivation {
    pub position: usize,
    /// Gate top-K, before any remap.
    pub raw: Vec<Vec<usize>>,
    /// Experts that actually ran.
    pub routed: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub tokens: Vec<TokenActivation>,
}

impl ActivationRecord {
    /// Rows for positions `>= start`.
    pub fn from_position(&self, start: usize) -> impl Iterator<Item = &TokenActivation> {
        self.tokens.iter().filter(move |t| t.position >= start)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// First position that has logits.
    pub start: usize,
    /// `logits[i]` predicts the token after position `start + i`.
    pub logits: Vec<Vec<f64>>,
    /// Routing for every position of the prefix.
    pub activations: ActivationRecord,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.last().expect("forward always yields logits")
    }

    pub fn logits_at(&self, position: usize) -> &[f64] {
        &self.logits[position - self.start]
    }
}

/// Next-token logits after `prefix`, plus routing for every prefix token.
///
/// With `restriction = None` this is the target model. With a restriction,
/// gate picks outside the allowed set are substituted (draft model); each
/// substitute keeps the gate weight of the pick it replaces.
pub fn forward(
    weights: &ModelWeights,
    prefix: &[Token],
    restriction: Option<&ExpertRestriction<'_>>,
) -> Result<ForwardOutput> {
    let start = prefix.len().saturating_sub(1);
    forward_range(weights, prefix, start, restriction)
}

/// Like [`forward`] but returns logits for every position from `start` on.
///
/// The model is causal: logits at position `p` depend only on `prefix[..=p]`
/// and are bit-identical to those of `forward(&prefix[..=p])`.
pub fn forward_range(
    weights: &ModelWeights,
    prefix: &[Token],
    start: usize,
    restriction: Option<&ExpertRestriction<'_>>,
) -> Result<ForwardOutput> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    if start >= prefix.len() {
        return Err(Error::Domain(format!(
            "logit start {start} beyond prefix of length {}",
            prefix.len()
        )));
    }
    let vocab = weights.spec.vocab_size;
    if let Some(&token) = prefix.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let mut decoder = Decoder::new(weights, restriction)?;
    let mut logits = Vec::with_capacity(prefix.len() - start);
    let mut tokens = Vec::with_capacity(prefix.len());
    for (position, &token) in prefix.iter().enumerate() {
        let act = decoder.push(token)?;
        if position >= start {
            logits.push(decoder.logits());
        }
        tokens.push(act);
    }
    Ok(ForwardOutput {
        start,
        logits,
        activations: ActivationRecord { tokens },
    })
}

/// Token-at-a-time forward pass.
///
/// Keeps each layer's causal mixing sum, so appending a position costs the
/// same regardless of prefix length. Feeding a prefix through [`Decoder::push`]
/// performs exactly the floating-point operations of [`forward_range`].
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    weights: &'a ModelWeights,
    restriction: Option<ExpertRestriction<'a>>,
    running: Vec<Vec<f64>>,
    state: Vec<f64>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(weights: &'a ModelWeights, restriction: Option<&ExpertRestriction<'a>>) -> Result<Self> {
        let spec = &weights.spec;
        if let Some(r) = restriction {
            if r.allowed.len() != spec.num_moe_layers() {
                return Err(Error::Domain(format!(
                    "restriction covers {} MoE layers, model has {}",
                    r.allowed.len(),
                    spec.num_moe_layers()
                )));
            }
            for (layer, set) in r.allowed.iter().enumerate() {
                if set.len() < spec.top_k {
                    return Err(Error::RestrictedSetTooSmall {
                        layer,
                        size: set.len(),
                        k: spec.top_k,
                    });
                }
            }
        }
        Ok(Self {
            weights,
            restriction: restriction.copied(),
            running: vec![vec![0.0; spec.hidden_dim]; weights.layers.len()],
            state: Vec::new(),
            len: 0,
        })
    }

    /// Positions processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Run the next token through every layer and return its routing.
    pub fn push(&mut self, token: Token) -> Result<TokenActivation> {
        let weights = self.weights;
        let spec = &weights.spec;
        if token >= spec.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: spec.vocab_size,
            });
        }
        let position = self.len;
        let count = (position + 1) as f64;
        let mut state = weights.embeddings.row(token).to_vec();
        let mut act = TokenActivation {
            position,
            raw: Vec::new(),
            routed: Vec::new(),
        };
        let mut moe_ordinal = 0;
        for (layer, running) in weights.layers.iter().zip(&mut self.running) {
            // causal mean-mixing in place of attention
            for (acc, v) in running.iter_mut().zip(rms_norm(&state)) {
                *acc += v;
            }
            let context: Vec<f64> = running.iter().map(|v| v / count).collect();
            for (s, m) in state.iter_mut().zip(layer.mixing.left_mul(&context)) {
                *s += m;
            }

            match &layer.ffn {
                FfnBlock::Dense(ffn) => {
                    let out = ffn.apply(&rms_norm(&state));
                    add_scaled(&mut state, &out, 1.0);
                }
                FfnBlock::Moe(block) => {
                    let x = rms_norm(&state);
                    let mut gate_logits = block.gate.left_mul(&x);
                    for (g, b) in gate_logits.iter_mut().zip(&block.gate_bias) {
                        *g += b;
                    }
                    let gate_probs = softmax(&gate_logits)?;
                    let raw = route_topk(&gate_logits, spec.top_k)?;
                    let routed = match &self.restriction {
                        None => raw.clone(),
                        Some(r) => remap_picks(&raw, &r.allowed[moe_ordinal], r.remap, moe_ordinal, position)?,
                    };
                    for (&pick, &expert) in raw.iter().zip(&routed) {
                        let out = block.experts[expert].apply(&x);
                        add_scaled(&mut state, &out, gate_probs[pick]);
                    }
                    act.raw.push(raw);
                    act.routed.push(routed);
                    moe_ordinal += 1;
                }
            }
        }
        self.state = state;
        self.len += 1;
        Ok(act)
    }

    /// Next-token logits after the last pushed token.
    pub fn logits(&self) -> Vec<f64> {
        assert!(self.len > 0, "logits requested before any token");
        self.weights.head.left_mul(&rms_norm(&self.state))
    }
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().map(|v| v * scale).collect()
}

fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

/// Substitute picks outside `allowed`, keeping K distinct experts per token.
///
/// Picks already inside the allowed set stay in place first; the remaining
/// picks are then substituted in gate order, each excluding experts already taken.
fn remap_picks(
    raw: &[usize],
    allowed: &[usize],
    strategy: RemapStrategy<'_>,
    layer: usize,
    position: usize,
) -> Result<Vec<usize>> {
    let mut routed: Vec<Option<usize>> = raw
        .iter()
        .map(|r| allowed.contains(r).then_some(*r))
        .collect();
    let mut taken: Vec<usize> = routed.iter().flatten().copied().collect();
    for (slot, &pick) in routed.iter_mut().zip(raw) {
        if slot.is_some() {
            continue;
        }
        let substitute = match strategy {
            RemapStrategy::Affinity(table) => {
                nearest_draft_expert(table, layer, pick, allowed, &taken)?
            }
            RemapStrategy::Random { seed } => {
                let candidates: Vec<usize> = allowed
                    .iter()
                    .copied()
                    .filter(|e| !taken.contains(e))
                    .collect();
                if candidates.is_empty() {
                    return Err(Error::NoCandidate { layer });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(remap_stream(seed, layer, position, pick));
                candidates[rng.random_range(0..candidates.len())]
            }
        };
        *slot = Some(substitute);
        taken.push(substitute);
    }
    Ok(routed.into_iter().map(|s| s.expect("every slot filled")).collect())
}

fn remap_stream(seed: u64, layer: usize, position: usize, pick: usize) -> u64 {
    [layer, position, pick].iter().fold(seed, |h, &v| {
        h.rotate_left(21) ^ (v as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    })
}
