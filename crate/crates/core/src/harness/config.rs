//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Keys that accept a list take
//! comma-separated values and form the sweep axes. Unknown keys are rejected;
//! [`KEYS`] lists them all.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineKind, DEFAULT_CACHE_FRACTION};
use crate::drafting::DraftPolicy;
use crate::error::{Error, Result};
use crate::memsim::{
    TierConfig, DEFAULT_COMPUTE_RATE, DEFAULT_DTYPE_BYTES, DEFAULT_EXPERT_COST_S,
    DEFAULT_HOST_BANDWIDTH,
};
use crate::model::ModelSpec;
use crate::run::DecodeMode;
use crate::specdec::{
    DraftConfig, RemapKind, SpecConfig, DEFAULT_GAMMA, DEFAULT_N_DRAFT, DEFAULT_WARMUP_STEPS,
};

/// A decoding system: speculative decoding under a draft policy, or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    Spec(DraftPolicy),
    Baseline(BaselineKind),
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Spec(p) => p.as_str(),
            System::Baseline(b) => b.as_str(),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(p) = s.parse::<DraftPolicy>() {
            return Ok(System::Spec(p));
        }
        [BaselineKind::OnDemand, BaselineKind::Overlap, BaselineKind::Caching]
            .into_iter()
            .find(|b| b.as_str() == s)
            .map(System::Baseline)
            .ok_or_else(|| Error::config(format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config(format!("unknown format `{other}`"))),
        }
    }
}

impl OutputFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Model shape; `model.seed` is the base model seed (`model_seed`).
    pub model: ModelSpec,
    pub dtype_bytes: u64,
    /// `None` sizes the device to hold every expert.
    pub device_capacity_bytes: Option<u64>,
    pub host_bandwidth: f64,
    pub ssd_bandwidth: Option<f64>,
    pub compute_rate: f64,
    pub expert_cost_s: f64,

    pub policies: Vec<System>,
    pub remap: RemapKind,
    pub sampling: bool,
    pub temperature: f64,
    pub gammas: Vec<usize>,
    pub n_drafts: Vec<usize>,
    pub batches: Vec<usize>,
    /// Migration bandwidths to sweep; empty means the configured link only.
    pub bandwidths: Vec<f64>,
    pub max_new_tokens: usize,
    pub prompt_len: usize,
    pub warmup_steps: usize,
    pub cache_fraction: f64,
    pub seeds: Vec<u64>,

    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    /// Adds a `text_hash` column.
    pub verbose: bool,
    pub trace_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default().with_skew(1.5),
            dtype_bytes: DEFAULT_DTYPE_BYTES,
            device_capacity_bytes: None,
            host_bandwidth: DEFAULT_HOST_BANDWIDTH,
            ssd_bandwidth: None,
            compute_rate: DEFAULT_COMPUTE_RATE,
            expert_cost_s: DEFAULT_EXPERT_COST_S,
            policies: vec![System::Spec(DraftPolicy::HotTemporal)],
            remap: RemapKind::Affinity,
            sampling: false,
            temperature: 1.0,
            gammas: vec![DEFAULT_GAMMA],
            n_drafts: vec![DEFAULT_N_DRAFT],
            batches: vec![1],
            bandwidths: Vec::new(),
            max_new_tokens: 32,
            prompt_len: 8,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            cache_fraction: DEFAULT_CACHE_FRACTION,
            seeds: (0..20).collect(),
            out: None,
            format: OutputFormat::Csv,
            verbose: false,
            trace_dir: None,
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "layers",
    "moe_layers",
    "experts",
    "top_k",
    "hidden_dim",
    "ffn_dim",
    "vocab",
    "gate_skew",
    "model_seed",
    "dtype_bytes",
    "device_capacity",
    "host_bandwidth",
    "ssd_bandwidth",
    "compute_rate",
    "expert_cost",
    "policy",
    "remap",
    "mode",
    "temperature",
    "gamma",
    "n_draft",
    "batch",
    "bandwidth",
    "max_new_tokens",
    "prompt_len",
    "warmup_steps",
    "cache_fraction",
    "seeds",
    "out",
    "format",
    "verbose",
    "trace_dir",
];

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|v| parse_scalar(key, v.trim()))
        .collect()
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let range = |a: &str, b: &str, inclusive: bool| -> Result<Vec<u64>> {
        let a: u64 = parse_scalar("seeds", a.trim())?;
        let b: u64 = parse_scalar("seeds", b.trim())?;
        Ok(if inclusive { (a..=b).collect() } else { (a..b).collect() })
    };
    if let Some((a, b)) = value.split_once("..=") {
        range(a, b, true)
    } else if let Some((a, b)) = value.split_once("..") {
        range(a, b, false)
    } else {
        parse_list("seeds", value)
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match value {
        "none" | "auto" | "" => Ok(None),
        v => parse_scalar(key, v).map(Some),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "layers" => {
                let n: usize = parse_scalar(key, value)?;
                if self.model.moe_layer_mask.iter().all(|&m| m) {
                    self.model.moe_layer_mask = vec![true; n];
                }
                self.model.num_layers = n;
            }
            "moe_layers" => {
                self.model.moe_layer_mask = if value == "all" {
                    vec![true; self.model.num_layers]
                } else {
                    parse_list::<u8>(key, value)?
                        .into_iter()
                        .map(|v| v != 0)
                        .collect()
                }
            }
            "experts" => self.model.experts_per_block = parse_scalar(key, value)?,
            "top_k" => self.model.top_k = parse_scalar(key, value)?,
            "hidden_dim" => self.model.hidden_dim = parse_scalar(key, value)?,
            "ffn_dim" => self.model.ffn_dim = parse_scalar(key, value)?,
            "vocab" => self.model.vocab_size = parse_scalar(key, value)?,
            "gate_skew" => self.model.gate_skew = parse_scalar(key, value)?,
            "model_seed" => self.model.seed = parse_scalar(key, value)?,
            "dtype_bytes" => self.dtype_bytes = parse_scalar(key, value)?,
            "device_capacity" => self.device_capacity_bytes = optional::<f64>(key, value)?.map(|v| v as u64),
            "host_bandwidth" => self.host_bandwidth = parse_scalar(key, value)?,
            "ssd_bandwidth" => self.ssd_bandwidth = optional(key, value)?,
            "compute_rate" => self.compute_rate = parse_scalar(key, value)?,
            "expert_cost" => self.expert_cost_s = parse_scalar(key, value)?,
            "policy" => self.policies = parse_list(key, value)?,
            "remap" => self.remap = value.parse()?,
            "mode" => {
                self.sampling = match value {
                    "greedy" => false,
                    "sampling" => true,
                    other => return Err(Error::config(format!("unknown mode `{other}`"))),
                }
            }
            "temperature" => self.temperature = parse_scalar(key, value)?,
            "gamma" => self.gammas = parse_list(key, value)?,
            "n_draft" => self.n_drafts = parse_list(key, value)?,
            "batch" => self.batches = parse_list(key, value)?,
            "bandwidth" => {
                self.bandwidths = if value == "auto" || value.is_empty() {
                    Vec::new()
                } else {
                    parse_list(key, value)?
                }
            }
            "max_new_tokens" => self.max_new_tokens = parse_scalar(key, value)?,
            "prompt_len" => self.prompt_len = parse_scalar(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_scalar(key, value)?,
            "cache_fraction" => self.cache_fraction = parse_scalar(key, value)?,
            "seeds" | "seed" => self.seeds = parse_seeds(value)?,
            "out" => self.out = optional::<String>(key, value)?.map(PathBuf::from),
            "format" => self.format = value.parse()?,
            "verbose" => self.verbose = parse_scalar(key, value)?,
            "trace_dir" => self.trace_dir = optional::<String>(key, value)?.map(PathBuf::from),
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse config text; defaults fill every key not mentioned.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let with_line = |e: Error| match e {
                Error::Config { message, .. } => Error::Config {
                    line: Some(line_no),
                    message,
                },
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| with_line(Error::config(format!("expected `key = value`, got `{line}`"))))?;
            let key = key.trim();
            config.set(key, value).map_err(with_line)?;
            lines.insert(key.to_string(), line_no);
        }
        config.validate().map_err(|e| match e {
            Error::Config { message, .. } => {
                let line = lines
                    .iter()
                    .filter(|(k, _)| message.contains(&format!("({k})")))
                    .map(|(_, &l)| l)
                    .min();
                Error::Config { line, message }
            }
            other => other,
        })?;
        Ok(config)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Check every embedded invariant; messages name the violated rule and its key.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(msg));
        self.model
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        if self.policies.is_empty() || self.gammas.is_empty() || self.n_drafts.is_empty() {
            return fail("sweep axes must be non-empty (policy, gamma, n_draft)");
        }
        if self.batches.is_empty() || self.seeds.is_empty() {
            return fail("sweep axes must be non-empty (batch, seeds)");
        }
        if self.gammas.iter().any(|&g| g < 1) {
            return fail("gamma >= 1 violated (gamma)");
        }
        if self.batches.iter().any(|&b| b < 1) {
            return fail("B >= 1 violated (batch)");
        }
        let (k, e) = (self.model.top_k, self.model.experts_per_block);
        if self.n_drafts.iter().any(|&n| n < k || n > e) {
            return fail("K <= N <= E violated (n_draft)");
        }
        if self.sampling && !(self.temperature > 0.0) {
            return fail("temperature > 0 in sampling mode violated (temperature)");
        }
        if !(self.cache_fraction > 0.0 && self.cache_fraction < 1.0) {
            return fail("0 < cache_fraction < 1 violated (cache_fraction)");
        }
        if self.warmup_steps < 1 {
            return fail("warmup_steps >= 1 violated (warmup_steps)");
        }
        if self.max_new_tokens < 1 {
            return fail("max_new_tokens >= 1 violated (max_new_tokens)");
        }
        if self.prompt_len < 1 {
            return fail("prompt_len >= 1 violated (prompt_len)");
        }
        if self.dtype_bytes < 1 {
            return fail("dtype_bytes >= 1 violated (dtype_bytes)");
        }
        if self.bandwidths.iter().any(|&b| !(b > 0.0)) {
            return fail("bandwidth > 0 violated (bandwidth)");
        }
        let max_pinned = self
            .n_drafts
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(BaselineConfig {
                kind: BaselineKind::Caching,
                cache_fraction: self.cache_fraction,
                warmup_steps: self.warmup_steps,
            }
            .cached_per_layer(e));
        self.tier_config()
            .validate(self.model.num_moe_layers(), max_pinned)
            .map_err(|err| Error::config(format!("{err} (device_capacity)")))
    }

    /// Memory configuration before any bandwidth sweep override.
    pub fn tier_config(&self) -> TierConfig {
        let mut tier = TierConfig::for_model(&self.model, self.dtype_bytes);
        if let Some(cap) = self.device_capacity_bytes {
            tier.device_capacity_bytes = cap;
        }
        tier.host_bandwidth_bytes_per_s = self.host_bandwidth;
        tier.ssd_bandwidth_bytes_per_s = self.ssd_bandwidth;
        tier.compute_rate_tokens_per_s = self.compute_rate;
        tier.compute_cost_per_active_expert_s = self.expert_cost_s;
        tier
    }

    pub fn decode_mode(&self) -> DecodeMode {
        if self.sampling {
            DecodeMode::Sampling {
                temperature: self.temperature,
            }
        } else {
            DecodeMode::Greedy
        }
    }

    pub fn spec_config(&self, gamma: usize, batch: usize, seed: u64) -> SpecConfig {
        SpecConfig {
            gamma,
            mode: self.decode_mode(),
            batch,
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }

    pub fn draft_config(&self, policy: DraftPolicy, n_draft: usize) -> DraftConfig {
        DraftConfig {
            policy,
            n_draft,
            remap: self.remap,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn baseline_config(&self, kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            kind,
            cache_fraction: self.cache_fraction,
            warmup_steps: self.warmup_steps,
        }
    }

    /// Canonical text form: every key, in [`KEYS`] order.
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let none = || "none".to_string();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(none, |p| p.display().to_string());
        let values: Vec<(&str, String)> = vec![
            ("layers", m.num_layers.to_string()),
            (
                "moe_layers",
                if m.moe_layer_mask.iter().all(|&x| x) {
                    "all".into()
                } else {
                    join(&m.moe_layer_mask.iter().map(|&x| u8::from(x)).collect::<Vec<_>>())
                },
            ),
            ("experts", m.experts_per_block.to_string()),
            ("top_k", m.top_k.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("vocab", m.vocab_size.to_string()),
            ("gate_skew", m.gate_skew.to_string()),
            ("model_seed", m.seed.to_string()),
            ("dtype_bytes", self.dtype_bytes.to_string()),
            (
                "device_capacity",
                self.device_capacity_bytes.map_or_else(|| "auto".into(), |c| c.to_string()),
            ),
            ("host_bandwidth", self.host_bandwidth.to_string()),
            ("ssd_bandwidth", self.ssd_bandwidth.map_or_else(none, |b| b.to_string())),
            ("compute_rate", self.compute_rate.to_string()),
            ("expert_cost", self.expert_cost_s.to_string()),
            ("policy", join(&self.policies)),
            ("remap", self.remap.as_str().into()),
            ("mode", if self.sampling { "sampling" } else { "greedy" }.into()),
            ("temperature", self.temperature.to_string()),
            ("gamma", join(&self.gammas)),
            ("n_draft", join(&self.n_drafts)),
            ("batch", join(&self.batches)),
            (
                "bandwidth",
                if self.bandwidths.is_empty() {
                    "auto".into()
                } else {
                    join(&self.bandwidths)
                },
            ),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("prompt_len", self.prompt_len.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("cache_fraction", self.cache_fraction.to_string()),
            ("seeds", join(&self.seeds)),
            ("out", path(&self.out)),
            ("format", self.format.as_str().into()),
            ("verbose", self.verbose.to_string()),
            ("trace_dir", path(&self.trace_dir)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        values
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
