//! Cartesian sweeps over policy × batch × γ × N × bandwidth × seed.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, System};
use super::trace::write_trace;
use crate::baselines::run_baseline;
use crate::error::{Error, Result};
use crate::memsim::Phase;
use crate::model::{build_model, Token};
use crate::run::DecodeRun;
use crate::specdec::{measure_lambda, run_specmoe, speedup_eq1, speedup_eq2};

/// Deterministic random prompts; sequence `i` depends only on `(seed, i)`, so a
/// larger batch extends a smaller one.
pub fn make_prompts(seed: u64, batch: usize, len: usize, vocab: usize) -> Vec<Vec<Token>> {
    (0..batch)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect()
}

/// One point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub system: System,
    pub batch: usize,
    /// 0 for baselines, which have no speculation length.
    pub gamma: usize,
    /// 0 for baselines.
    pub n_draft: usize,
    pub bandwidth: f64,
    pub seed: u64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "policy={} batch={} gamma={} n_draft={} bandwidth={} seed={}",
            self.system, self.batch, self.gamma, self.n_draft, self.bandwidth, self.seed
        )
    }
}

/// Cells in axis order: policy, batch, γ, N, bandwidth, seed (seed varies fastest).
pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let bandwidths = if config.bandwidths.is_empty() {
        vec![config.tier_config().migration_bandwidth()]
    } else {
        config.bandwidths.clone()
    };
    let mut out = Vec::new();
    for &system in &config.policies {
        let (gammas, n_drafts) = match system {
            System::Spec(_) => (config.gammas.clone(), config.n_drafts.clone()),
            System::Baseline(_) => (vec![0], vec![0]),
        };
        for &batch in &config.batches {
            for &gamma in &gammas {
                for &n_draft in &n_drafts {
                    for &bandwidth in &bandwidths {
                        for &seed in &config.seeds {
                            out.push(Cell {
                                system,
                                batch,
                                gamma,
                                n_draft,
                                bandwidth,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: String,
    pub batch: usize,
    pub gamma: usize,
    pub n_draft: usize,
    pub bandwidth: f64,
    pub seed: u64,
    pub tau: f64,
    /// Modeled throughput.
    pub tokens_per_sec: f64,
    pub bytes_total: u64,
    pub bytes_spec: u64,
    pub bytes_verify: u64,
    pub lambda: f64,
    pub s_eq1: f64,
    pub s_eq2: f64,
    /// SHA-256 of the generated tokens; emitted only in verbose mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_hash: Option<String>,
    /// Host wall-clock for the cell; informational, never emitted.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

fn text_hash(outputs: &[Vec<Token>]) -> String {
    let mut h = Sha256::new();
    for seq in outputs {
        for &t in seq {
            h.update((t as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a single cell produced.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub row: ResultRow,
    pub run: DecodeRun,
}

pub fn run_cell(config: &ExperimentConfig, cell: &Cell) -> Result<CellRun> {
    let started = Instant::now();
    let spec = config
        .model
        .clone()
        .with_seed(config.model.seed.wrapping_add(cell.seed));
    let weights = build_model(&spec)?;
    let prompts = make_prompts(cell.seed, cell.batch, config.prompt_len, spec.vocab_size);
    let tier = config.tier_config().with_migration_bandwidth(cell.bandwidth);

    let (run, tau, lambda, s_eq1, s_eq2) = match cell.system {
        System::Spec(policy) => {
            let out = run_specmoe(
                &weights,
                &config.spec_config(cell.gamma, cell.batch, cell.seed),
                &config.draft_config(policy, cell.n_draft),
                &tier,
                &prompts,
            )?;
            let m = &out.run.metrics;
            // A run that finishes in the prefill step has no rounds to measure.
            let (lambda, c) = match (measure_lambda(m), m.measured_c(cell.gamma)) {
                (Ok(l), Some(c)) => (l, c),
                _ => (1.0, 0.0),
            };
            let tau = m.tau.max(1.0);
            let s1 = speedup_eq1(tau, cell.gamma, c)?;
            let s2 = speedup_eq2(tau, cell.gamma, c, lambda)?;
            (out.run, tau, lambda, s1, s2)
        }
        System::Baseline(kind) => {
            let run = run_baseline(
                &weights,
                &prompts,
                &tier,
                &config.baseline_config(kind),
                config.decode_mode(),
                config.max_new_tokens,
                cell.seed,
            )?;
            (run, 1.0, 1.0, 1.0, 1.0)
        }
    };

    let ledger = &run.metrics.ledger;
    let (bytes_spec, bytes_verify) = match cell.system {
        System::Spec(_) => (
            run.ledger.phase_total(Phase::Speculation),
            run.ledger.phase_total(Phase::Verification),
        ),
        System::Baseline(_) => (0, 0),
    };
    let row = ResultRow {
        policy: cell.system.to_string(),
        batch: cell.batch,
        gamma: cell.gamma,
        n_draft: cell.n_draft,
        bandwidth: cell.bandwidth,
        seed: cell.seed,
        tau,
        tokens_per_sec: run.metrics.tokens_per_sec(),
        bytes_total: ledger.total_bytes,
        bytes_spec,
        bytes_verify,
        lambda,
        s_eq1,
        s_eq2,
        text_hash: config.verbose.then(|| text_hash(&run.outputs)),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(CellRun { row, run })
}

fn trace_file_name(cell: &Cell) -> String {
    format!(
        "trace-{}-b{}-g{}-n{}-bw{}-s{}.csv",
        cell.system, cell.batch, cell.gamma, cell.n_draft, cell.bandwidth, cell.seed
    )
}

/// Run every cell in parallel. Rows come back in [`cells`] order regardless of
/// scheduling. When `trace_dir` is set, each cell's routing trace is written there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    if let Some(dir) = &config.trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    cells(config)
        .par_iter()
        .map(|cell| {
            let wrap = |e: Error| Error::Cell {
                cell: cell.to_string(),
                source: Box::new(e),
            };
            let out = run_cell(config, cell).map_err(wrap)?;
            if let Some(dir) = &config.trace_dir {
                let path = Path::new(dir).join(trace_file_name(cell));
                write_trace(&path, &config.model, &out.run.trace).map_err(wrap)?;
            }
            Ok(out.row)
        })
        .collect()
}
