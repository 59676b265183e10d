//! A quick, fully deterministic invariant suite.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::run_ondemand;
use crate::drafting::{skewness, DraftPolicy, HotnessCounter};
use crate::error::Result;
use crate::harness::experiment::make_prompts;
use crate::memsim::{Phase, TierConfig, DEFAULT_DTYPE_BYTES};
use crate::model::{build_model, route_topk, sample_from_probs, softmax, ModelSpec};
use crate::run::DecodeMode;
use crate::specdec::{accept_sampling, measure_lambda, run_specmoe, speedup_eq1, speedup_eq2, DraftConfig, SpecConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{status} {:<22} {}", c.name, c.detail);
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(s, "{passed}/{} checks passed", self.checks.len());
        s
    }
}

/// Empirical total-variation distance between the first token emitted by
/// speculative sampling and the target distribution `p[0]`.
pub fn sampling_tv(p: &[Vec<f64>], q: &[Vec<f64>], trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = p[0].len();
    let mut hits = vec![0u64; vocab];
    for _ in 0..trials {
        let drafts = q
            .iter()
            .map(|qi| sample_from_probs(qi, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (accepted, corrected) = accept_sampling(p, q, &drafts, &mut rng)?;
        let first = if accepted > 0 { drafts[0] } else { corrected };
        hits[first] += 1;
    }
    Ok(0.5
        * hits
            .iter()
            .zip(&p[0])
            .map(|(&h, &pi)| (h as f64 / trials as f64 - pi).abs())
            .sum::<f64>())
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn lossless() -> Result<(bool, String)> {
    let mut cases = 0;
    for seed in 0..4 {
        let spec = ModelSpec::default().with_skew(1.5).with_seed(seed);
        let w = build_model(&spec)?;
        let tier = TierConfig::for_model(&spec, DEFAULT_DTYPE_BYTES);
        let prompts = make_prompts(seed, 2, 6, spec.vocab_size);
        let reference = run_ondemand(&w, &prompts, &tier, DecodeMode::Greedy, 16, seed)?.outputs;
        for n in [2, 4, 16] {
            for policy in DraftPolicy::ALL {
                let cfg = SpecConfig { gamma: 5, max_new_tokens: 16, seed, batch: 2, ..SpecConfig::default() };
                let draft = DraftConfig { policy, n_draft: n, ..DraftConfig::default() };
                let out = run_specmoe(&w, &cfg, &draft, &tier, &prompts)?;
                if out.outputs() != reference.as_slice() {
                    return Ok((false, format!("seed {seed} N={n} {policy} diverged")));
                }
                cases += 1;
            }
        }
    }
    Ok((true, format!("{cases} runs match target greedy decoding")))
}

fn identity_and_ledger() -> Result<(bool, String)> {
    let spec = ModelSpec::default().with_skew(1.5);
    let w = build_model(&spec)?;
    let tier = TierConfig::for_model(&spec, DEFAULT_DTYPE_BYTES);
    let prompts = make_prompts(7, 4, 6, spec.vocab_size);
    let cfg = SpecConfig { gamma: 4, max_new_tokens: 15, batch: 4, ..SpecConfig::default() };
    let full = DraftConfig { n_draft: spec.experts_per_block, ..DraftConfig::default() };
    let run = run_specmoe(&w, &cfg, &full, &tier, &prompts)?;
    if run.metrics().tau != 5.0 {
        return Ok((false, format!("N=E gave tau {}", run.metrics().tau)));
    }
    let run = run_specmoe(&w, &cfg, &DraftConfig::default(), &tier, &prompts)?;
    let ledger = &run.run.ledger;
    let spec_bytes = ledger.phase_total(Phase::Speculation);
    let sum = spec_bytes + ledger.phase_total(Phase::Verification);
    let replace: u64 = run.rounds.iter().map(|r| r.replacement_bytes).sum();
    let ok = sum == ledger.total() && spec_bytes == 0 && replace == 0;
    Ok((ok, format!("tau(N=E)=5, {} bytes, speculation {spec_bytes}, replacement {replace}", ledger.total())))
}

/// Run every check.
pub fn run_selftest() -> SelftestReport {
    let checks = vec![
        check("softmax", || {
            let p = softmax(&[1.0, 2.0, 3.0])?;
            let want = [0.0900305731703805, 0.2447284710547976, 0.6652409557748219];
            let ok = p.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
            Ok((ok, format!("[{:.4}, {:.4}, {:.4}]", p[0], p[1], p[2])))
        }),
        check("topk_ties", || {
            let picks = route_topk(&[0.3, 0.9, 0.1, 0.9], 2)?;
            Ok((picks == [1, 3], format!("{picks:?}")))
        }),
        check("speedup_models", || {
            let a = speedup_eq1(11.0, 10, 0.0)?;
            let b = speedup_eq2(7.265, 10, 0.05, 2.0)?;
            Ok((a == 11.0 && (b - 2.906).abs() < 1e-12, format!("eq1={a} eq2={b:.6}")))
        }),
        check("skewness", || {
            let mut h = HotnessCounter::new(1, 4);
            for e in 0..4 {
                h.record_picks(0, &[e; 25]);
            }
            let uniform = skewness(&h, 0.25)?;
            let mut h = HotnessCounter::new(1, 4);
            h.record_picks(0, &[0; 70]);
            h.record_picks(0, &[1, 2, 3].repeat(10));
            let hand = skewness(&h, 0.25)?;
            Ok((uniform == 0.25 && (hand - 0.7).abs() < 1e-12, format!("uniform={uniform} [70,10,10,10]={hand}")))
        }),
        check("lossless_greedy", lossless),
        check("identity_and_ledger", identity_and_ledger),
        check("lambda_at_gamma_1", || {
            let spec = ModelSpec::default().with_skew(1.5);
            let w = build_model(&spec)?;
            let tier = TierConfig::for_model(&spec, DEFAULT_DTYPE_BYTES);
            let cfg = SpecConfig { gamma: 1, batch: 4, max_new_tokens: 10, ..SpecConfig::default() };
            let run = run_specmoe(&w, &cfg, &DraftConfig::default(), &tier, &make_prompts(1, 4, 6, 64))?;
            let lambda = measure_lambda(run.metrics())?;
            Ok(((lambda - 1.0).abs() < 1e-12, format!("lambda={lambda}")))
        }),
        check("sampling_marginal", || {
            let p = vec![
                vec![0.05, 0.10, 0.30, 0.05, 0.20, 0.10, 0.15, 0.05],
                vec![0.125; 8],
            ];
            let q = vec![vec![0.30, 0.05, 0.05, 0.20, 0.10, 0.10, 0.10, 0.10]];
            let tv = sampling_tv(&p, &q, 200_000, 11)?;
            Ok((tv < 1e-2, format!("tv={tv:.5} over 200000 trials")))
        }),
    ];
    SelftestReport { checks }
}
