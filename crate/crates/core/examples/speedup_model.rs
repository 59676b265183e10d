//! Verification cost ratio λ across batch sizes, and what it does to the
//! analytic speedup estimates.
//!
//! The workload has 64 experts, top-1 routing and no gate skew, so eight
//! sampled draft tokens usually touch many more experts than one token does.

use moe_spec_offload::harness::make_prompts;
use moe_spec_offload::memsim::TierConfig;
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;
use moe_spec_offload::specdec::{measure_lambda, run_specmoe, speedup_eq1, speedup_eq2, DraftConfig, SpecConfig};

fn main() -> moe_spec_offload::Result<()> {
    let gamma = 8;
    for batch in [1, 8, 32] {
        let (mut lambda, mut tau, mut c) = (0.0, 0.0, 0.0);
        let seeds = 5;
        for seed in 0..seeds {
            let spec = ModelSpec::all_moe(4, 64, 1, 32, 64, 64).with_seed(seed);
            let weights = build_model(&spec)?;
            let tier = TierConfig::for_model(&spec, 4);
            let config = SpecConfig {
                gamma,
                batch,
                max_new_tokens: 32,
                seed,
                mode: DecodeMode::Sampling { temperature: 1.0 },
            };
            let run = run_specmoe(&weights, &config, &DraftConfig::default(), &tier, &make_prompts(seed, batch, 8, 64))?;
            lambda += measure_lambda(run.metrics())?;
            tau += run.metrics().tau;
            c += run.metrics().measured_c(gamma).unwrap_or(0.0);
        }
        let n = seeds as f64;
        let (lambda, tau, c) = (lambda / n, tau / n, c / n);
        println!(
            "B={batch:>2}: lambda {lambda:.2}  tau {tau:.2}  c {c:.2}  S(unbatched) {:.2}  S(batched) {:.2}",
            speedup_eq1(tau, gamma, c)?,
            speedup_eq2(tau, gamma, c, lambda)?
        );
    }
    Ok(())
}
