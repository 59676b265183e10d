//! Greedy self-drafting speculative decoding next to plain on-demand decoding:
//! the tokens match exactly while fewer expert bytes cross the host link.

use moe_spec_offload::baselines::run_ondemand;
use moe_spec_offload::harness::make_prompts;
use moe_spec_offload::memsim::TierConfig;
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;
use moe_spec_offload::specdec::{run_specmoe, DraftConfig, SpecConfig};

fn main() -> moe_spec_offload::Result<()> {
    let spec = ModelSpec::default().with_skew(1.5);
    let weights = build_model(&spec)?;
    let tier = TierConfig::for_model(&spec, 4);
    let prompts = make_prompts(0, 4, 8, spec.vocab_size);

    let config = SpecConfig { gamma: 6, batch: prompts.len(), max_new_tokens: 24, ..SpecConfig::default() };
    let run = run_specmoe(&weights, &config, &DraftConfig::default(), &tier, &prompts)?;
    let baseline = run_ondemand(&weights, &prompts, &tier, DecodeMode::Greedy, 24, 0)?;
    assert_eq!(run.outputs(), baseline.outputs.as_slice());

    for round in run.rounds.iter().take(5) {
        let accepted: Vec<_> = round.sequences.iter().map(|s| s.accepted).collect();
        println!("round {}: accepted {:?}, {} bytes migrated", round.round, accepted, round.verification_bytes);
    }
    let m = run.metrics();
    println!("tau {:.3} over {} rounds", m.tau, m.steps);
    println!(
        "bytes: speculative {} vs on-demand {}",
        m.ledger.total_bytes, baseline.metrics.ledger.total_bytes
    );
    Ok(())
}
