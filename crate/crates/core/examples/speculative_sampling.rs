//! Speculative sampling at several temperatures. Output tokens follow the
//! target model's distribution; acceptance drops as sampling gets noisier.

use moe_spec_offload::harness::make_prompts;
use moe_spec_offload::memsim::TierConfig;
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;
use moe_spec_offload::specdec::{run_specmoe, DraftConfig, SpecConfig};

fn main() -> moe_spec_offload::Result<()> {
    let spec = ModelSpec::default().with_skew(1.5).with_seed(2);
    let weights = build_model(&spec)?;
    let tier = TierConfig::for_model(&spec, 4);
    let prompts = make_prompts(2, 8, 8, spec.vocab_size);

    for temperature in [0.3, 0.7, 1.0, 1.5] {
        let config = SpecConfig {
            gamma: 5,
            batch: prompts.len(),
            max_new_tokens: 32,
            seed: 9,
            mode: DecodeMode::Sampling { temperature },
        };
        let run = run_specmoe(&weights, &config, &DraftConfig::default(), &tier, &prompts)?;
        println!("T = {temperature}: tau {:.3}, first sequence {:?}", run.metrics().tau, &run.outputs()[0][..8]);
    }
    Ok(())
}
