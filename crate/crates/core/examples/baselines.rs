//! Expert traffic and modeled time for every decoding system on one batch.

use moe_spec_offload::baselines::{run_baseline, BaselineConfig, BaselineKind};
use moe_spec_offload::harness::make_prompts;
use moe_spec_offload::memsim::TierConfig;
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;
use moe_spec_offload::specdec::{run_specmoe, DraftConfig, SpecConfig};

fn main() -> moe_spec_offload::Result<()> {
    let spec = ModelSpec::default().with_skew(1.5).with_seed(3);
    let weights = build_model(&spec)?;
    let tier = TierConfig::for_model(&spec, 4);
    let prompts = make_prompts(3, 32, 8, spec.vocab_size);

    println!("{:<14} {:>12} {:>12} {:>10}", "system", "bytes", "modeled s", "tok/s");
    for kind in [BaselineKind::OnDemand, BaselineKind::Overlap, BaselineKind::Caching] {
        let run = run_baseline(&weights, &prompts, &tier, &BaselineConfig::new(kind), DecodeMode::Greedy, 32, 0)?;
        let m = &run.metrics;
        println!("{:<14} {:>12} {:>12.6} {:>10.0}", kind.as_str(), m.ledger.total_bytes, m.total_time_s(), m.tokens_per_sec());
    }
    let config = SpecConfig { batch: prompts.len(), ..SpecConfig::default() };
    let run = run_specmoe(&weights, &config, &DraftConfig::default(), &tier, &prompts)?;
    let m = run.metrics();
    println!("{:<14} {:>12} {:>12.6} {:>10.0}", "hot_temporal", m.ledger.total_bytes, m.total_time_s(), m.tokens_per_sec());
    Ok(())
}
