//! Record a routing trace, read it back, and summarise expert hotness.

use moe_spec_offload::baselines::run_ondemand;
use moe_spec_offload::harness::{analyze_trace, ingest_trace, make_prompts, write_heatmap, write_trace};
use moe_spec_offload::memsim::TierConfig;
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;

fn main() -> moe_spec_offload::Result<()> {
    let dir = std::env::temp_dir();
    for skew in [0.0, 1.0, 2.0] {
        let spec = ModelSpec::default().with_skew(skew);
        let weights = build_model(&spec)?;
        let tier = TierConfig::for_model(&spec, 4);
        let run = run_ondemand(&weights, &make_prompts(0, 16, 8, spec.vocab_size), &tier, DecodeMode::Greedy, 32, 0)?;

        let path = dir.join(format!("moe-trace-skew{skew}.csv"));
        write_trace(&path, &spec, &run.trace)?;
        let report = analyze_trace(&ingest_trace(&path)?, 4)?;
        println!("gate_skew {skew}: skewness {:.3}, hottest in layer 0: {:?}", report.skewness, report.top_experts[0]);
        if skew == 2.0 {
            let heat = dir.join("moe-heatmap.csv");
            write_heatmap(std::fs::File::create(&heat)?, &report)?;
            println!("heatmap table: {}", heat.display());
        }
    }
    Ok(())
}
