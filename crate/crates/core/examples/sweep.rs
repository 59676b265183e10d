//! A small sweep over draft policies, batch sizes and link bandwidths,
//! written as CSV to stdout. `moe-spec-offload run --config` does the same
//! from a config file.

use moe_spec_offload::harness::{emit_results, run_experiment, ExperimentConfig};

const CONFIG: &str = "
gate_skew = 1.5
policy = random, hot_global, hot_temporal, caching
batch = 1, 8
bandwidth = 64e9, 6e9
gamma = 8
seeds = 0..2
max_new_tokens = 16
";

fn main() -> moe_spec_offload::Result<()> {
    let config = ExperimentConfig::parse_str(CONFIG)?;
    let rows = run_experiment(&config)?;
    emit_results(&rows, config.format, std::io::stdout().lock())
}
