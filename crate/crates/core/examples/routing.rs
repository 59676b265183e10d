//! Run the toy MoE model on a prompt and print which experts each token used,
//! first as the full target model, then restricted to four experts per layer.

use moe_spec_offload::drafting::build_affinity_table;
use moe_spec_offload::model::{build_model, forward, greedy_next, ExpertRestriction, ModelSpec, RemapStrategy};

fn main() -> moe_spec_offload::Result<()> {
    let spec = ModelSpec::default().with_skew(1.5).with_seed(1);
    let weights = build_model(&spec)?;
    let prompt = [3, 14, 15, 9, 26];

    let target = forward(&weights, &prompt, None)?;
    println!("target next token: {}", greedy_next(target.last_logits()));
    for tok in &target.activations.tokens {
        println!("  position {} -> {:?}", tok.position, tok.raw);
    }

    let allowed = vec![vec![0, 1, 2, 3]; spec.num_moe_layers()];
    let table = build_affinity_table(&weights);
    let draft = ExpertRestriction {
        allowed: &allowed,
        remap: RemapStrategy::Affinity(&table),
    };
    let out = forward(&weights, &prompt, Some(&draft))?;
    println!("draft next token: {}", greedy_next(out.last_logits()));
    for tok in &out.activations.tokens {
        println!("  position {} gate {:?} ran {:?}", tok.position, tok.raw, tok.routed);
    }
    Ok(())
}
