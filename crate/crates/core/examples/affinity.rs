//! Build the expert affinity table, save it, and use it to remap gate picks
//! that fall outside a draft set.

use moe_spec_offload::drafting::{build_affinity_table, nearest_draft_expert, AffinityTable};
use moe_spec_offload::model::{build_model, ModelSpec};

fn main() -> moe_spec_offload::Result<()> {
    let weights = build_model(&ModelSpec::default().with_seed(4))?;
    let table = build_affinity_table(&weights);

    let path = std::env::temp_dir().join("moe-affinity-example.csv");
    table.save(&path)?;
    assert_eq!(AffinityTable::load(&path)?, table);
    println!("saved {} layers x {} experts to {}", table.num_layers(), table.num_experts(), path.display());

    let draft = [2, 5, 11, 13];
    for raw in 0..table.num_experts() {
        let sub = nearest_draft_expert(&table, 0, raw, &draft, &[])?;
        println!("layer 0: expert {raw:>2} -> {sub:>2} (distance {:.3})", table.distance(0, raw, sub));
    }
    Ok(())
}
