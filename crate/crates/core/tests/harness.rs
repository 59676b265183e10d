use std::path::Path;

use moe_spec_offload::baselines::run_ondemand;
use moe_spec_offload::harness::{
    emit_results, ingest_trace, make_prompts, run_experiment, write_results, write_trace,
    ExperimentConfig, OutputFormat, ResultRow,
};
use moe_spec_offload::memsim::{TierConfig, DEFAULT_DTYPE_BYTES};
use moe_spec_offload::model::{build_model, ModelSpec};
use moe_spec_offload::run::DecodeMode;
use moe_spec_offload::specdec::{run_specmoe, DraftConfig, SpecConfig};

const PINNED: &str = "\
# small pinned sweep used as the golden reference
gate_skew = 1.5
policy = hot_temporal, random, ondemand, caching
batch = 1, 4
gamma = 4
seeds = 0..2
max_new_tokens = 12
";

fn csv_of(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    emit_results(rows, OutputFormat::Csv, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn pinned_sweep_matches_golden_file() {
    let rows = run_experiment(&ExperimentConfig::parse_str(PINNED).unwrap()).unwrap();
    let got = csv_of(&rows);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pinned_results.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).unwrap();
    assert_eq!(got, want, "regenerate with UPDATE_GOLDEN=1 after reviewing the change");
}

#[test]
fn same_rows_give_identical_files() {
    let rows = run_experiment(&ExperimentConfig::parse_str(PINNED).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for format in [OutputFormat::Csv, OutputFormat::Json] {
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_results(&rows, format, &a).unwrap();
        write_results(&rows, format, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
    let json: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.path().join("b")).unwrap()).unwrap();
    assert_eq!(json.len(), rows.len());
}

#[test]
fn single_cell_sweep_gives_one_bounded_row() {
    let cfg = ExperimentConfig::parse_str("seeds = 3\nmax_new_tokens = 16\n").unwrap();
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert!(r.tau >= 1.0 && r.tau <= (r.gamma + 1) as f64);
    assert_eq!(r.bytes_total, r.bytes_spec + r.bytes_verify);
    assert_eq!(r.bytes_spec, 0);
}

#[test]
fn traces_round_trip_to_run_counters() {
    let spec = ModelSpec::default().with_skew(1.5).with_seed(2);
    let w = build_model(&spec).unwrap();
    let tier = TierConfig::for_model(&spec, DEFAULT_DTYPE_BYTES);
    let prompts = make_prompts(2, 3, 8, spec.vocab_size);
    let dir = tempfile::tempdir().unwrap();

    let base = run_ondemand(&w, &prompts, &tier, DecodeMode::Greedy, 20, 2).unwrap();
    let path = dir.path().join("ondemand.csv");
    write_trace(&path, &spec, &base.trace).unwrap();
    assert_eq!(ingest_trace(&path).unwrap(), base.hotness);

    let cfg = SpecConfig { batch: 3, max_new_tokens: 20, seed: 2, ..SpecConfig::default() };
    let spec_run = run_specmoe(&w, &cfg, &DraftConfig::default(), &tier, &prompts).unwrap();
    let path = dir.path().join("spec.csv");
    write_trace(&path, &spec, &spec_run.run.trace).unwrap();
    assert_eq!(ingest_trace(&path).unwrap(), spec_run.run.hotness);
}

#[test]
fn sweep_writes_traces_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse_str("policy = hot_temporal, ondemand\nseeds = 0\nmax_new_tokens = 6\n").unwrap();
    cfg.trace_dir = Some(dir.path().to_path_buf());
    run_experiment(&cfg).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for n in &names {
        assert!(ingest_trace(&dir.path().join(n)).unwrap().total_routed() > 0);
    }
}

/// Slower migration makes offloading dominate, which is where speculation pays off most.
#[test]
fn speedup_over_ondemand_grows_at_ssd_bandwidth() {
    let cfg = ExperimentConfig::parse_str(
        "gate_skew = 1.5\npolicy = hot_temporal, ondemand\nbatch = 8\nbandwidth = 64e9, 6e9\nseeds = 0..6\nmax_new_tokens = 24\n",
    )
    .unwrap();
    let rows = run_experiment(&cfg).unwrap();
    let tps = |policy: &str, bw: f64| {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| r.policy == policy && r.bandwidth == bw)
            .map(|r| r.tokens_per_sec)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let fast = tps("hot_temporal", 64e9) / tps("ondemand", 64e9);
    let slow = tps("hot_temporal", 6e9) / tps("ondemand", 6e9);
    assert!(slow > fast, "speedup at 6e9 {slow:.3} vs 64e9 {fast:.3}");
}
