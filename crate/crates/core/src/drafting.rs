//! Draft-model construction: which experts are pinned, how off-draft gate
//! picks are substituted, and how expert hotness is measured.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelWeights, TokenActivation};

/// Versioned first line of an affinity file.
pub const AFFINITY_HEADER: &str = "# moe-affinity v1";

/// Per MoE layer, the symmetric E×E matrix of L2 distances between experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityTable {
    experts: usize,
    /// Row-major E×E per layer.
    distances: Vec<Vec<f64>>,
}

impl AffinityTable {
    /// Build from flattened expert parameter vectors, `vectors[layer][expert]`.
    pub fn from_expert_vectors(vectors: &[Vec<Vec<f64>>]) -> Self {
        let experts = vectors.first().map_or(0, Vec::len);
        let distances = vectors
            .iter()
            .map(|layer| {
                assert_eq!(layer.len(), experts, "every layer needs the same expert count");
                let mut m = vec![0.0; experts * experts];
                for i in 0..experts {
                    for j in (i + 1)..experts {
                        let dist = l2_distance(&layer[i], &layer[j]);
                        m[i * experts + j] = dist;
                        m[j * experts + i] = dist;
                    }
                }
                m
            })
            .collect();
        Self { experts, distances }
    }

    pub fn num_layers(&self) -> usize {
        self.distances.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }

    pub fn distance(&self, layer: usize, i: usize, j: usize) -> f64 {
        self.distances[layer][i * self.experts + j]
    }

    /// Write as `layer,i,j,distance` rows (upper triangle) after a versioned header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{AFFINITY_HEADER} layers={} experts={}",
            self.num_layers(),
            self.experts
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "i", "j", "distance"])?;
        for layer in 0..self.num_layers() {
            for i in 0..self.experts {
                for j in (i + 1)..self.experts {
                    w.write_record([
                        layer.to_string(),
                        i.to_string(),
                        j.to_string(),
                        self.distance(layer, i, j).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_csv(file, path)
    }

    pub fn read_csv<R: BufRead>(mut input: R, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = String::new();
        input.read_line(&mut header)?;
        let meta = header
            .trim()
            .strip_prefix(AFFINITY_HEADER)
            .ok_or_else(|| bad(1, format!("expected header `{AFFINITY_HEADER} ...`")))?;
        let layers: usize = header_field(meta, "layers").ok_or_else(|| bad(1, "missing layers=".into()))?;
        let experts: usize =
            header_field(meta, "experts").ok_or_else(|| bad(1, "missing experts=".into()))?;

        let mut distances = vec![vec![0.0; experts * experts]; layers];
        let mut seen = vec![vec![false; experts * experts]; layers];
        let mut reader = csv::Reader::from_reader(input);
        for (n, row) in reader.records().enumerate() {
            let line = n + 3;
            let row = row?;
            if row.len() != 4 {
                return Err(bad(line, format!("expected 4 fields, got {}", row.len())));
            }
            let parse = |i: usize| {
                row[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| bad(line, format!("field {i}: {e}")))
            };
            let (layer, i, j) = (parse(0)?, parse(1)?, parse(2)?);
            let dist: f64 = row[3]
                .trim()
                .parse()
                .map_err(|e| bad(line, format!("distance: {e}")))?;
            if layer >= layers || i >= j || j >= experts {
                return Err(bad(line, format!("index out of range: ({layer},{i},{j})")));
            }
            if !(dist.is_finite() && dist >= 0.0) {
                return Err(bad(line, format!("invalid distance {dist}")));
            }
            distances[layer][i * experts + j] = dist;
            distances[layer][j * experts + i] = dist;
            seen[layer][i * experts + j] = true;
        }
        let missing = seen
            .iter()
            .map(|s| {
                (0..experts)
                    .flat_map(|i| ((i + 1)..experts).map(move |j| (i, j)))
                    .filter(|&(i, j)| !s[i * experts + j])
                    .count()
            })
            .sum::<usize>();
        if missing > 0 {
            return Err(bad(0, format!("{missing} expert pairs missing")));
        }
        Ok(Self { experts, distances })
    }
}

pub(crate) fn header_field<T: FromStr>(meta: &str, key: &str) -> Option<T> {
    meta.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances between experts' concatenated up‖down projections, per MoE layer.
pub fn build_affinity_table(weights: &ModelWeights) -> AffinityTable {
    let vectors: Vec<Vec<Vec<f64>>> = weights
        .moe_blocks()
        .iter()
        .map(|b| b.experts.iter().map(|e| e.flattened().collect()).collect())
        .collect();
    AffinityTable::from_expert_vectors(&vectors)
}

/// The member of `draft_set \ excluded` closest to `raw_pick`; lowest index on ties.
pub fn nearest_draft_expert(
    table: &AffinityTable,
    layer: usize,
    raw_pick: usize,
    draft_set: &[usize],
    excluded: &[usize],
) -> Result<usize> {
    draft_set
        .iter()
        .copied()
        .filter(|e| !excluded.contains(e))
        .min_by(|&a, &b| {
            table
                .distance(layer, raw_pick, a)
                .total_cmp(&table.distance(layer, raw_pick, b))
                .then(a.cmp(&b))
        })
        .ok_or(Error::NoCandidate { layer })
}

/// Per-layer expert activation counts over a window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotnessCounter {
    /// `counts[layer][expert]`
    pub counts: Vec<Vec<u64>>,
    /// Tokens routed through each layer in the window.
    pub routed_tokens: Vec<u64>,
}

impl HotnessCounter {
    pub fn new(layers: usize, experts: usize) -> Self {
        Self {
            counts: vec![vec![0; experts]; layers],
            routed_tokens: vec![0; layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn num_experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Count one token's gate picks in one layer.
    pub fn record_picks(&mut self, layer: usize, picks: &[usize]) {
        for &e in picks {
            self.counts[layer][e] += 1;
        }
        self.routed_tokens[layer] += 1;
    }

    /// Count the raw (pre-remap) gate picks of every token given.
    pub fn record_activations<'a>(&mut self, tokens: impl IntoIterator<Item = &'a TokenActivation>) {
        for tok in tokens {
            for (layer, picks) in tok.raw.iter().enumerate() {
                self.record_picks(layer, picks);
            }
        }
    }

    pub fn total_routed(&self) -> u64 {
        self.routed_tokens.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_routed() == 0
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().flatten().for_each(|c| *c = 0);
        self.routed_tokens.iter_mut().for_each(|c| *c = 0);
    }

    /// Up to `n` experts of `layer` by descending count, lowest index on ties.
    pub fn top_experts(&self, layer: usize, n: usize) -> Vec<usize> {
        let counts = &self.counts[layer];
        let mut idx: Vec<usize> = (0..counts.len()).collect();
        idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftPolicy {
    /// N uniform picks per layer at startup, fixed thereafter.
    Random,
    /// Top-N by warmup hotness, fixed thereafter.
    HotGlobal,
    /// Top-N by the previous verification phase, refreshed every step.
    HotTemporal,
}

impl DraftPolicy {
    pub const ALL: [DraftPolicy; 3] = [Self::Random, Self::HotGlobal, Self::HotTemporal];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::HotGlobal => "hot_global",
            Self::HotTemporal => "hot_temporal",
        }
    }
}

impl fmt::Display for DraftPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DraftPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown draft policy `{s}`")))
    }
}

/// The pinned draft experts of every MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftState {
    pub policy: DraftPolicy,
    pub n: usize,
    /// Sorted ascending, one set per MoE layer; empty before the first selection.
    pub sets: Vec<Vec<usize>>,
}

impl DraftState {
    pub fn new(policy: DraftPolicy, n: usize, layers: usize) -> Self {
        Self {
            policy,
            n,
            sets: vec![Vec::new(); layers],
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.sets.iter().all(|s| !s.is_empty())
    }
}

/// Choose the next draft-expert sets.
///
/// Random and hot-global choose once (when `current` is still empty) and keep
/// that choice. Hot-temporal re-ranks every call by `counter`. A hot ranking
/// only draws from experts with a non-zero count; missing slots are filled
/// from the current set, then by lowest index. A layer whose counts are all
/// zero keeps its current set.
pub fn select_draft_experts<R: Rng + ?Sized>(
    policy: DraftPolicy,
    counter: &HotnessCounter,
    current: &DraftState,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = current.n;
    let experts = counter.num_experts();
    if n > experts {
        return Err(Error::Domain(format!("N = {n} exceeds E = {experts}")));
    }
    let mut next = Vec::with_capacity(counter.num_layers());
    for layer in 0..counter.num_layers() {
        let cur = &current.sets[layer];
        let fixed_policy = matches!(policy, DraftPolicy::Random | DraftPolicy::HotGlobal);
        let zero = counter.counts[layer].iter().all(|&c| c == 0);
        let set = if !cur.is_empty() && (fixed_policy || zero) {
            cur.clone()
        } else if policy == DraftPolicy::Random {
            let mut s = rand::seq::index::sample(rng, experts, n).into_vec();
            s.sort_unstable();
            s
        } else {
            hottest_with_fill(&counter.counts[layer], n, cur)
        };
        next.push(set);
    }
    Ok(next)
}

fn hottest_with_fill(counts: &[u64], n: usize, current: &[usize]) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..counts.len()).filter(|&e| counts[e] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ranked.truncate(n);
    for e in current.iter().copied().chain(0..counts.len()) {
        if ranked.len() == n {
            break;
        }
        if !ranked.contains(&e) {
            ranked.push(e);
        }
    }
    ranked.sort_unstable();
    ranked
}

/// Mean over layers of the share of routed picks landing on the hottest
/// `ceil(top_fraction · E)` experts.
pub fn skewness(counter: &HotnessCounter, top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Domain(format!("top_fraction {top_fraction} not in (0, 1]")));
    }
    let experts = counter.num_experts();
    let top = (top_fraction * experts as f64).ceil() as usize;
    let mut shares = Vec::new();
    for counts in &counter.counts {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let mut sorted = counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let head: u64 = sorted[..top].iter().sum();
        shares.push(head as f64 / total as f64);
    }
    if shares.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(shares.iter().sum::<f64>() / shares.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Three experts with two parameters each: [0,0], [3,4], [0,1].
    fn stub() -> AffinityTable {
        AffinityTable::from_expert_vectors(&[vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]]])
    }

    #[test]
    fn stub_distances_by_hand() {
        let t = stub();
        assert_eq!(t.distance(0, 0, 0), 0.0);
        assert_eq!(t.distance(0, 0, 1), 5.0);
        assert_eq!(t.distance(0, 0, 2), 1.0);
        assert_eq!(t.distance(0, 1, 2), 18f64.sqrt());
        assert_eq!(t.distance(0, 2, 1), t.distance(0, 1, 2));
    }

    #[test]
    fn identical_experts_have_zero_distance() {
        let t = AffinityTable::from_expert_vectors(&[vec![vec![1.0, 2.0], vec![1.0, 2.0]]]);
        assert_eq!(t.distance(0, 0, 1), 0.0);
    }

    #[test]
    fn nearest_examples() {
        let t = stub();
        assert_eq!(nearest_draft_expert(&t, 0, 1, &[0, 1], &[]).unwrap(), 1);
        assert_eq!(nearest_draft_expert(&t, 0, 0, &[1], &[]).unwrap(), 1);
        assert_eq!(nearest_draft_expert(&t, 0, 1, &[0, 2], &[]).unwrap(), 2);
        assert_eq!(nearest_draft_expert(&t, 0, 1, &[0, 2], &[2]).unwrap(), 0);
        assert!(matches!(
            nearest_draft_expert(&t, 0, 1, &[2], &[2]),
            Err(Error::NoCandidate { layer: 0 })
        ));
    }

    #[test]
    fn nearest_breaks_ties_by_index() {
        let t = AffinityTable::from_expert_vectors(&[vec![vec![0.0], vec![1.0], vec![-1.0]]]);
        assert_eq!(nearest_draft_expert(&t, 0, 0, &[2, 1], &[]).unwrap(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let t = AffinityTable::from_expert_vectors(&[
            vec![vec![0.1, 0.2], vec![0.3, -0.7], vec![1.0 / 3.0, 2.0]],
            vec![vec![5.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.25]],
        ]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# moe-affinity v1 layers=2 experts=3\nlayer,i,j,distance\n"));
        let back = AffinityTable::read_csv(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn malformed_affinity_reports_line() {
        let text = "# moe-affinity v1 layers=1 experts=2\nlayer,i,j,distance\n0,1,0,2.0\n";
        let err = AffinityTable::read_csv(text.as_bytes(), Path::new("a.csv")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = AffinityTable::read_csv("nope\n".as_bytes(), Path::new("a.csv")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn record_activations_counts_raw_picks() {
        let mut c = HotnessCounter::new(1, 8);
        c.record_activations(&[]);
        assert_eq!(c, HotnessCounter::new(1, 8));
        let tok = TokenActivation {
            position: 0,
            raw: vec![vec![3, 5]],
            routed: vec![vec![0, 1]],
        };
        c.record_activations([&tok]);
        assert_eq!(c.counts[0][3], 1);
        assert_eq!(c.counts[0][5], 1);
        assert_eq!(c.counts[0][0], 0);
        let toks = vec![tok; 9];
        c.record_activations(&toks);
        assert_eq!(c.counts[0].iter().sum::<u64>(), 20);
        assert_eq!(c.routed_tokens[0], 10);
    }

    fn counter_from(counts: Vec<Vec<u64>>) -> HotnessCounter {
        let routed_tokens = vec![0; counts.len()];
        HotnessCounter {
            counts,
            routed_tokens,
        }
    }

    #[test]
    fn select_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counter = counter_from(vec![vec![5, 3, 9, 1]]);
        let empty = DraftState::new(DraftPolicy::HotTemporal, 2, 1);
        let sel = select_draft_experts(DraftPolicy::HotTemporal, &counter, &empty, &mut rng).unwrap();
        assert_eq!(sel, vec![vec![0, 2]]);

        let mut cur = DraftState::new(DraftPolicy::HotTemporal, 2, 1);
        cur.sets = vec![vec![1, 3]];
        let zero = counter_from(vec![vec![0; 4]]);
        for policy in DraftPolicy::ALL {
            assert_eq!(
                select_draft_experts(policy, &zero, &cur, &mut rng).unwrap(),
                vec![vec![1, 3]]
            );
        }

        let full = DraftState::new(DraftPolicy::Random, 4, 1);
        for policy in DraftPolicy::ALL {
            assert_eq!(
                select_draft_experts(policy, &counter, &full, &mut rng).unwrap(),
                vec![vec![0, 1, 2, 3]]
            );
        }

        let too_many = DraftState::new(DraftPolicy::Random, 5, 1);
        assert!(select_draft_experts(DraftPolicy::Random, &counter, &too_many, &mut rng).is_err());
    }

    #[test]
    fn temporal_fill_prefers_current_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counter = counter_from(vec![vec![0, 0, 4, 0, 0, 0]]);
        let mut cur = DraftState::new(DraftPolicy::HotTemporal, 3, 1);
        cur.sets = vec![vec![1, 4, 5]];
        let sel = select_draft_experts(DraftPolicy::HotTemporal, &counter, &cur, &mut rng).unwrap();
        assert_eq!(sel, vec![vec![1, 2, 4]]);
    }

    #[test]
    fn fixed_policies_keep_their_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counter = counter_from(vec![vec![1, 2, 3, 4]]);
        let mut cur = DraftState::new(DraftPolicy::HotGlobal, 2, 1);
        cur.sets = vec![vec![0, 1]];
        for policy in [DraftPolicy::Random, DraftPolicy::HotGlobal] {
            assert_eq!(
                select_draft_experts(policy, &counter, &cur, &mut rng).unwrap(),
                vec![vec![0, 1]]
            );
        }
        assert_eq!(
            select_draft_experts(DraftPolicy::HotTemporal, &counter, &cur, &mut rng).unwrap(),
            vec![vec![2, 3]]
        );
    }

    #[test]
    fn skewness_examples() {
        assert_eq!(skewness(&counter_from(vec![vec![7; 16]]), 0.25).unwrap(), 0.25);
        let mut one_hot = vec![0; 16];
        one_hot[5] = 100;
        assert_eq!(skewness(&counter_from(vec![one_hot]), 0.25).unwrap(), 1.0);
        assert_eq!(
            skewness(&counter_from(vec![vec![70, 10, 10, 10]]), 0.25).unwrap(),
            0.70
        );
        assert!(matches!(
            skewness(&counter_from(vec![vec![0; 4]]), 0.25),
            Err(Error::EmptyTrace)
        ));
        let two = counter_from(vec![vec![70, 10, 10, 10], vec![25, 25, 25, 25]]);
        assert!((skewness(&two, 0.25).unwrap() - 0.475).abs() < 1e-15);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in DraftPolicy::ALL {
            assert_eq!(p.as_str().parse::<DraftPolicy>().unwrap(), p);
        }
        assert!("lru".parse::<DraftPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn nearest_always_returns_a_draft_member(
            points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6),
            mask in prop::collection::vec(any::<bool>(), 6),
            raw in 0usize..6,
        ) {
            let t = AffinityTable::from_expert_vectors(&[points]);
            let draft: Vec<usize> = (0..6).filter(|&i| mask[i]).collect();
            prop_assume!(!draft.is_empty());
            let pick = nearest_draft_expert(&t, 0, raw, &draft, &[]).unwrap();
            prop_assert!(draft.contains(&pick));
            if draft.contains(&raw) {
                prop_assert_eq!(pick, raw);
            }
            prop_assert_eq!(nearest_draft_expert(&t, 0, pick, &draft, &[]).unwrap(), pick);
        }

        #[test]
        fn skewness_bounded_and_grows_with_concentration(
            counts in prop::collection::vec(0u64..50, 8),
            extra in 1u64..500,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let s = skewness(&counter_from(vec![counts.clone()]), 0.25).unwrap();
            prop_assert!((0.25..=1.0).contains(&s));
            let mut concentrated = counts.clone();
            let hottest = (0..8).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
            concentrated[hottest] += extra;
            let s2 = skewness(&counter_from(vec![concentrated]), 0.25).unwrap();
            prop_assert!(s2 >= s);
            if s < 1.0 {
                prop_assert!(s2 > s);
            }
        }
    }
}
