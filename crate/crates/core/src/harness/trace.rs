//! Routing traces: one CSV row per (step, sequence, MoE layer) with the raw
//! top-K experts, plus the hotness analysis built from them.
//!
//! ```text
//! # moe-trace v1 layers=4 experts=16 top_k=2
//! step,sequence,layer,experts
//! 0,0,0,"3,11"
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drafting::{header_field, skewness, HotnessCounter};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::run::TraceRow;

pub const TRACE_HEADER: &str = "# moe-trace v1";

/// A parsed trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFile {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub rows: Vec<TraceRow>,
}

impl TraceFile {
    pub fn hotness(&self) -> HotnessCounter {
        let mut counter = HotnessCounter::new(self.layers, self.experts);
        for row in &self.rows {
            counter.record_picks(row.layer, &row.experts);
        }
        counter
    }
}

pub fn write_trace_to<W: Write>(mut out: W, spec: &ModelSpec, rows: &[TraceRow]) -> Result<()> {
    writeln!(
        out,
        "{TRACE_HEADER} layers={} experts={} top_k={}",
        spec.num_moe_layers(),
        spec.experts_per_block,
        spec.top_k
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "sequence", "layer", "experts"])?;
    for r in rows {
        let experts = r
            .experts
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        w.write_record([
            r.step.to_string(),
            r.sequence.to_string(),
            r.layer.to_string(),
            experts,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, spec: &ModelSpec, rows: &[TraceRow]) -> Result<()> {
    write_trace_to(BufWriter::new(File::create(path)?), spec, rows)
}

pub fn read_trace_from<R: BufRead>(mut input: R, path: &Path) -> Result<TraceFile> {
    let bad = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header = String::new();
    input.read_line(&mut header)?;
    let meta = header
        .trim()
        .strip_prefix(TRACE_HEADER)
        .ok_or_else(|| bad(1, format!("expected header `{TRACE_HEADER} ...`")))?;
    let field = |key: &str| -> Result<usize> {
        header_field(meta, key)
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| bad(1, format!("missing or zero {key}=")))
    };
    let (layers, experts, top_k) = (field("layers")?, field("experts")?, field("top_k")?);
    if top_k > experts {
        return Err(bad(1, format!("top_k {top_k} exceeds experts {experts}")));
    }

    let mut reader = csv::Reader::from_reader(input);
    let columns = reader.headers()?.clone();
    if columns.iter().collect::<Vec<_>>() != ["step", "sequence", "layer", "experts"] {
        return Err(bad(2, "expected columns step,sequence,layer,experts".into()));
    }
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 3;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(bad(line, format!("expected 4 fields, got {}", record.len())));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| bad(line, format!("{what}: {e}")))
        };
        let layer = num(&record[2], "layer")?;
        if layer >= layers {
            return Err(bad(line, format!("layer {layer} out of range (layers={layers})")));
        }
        let picks = record[3]
            .split(',')
            .map(|s| num(s, "expert"))
            .collect::<Result<Vec<_>>>()?;
        if picks.len() != top_k {
            return Err(bad(line, format!("expected {top_k} experts, got {}", picks.len())));
        }
        if let Some(e) = picks.iter().find(|&&e| e >= experts) {
            return Err(bad(line, format!("expert {e} out of range (experts={experts})")));
        }
        rows.push(TraceRow {
            step: num(&record[0], "step")?,
            sequence: num(&record[1], "sequence")?,
            layer,
            experts: picks,
        });
    }
    Ok(TraceFile {
        layers,
        experts,
        top_k,
        rows,
    })
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    read_trace_from(BufReader::new(File::open(path)?), path)
}

/// Load a trace file into a hotness counter.
pub fn ingest_trace(path: &Path) -> Result<HotnessCounter> {
    Ok(read_trace(path)?.hotness())
}

/// Share of one layer's picks that went to one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCell {
    pub layer: usize,
    pub expert: usize,
    pub count: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub routed_tokens: u64,
    /// Mean share of picks captured by the hottest quarter of experts.
    pub skewness: f64,
    /// Hottest experts per layer, most frequent first.
    pub top_experts: Vec<Vec<usize>>,
    #[serde(skip)]
    pub frequencies: Vec<FrequencyCell>,
}

pub fn analyze_trace(counter: &HotnessCounter, top_n: usize) -> Result<TraceReport> {
    if counter.total_routed() == 0 {
        return Err(Error::EmptyTrace);
    }
    let mut frequencies = Vec::new();
    for (layer, counts) in counter.counts.iter().enumerate() {
        let total: u64 = counts.iter().sum();
        for (expert, &count) in counts.iter().enumerate() {
            frequencies.push(FrequencyCell {
                layer,
                expert,
                count,
                share: if total > 0 { count as f64 / total as f64 } else { 0.0 },
            });
        }
    }
    Ok(TraceReport {
        routed_tokens: counter.total_routed(),
        skewness: skewness(counter, 0.25)?,
        top_experts: (0..counter.num_layers())
            .map(|l| counter.top_experts(l, top_n))
            .collect(),
        frequencies,
    })
}

/// Heatmap table `layer,expert,count,share`.
pub fn write_heatmap<W: Write>(out: W, report: &TraceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for cell in &report.frequencies {
        w.serialize(cell)?;
    }
    w.flush()?;
    Ok(())
}
