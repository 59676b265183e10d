//! Results tables as CSV or JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::OutputFormat;
use super::experiment::ResultRow;
use crate::error::{Error, Result};

pub const RESULT_COLUMNS: &[&str] = &[
    "policy",
    "batch",
    "gamma",
    "n_draft",
    "bandwidth",
    "seed",
    "tau",
    "tokens_per_sec",
    "bytes_total",
    "bytes_spec",
    "bytes_verify",
    "lambda",
    "s_eq1",
    "s_eq2",
];

/// Write `rows` in `format`. Refuses an empty table.
pub fn emit_results<W: Write>(rows: &[ResultRow], format: OutputFormat, mut out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyRows);
    }
    if rows.iter().any(|r| r.text_hash.is_some() != rows[0].text_hash.is_some()) {
        return Err(Error::InvariantBreach("text_hash present on only some rows".into()));
    }
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn write_results(rows: &[ResultRow], format: OutputFormat, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    emit_results(rows, format, &mut buf)?;
    BufWriter::new(File::create(path)?).write_all(&buf)?;
    Ok(())
}
