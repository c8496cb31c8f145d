//! Versioned CSV traces.
//!
//! The first line is `# ibpd-trace v<version> <kind>`, the second the column header,
//! then one row per recorded iteration. Floats use the shortest representation that
//! reads back to the same value, so identical runs give identical bytes.

use std::fs;
use std::path::Path;

use ibpd::km::FixedPointRow;
use ibpd::pd::PdRow;

use crate::error::{BenchError, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

const MAGIC: &str = "# ibpd-trace";

pub const FIXED_POINT_COLUMNS: [&str; 9] = [
    "iteration",
    "residual_w",
    "residual_x",
    "step_norm",
    "alpha",
    "lambda",
    "active_blocks",
    "mask_bits",
    "block_evals",
];

pub const PRIMAL_DUAL_COLUMNS: [&str; 9] = [
    "iteration",
    "primal_residual",
    "dual_residual",
    "objective",
    "active_primal",
    "active_dual",
    "evals_prox",
    "evals_grad",
    "evals_linop",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    FixedPoint,
    PrimalDual,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::FixedPoint => "fixed-point",
            TraceKind::PrimalDual => "primal-dual",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            TraceKind::FixedPoint => &FIXED_POINT_COLUMNS,
            TraceKind::PrimalDual => &PRIMAL_DUAL_COLUMNS,
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "fixed-point" => Some(TraceKind::FixedPoint),
            "primal-dual" => Some(TraceKind::PrimalDual),
            _ => None,
        }
    }
}

fn render(kind: TraceKind, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = format!("{MAGIC} v{TRACE_SCHEMA_VERSION} {}\n", kind.name());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(kind.columns()).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory flush")).expect("ascii"));
    out
}

pub fn fixed_point_trace(rows: &[FixedPointRow]) -> String {
    render(
        TraceKind::FixedPoint,
        rows.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.residual_w.to_string(),
                r.residual_x.to_string(),
                r.step_norm.to_string(),
                r.alpha.to_string(),
                r.lambda.to_string(),
                r.active_blocks.to_string(),
                r.mask_bits.to_string(),
                r.block_evals.to_string(),
            ]
        }),
    )
}

pub fn primal_dual_trace(rows: &[PdRow]) -> String {
    render(
        TraceKind::PrimalDual,
        rows.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.primal_residual.to_string(),
                r.dual_residual.to_string(),
                r.objective.to_string(),
                r.active_primal.to_string(),
                r.active_dual.to_string(),
                r.evals_prox.to_string(),
                r.evals_grad.to_string(),
                r.evals_linop.to_string(),
            ]
        }),
    )
}

pub fn write_trace(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| BenchError::io(path.display(), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub kind: TraceKind,
    pub rows: Vec<Vec<String>>,
}

impl TraceFile {
    /// Values of one column; `None` if the column does not exist or a cell is not a number.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.kind.columns().iter().position(|c| *c == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }
}

/// Parses a trace, refusing any schema version other than the current one.
pub fn parse_trace(text: &str, location: &str) -> Result<TraceFile> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let head = first
        .strip_prefix(MAGIC)
        .ok_or_else(|| BenchError::parse(location, "missing trace header line"))?;
    let mut parts = head.split_whitespace();
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| BenchError::parse(location, "malformed schema version"))?;
    if version != TRACE_SCHEMA_VERSION {
        return Err(BenchError::parse(
            location,
            format!("trace schema v{version} does not match the supported v{TRACE_SCHEMA_VERSION}"),
        ));
    }
    let kind = parts
        .next()
        .and_then(TraceKind::from_name)
        .ok_or_else(|| BenchError::parse(location, "unknown trace kind"))?;
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| BenchError::parse(location, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != kind.columns() {
        return Err(BenchError::parse(location, format!("unexpected columns {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| BenchError::parse(location, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(TraceFile { kind, rows })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path.display(), e))?;
    parse_trace(&text, &path.display().to_string())
}
