//! City, tally, report and manifest files.

use std::io::{Read, Write};
use std::path::Path;

use prefchain_core::metrics::EvaluationReport;
use prefchain_core::mobility::{CityModel, MobilityError, TrafficTally};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

fn invalid(path: &Path, message: impl ToString) -> FormatError {
    FormatError::Invalid { path: path.display().to_string(), message: message.to_string() }
}

pub fn read_city(path: &Path) -> Result<CityModel, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| invalid(path, e))
}

pub fn write_city(path: &Path, city: &CityModel) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(city).map_err(|e| invalid(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub const EDGE_TALLY_HEADER: [&str; 3] = ["edge_id", "hour", "count"];
pub const POI_TALLY_HEADER: [&str; 3] = ["poi_id", "hour", "count"];

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

fn write_rows<W: Write>(out: W, header: [&str; 3], rows: impl Iterator<Item = (u32, u8, u64)>) -> std::io::Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header)?;
    for (id, hour, count) in rows {
        w.write_record([id.to_string(), hour.to_string(), count.to_string()])?;
    }
    w.flush()
}

/// Non-zero cells in ascending (id, hour) order.
pub fn write_edge_tally<W: Write>(tally: &TrafficTally, out: W) -> std::io::Result<()> {
    write_rows(out, EDGE_TALLY_HEADER, tally.edge_rows())
}

pub fn write_poi_tally<W: Write>(tally: &TrafficTally, out: W) -> std::io::Result<()> {
    write_rows(out, POI_TALLY_HEADER, tally.poi_rows())
}

fn read_rows<R: Read>(input: R, header: [&str; 3]) -> Result<Vec<(u32, u8, u64)>, String> {
    let mut r = csv::Reader::from_reader(input);
    let found = r.headers().map_err(|e| e.to_string())?;
    if found.iter().collect::<Vec<_>>() != header {
        return Err(format!("expected header {}", header.join(",")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = || format!("row {}: malformed tally row", i + 1);
        rows.push((
            field(0).parse().map_err(|_| bad())?,
            field(1).parse().map_err(|_| bad())?,
            field(2).parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}

/// Loads reference tallies exported for the same city. Either file may be
/// absent, leaving that half empty.
pub fn read_tally(city: &CityModel, edges: Option<&Path>, pois: Option<&Path>) -> Result<TrafficTally, FormatError> {
    let mut tally = TrafficTally::new(city);
    type Add = fn(&mut TrafficTally, u32, u8, u64) -> Result<(), MobilityError>;
    let parts: [(Option<&Path>, [&str; 3], Add); 2] = [
        (edges, EDGE_TALLY_HEADER, TrafficTally::add_edge_count),
        (pois, POI_TALLY_HEADER, TrafficTally::add_poi_count),
    ];
    for (path, header, add) in parts {
        let Some(path) = path else { continue };
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        for (id, hour, count) in read_rows(file, header).map_err(|e| invalid(path, e))? {
            add(&mut tally, id, hour, count).map_err(|e| invalid(path, e))?;
        }
    }
    Ok(tally)
}

/// Long-format rows: predictor, dimension, output, metric, value. Each
/// report ends with its two mean rows.
pub fn write_report_csv<W: Write>(reports: &[(String, EvaluationReport)], out: W) -> std::io::Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["predictor", "dimension", "output", "metric", "value"])?;
    for (name, report) in reports {
        for e in &report.entries {
            w.write_record([name, &e.dimension, &e.output, "kld", &e.kld.to_string()])?;
            w.write_record([name, &e.dimension, &e.output, "mae", &e.mae.to_string()])?;
        }
        w.write_record([name, "mean", "all", "kld", &report.mean_kld.to_string()])?;
        w.write_record([name, "mean", "all", "mae", &report.mean_mae.to_string()])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub predictor: String,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

pub fn report_json(reports: &[(String, EvaluationReport)]) -> String {
    let named: Vec<NamedReport> =
        reports.iter().map(|(n, r)| NamedReport { predictor: n.clone(), report: r.clone() }).collect();
    let mut s = serde_json::to_string_pretty(&named).unwrap_or_default();
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> std::io::Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["size", "seed", "metric", "value"])?;
    for r in rows {
        w.write_record([r.size.to_string(), r.seed.to_string(), r.metric.clone(), r.value.to_string()])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub embedding_provider: String,
    pub llm_provider: String,
    pub versions: Versions,
    /// Output files written next to the manifest.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub prefchain: String,
    pub prefchain_core: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self { prefchain: env!("CARGO_PKG_VERSION").into(), prefchain_core: prefchain_core::VERSION.into() }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| invalid(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))
}
