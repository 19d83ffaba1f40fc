use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

use super::metrics::MetricsReport;

/// The CSV header, byte for byte.
pub const CSV_HEADER: &str = "scenario,seed,candidate,outcome,retry,cycles";

/// One decision. `candidate` is a hex address, or an index for scenarios
/// that are not address searches; `outcome` is `tp`, `fp`, `fn`, `tn` or an
/// informational tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub scenario: String,
    pub seed: u64,
    pub candidate: String,
    pub outcome: String,
    pub retry: u64,
    pub cycles: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for TraceFormat {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "json" => Ok(TraceFormat::Json),
            other => Err(ConfigError::Invalid(format!("unknown trace format {other:?} (expected csv or json)"))),
        }
    }
}

pub fn to_csv(rows: &[TraceRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize to csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8");
    format!("{CSV_HEADER}\n{body}")
}

pub fn parse_csv(text: &str) -> Result<Vec<TraceRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Everything but host timing, so two runs of one config compare equal.
pub fn to_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn render(report: &MetricsReport, format: TraceFormat) -> String {
    match format {
        TraceFormat::Csv => to_csv(&report.rows),
        TraceFormat::Json => to_json(report),
    }
}

pub fn emit_trace(report: &MetricsReport, format: TraceFormat, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render(report, format).as_bytes())
}
