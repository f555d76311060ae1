//! CSV and JSON report emission.

use std::io::Write;

use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::scenario::ReportFormat;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CSV_COLUMNS: [&str; 17] = [
    "config_label",
    "policy",
    "n_contexts",
    "n_streams",
    "oversubscription",
    "seed",
    "jps",
    "dmr_hp",
    "dmr_lp",
    "resp_hp_mean",
    "resp_hp_p95",
    "resp_lp_mean",
    "resp_lp_p95",
    "accepted_hp",
    "accepted_lp",
    "rejected_hp",
    "rejected_lp",
];

fn csv_row(r: &MetricsReport) -> [String; 17] {
    [
        r.config_label.clone(),
        r.policy.map(|p| p.to_string()).unwrap_or_default(),
        r.n_contexts.to_string(),
        r.n_streams.to_string(),
        r.oversubscription.to_string(),
        r.seed.to_string(),
        r.jps.to_string(),
        r.hp.dmr.to_string(),
        r.lp.dmr.to_string(),
        r.hp.response.mean.to_string(),
        r.hp.response.p95.to_string(),
        r.lp.response.mean.to_string(),
        r.lp.response.p95.to_string(),
        r.hp.accepted.to_string(),
        r.lp.accepted.to_string(),
        r.hp.rejected.to_string(),
        r.lp.rejected.to_string(),
    ]
}

pub fn emit_report<W: Write>(reports: &[MetricsReport], format: ReportFormat, out: W) -> Result<(), ReportError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS)?;
            for r in reports {
                w.write_record(csv_row(r))?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, reports)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn parse_json_reports(text: &str) -> Result<Vec<MetricsReport>, ReportError> {
    Ok(serde_json::from_str(text)?)
}
