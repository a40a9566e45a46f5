//! CSV output.
//!
//! Metrics: one row per episode with columns
//! `episode,return,normalized_score,mean_step_cost,length,success`
//! (`success` is empty where undefined).
//!
//! Heatmap: a header `feature,t0,t1,…`, then one row per feature holding its
//! acquisition frequency at each timestep.

use std::path::Path;

use super::{EpisodeMetrics, Heatmap, RolloutMetrics};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = [
    "episode",
    "return",
    "normalized_score",
    "mean_step_cost",
    "length",
    "success",
];

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("in-memory writer");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv encoding failed: {e}"))
}

pub fn metrics_csv(metrics: &RolloutMetrics) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for e in &metrics.episodes {
        let EpisodeMetrics {
            episode,
            ret,
            normalized_score,
            mean_step_cost,
            length,
            success,
        } = e;
        w.serialize((episode, ret, normalized_score, mean_step_cost, length, success))
            .map_err(csv_err)?;
    }
    Ok(finish(w))
}

pub fn heatmap_csv(h: &Heatmap) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header = vec!["feature".to_string()];
    header.extend((0..h.t_max()).map(|t| format!("t{t}")));
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in h.features.iter().zip(&h.freq) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    Ok(finish(w))
}

pub fn write_metrics(path: &Path, metrics: &RolloutMetrics) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics)?).map_err(|e| Error::io(path, e))
}

pub fn write_heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    std::fs::write(path, heatmap_csv(h)?).map_err(|e| Error::io(path, e))
}
