//! Metrics CSV files and the correlation statistics used by reports.
//!
//! Rows are any serde record type; floats go through the shortest
//! round-trip formatter, so reading a file back yields identical values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::blocks::RoutingStats;
use crate::error::{Error, Result};

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("metrics csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("metrics csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("metrics csv", e.to_string()))
}

pub fn from_csv_str<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::format("metrics csv", e.to_string())))
        .collect()
}

/// Writes rows atomically. An empty slice still writes nothing but an
/// empty file, since headers come from the first record.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::io::write_atomic(path, to_csv_string(rows)?.as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_csv_str(&crate::io::read_string(path)?)
}

/// One expert of one MoE layer at one retraining step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub epoch: usize,
    pub step: usize,
    pub layer: usize,
    pub expert: usize,
    pub token_fraction: f64,
    pub mean_gate_score: f64,
}

pub fn routing_rows(epoch: usize, step: usize, layers: &[RoutingStats]) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for (layer, s) in layers.iter().enumerate() {
        for (expert, (&f, &g)) in s.token_fraction.iter().zip(&s.mean_gate_score).enumerate() {
            rows.push(RoutingRow {
                epoch,
                step,
                layer,
                expert,
                token_fraction: f,
                mean_gate_score: g,
            });
        }
    }
    rows
}

/// Pearson correlation; `NaN` when either side has zero variance or the
/// lengths differ.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// 1-based ranks with ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson over tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}
