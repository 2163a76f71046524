use std::path::Path;

use serde::Serialize;

use super::{io_err, ExperimentError};
use crate::latency::{cost_of, CostTable, NonlinearityCensus};
use crate::vit::{Model, ModelConfig, SwitchSet};

/// Serializes `rows` as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Active nonlinearities of one layer next to the all-nonlinear model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionRow {
    pub layer: usize,
    pub softmax_rows: u64,
    pub base_softmax_rows: u64,
    pub gelu_elements: u64,
    pub base_gelu_elements: u64,
}

/// Per-layer active counts of a binarized model.
pub fn report_distribution(model: &Model) -> Result<Vec<DistributionRow>, ExperimentError> {
    if !model.switches.is_binarized() {
        return Err(crate::latency::LatencyError::NotBinarized.into());
    }
    distribution_of(&model.config, &model.switches)
}

fn distribution_of(
    cfg: &ModelConfig,
    switches: &SwitchSet,
) -> Result<Vec<DistributionRow>, ExperimentError> {
    let census = crate::latency::census_of_switches(cfg, switches)?;
    let mut full = SwitchSet::new(cfg, switches.epsilon);
    full.binarize(crate::vit::MaskSelection::Both);
    let base = crate::latency::census_of_switches(cfg, &full)?;
    Ok(census
        .layers
        .iter()
        .zip(&base.layers)
        .enumerate()
        .map(|(layer, (c, b))| DistributionRow {
            layer,
            softmax_rows: c.softmax_rows,
            base_softmax_rows: b.softmax_rows,
            gelu_elements: c.gelu_elements,
            base_gelu_elements: b.gelu_elements,
        })
        .collect())
}

/// Per-entry cost breakdown, ending with a `total` row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub tag: String,
    pub n: usize,
    pub count: u64,
    pub unit_reluops: f64,
    pub reluops: f64,
    /// `exact` for a table anchor, `estimate` for a scaled cost.
    pub source: String,
}

pub fn latency_rows(
    census: &NonlinearityCensus,
    table: &CostTable,
) -> Result<Vec<LatencyRow>, ExperimentError> {
    let mut rows = Vec::new();
    let mut total = 0.0;
    let mut all_exact = true;
    for e in census.entries() {
        let unit = cost_of(e.tag, e.n, table)?;
        let exact = table.is_exact(e.tag, e.n);
        all_exact &= exact;
        total += unit * e.count as f64;
        rows.push(LatencyRow {
            tag: e.tag.name().to_string(),
            n: e.n,
            count: e.count,
            unit_reluops: unit,
            reluops: unit * e.count as f64,
            source: if exact { "exact" } else { "estimate" }.to_string(),
        });
    }
    rows.push(LatencyRow {
        tag: "total".into(),
        n: 0,
        count: rows.iter().map(|r| r.count).sum(),
        unit_reluops: 0.0,
        reluops: total,
        source: if all_exact { "exact" } else { "estimate" }.to_string(),
    });
    Ok(rows)
}

/// Spread of per-class accuracy differences `a − b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DegradationStats {
    pub max_diff: f64,
    pub mean_diff: f64,
    /// Population variance.
    pub variance: f64,
}

pub fn degradation_stats(a: &[f64], b: &[f64]) -> Result<DegradationStats, ExperimentError> {
    if a.len() != b.len() {
        return Err(ExperimentError::Config(format!(
            "per-class accuracy lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(ExperimentError::Config("no classes".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let variance = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max_diff = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DegradationStats {
        max_diff,
        mean_diff: mean,
        variance,
    })
}
