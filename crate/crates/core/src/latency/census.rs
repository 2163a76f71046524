use std::collections::BTreeMap;

use super::cost::{cost_of, CostTable, CostTag};
use super::LatencyError;
use crate::vit::{AttentionVariant, GeluGranularity, Model, ModelConfig, SwitchSet};

/// Nonlinearities of one encoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCensus {
    /// Attention rows evaluated with softmax.
    pub softmax_rows: u64,
    /// Attention rows evaluated with the polynomial surrogate.
    pub taylor_rows: u64,
    pub layernorms: u64,
    /// Scalar GELU evaluations.
    pub gelu_elements: u64,
}

/// `count` evaluations of `tag` on length-`n` vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CensusEntry {
    pub tag: CostTag,
    pub n: usize,
    pub count: u64,
}

/// Per-layer nonlinearity counts of a binarized model.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearityCensus {
    /// Length of an attention row (tokens).
    pub row_len: usize,
    /// Length of a layernorm input (embedding width).
    pub embed_dim: usize,
    pub taylor_tag: CostTag,
    pub layers: Vec<LayerCensus>,
    /// Layernorm applications after the last encoder layer.
    pub final_layernorms: u64,
}

impl NonlinearityCensus {
    pub fn total(&self) -> LayerCensus {
        let mut t = self
            .layers
            .iter()
            .fold(LayerCensus::default(), |acc, l| LayerCensus {
                softmax_rows: acc.softmax_rows + l.softmax_rows,
                taylor_rows: acc.taylor_rows + l.taylor_rows,
                layernorms: acc.layernorms + l.layernorms,
                gelu_elements: acc.gelu_elements + l.gelu_elements,
            });
        t.layernorms += self.final_layernorms;
        t
    }

    /// Aggregated `(tag, length, count)` entries, zero counts dropped.
    pub fn entries(&self) -> Vec<CensusEntry> {
        let t = self.total();
        [
            (CostTag::Softmax, self.row_len, t.softmax_rows),
            (self.taylor_tag, self.row_len, t.taylor_rows),
            (CostTag::Layernorm, self.embed_dim, t.layernorms),
            (CostTag::Gelu, 1, t.gelu_elements),
        ]
        .into_iter()
        .filter(|&(_, _, count)| count > 0)
        .map(|(tag, n, count)| CensusEntry { tag, n, count })
        .collect()
    }
}

fn taylor_tag(variant: AttentionVariant) -> CostTag {
    match variant {
        AttentionVariant::Squared => CostTag::Square,
        AttentionVariant::Scale => CostTag::ScaleAttnRow,
        AttentionVariant::Uniform => CostTag::UniformAttnRow,
    }
}

/// Census of a model with binarized switches, for one image.
pub fn census_of_model(model: &Model) -> Result<NonlinearityCensus, LatencyError> {
    if !model.switches.is_binarized() {
        return Err(LatencyError::NotBinarized);
    }
    census_of_switches(&model.config, &model.switches)
}

/// Census from binary switch masks alone, so that configurations too large
/// to instantiate can still be counted.
pub fn census_of_switches(
    cfg: &ModelConfig,
    switches: &SwitchSet,
) -> Result<NonlinearityCensus, LatencyError> {
    if !switches.is_binary() {
        return Err(LatencyError::NotBinarized);
    }
    if switches.check_shape(cfg).is_err() {
        return Err(LatencyError::SwitchShape);
    }
    let (l, n) = (cfg.num_layers, cfg.num_tokens());
    let per_gelu_layer = switches.gelu.len() / l;
    let per_softmax_layer = switches.softmax.len() / l;
    let scale = match cfg.gelu_granularity {
        GeluGranularity::PerToken => cfg.mlp_dim as u64,
        GeluGranularity::PerElement => 1,
    };
    let ones = |s: &[f64]| s.iter().filter(|&&v| v == 1.0).count() as u64;
    let layers = (0..l)
        .map(|i| {
            let c = &switches.gelu.data()[i * per_gelu_layer..(i + 1) * per_gelu_layer];
            let s = &switches.softmax.data()[i * per_softmax_layer..(i + 1) * per_softmax_layer];
            let exact = ones(s);
            LayerCensus {
                softmax_rows: exact,
                taylor_rows: per_softmax_layer as u64 - exact,
                layernorms: 2 * n as u64,
                gelu_elements: ones(c) * scale,
            }
        })
        .collect();
    Ok(NonlinearityCensus {
        row_len: n,
        embed_dim: cfg.embed_dim,
        taylor_tag: taylor_tag(cfg.attn_variant),
        layers,
        final_layernorms: 1,
    })
}

/// Weighted sum of nonlinearity counts by their unit costs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub total_reluops: f64,
    pub by_tag: BTreeMap<CostTag, f64>,
    /// True when some unit cost was scaled from an anchor of another length.
    pub estimated: bool,
}

impl LatencyReport {
    /// Latency in millions of ReLUOps.
    pub fn latency_m(&self) -> f64 {
        self.total_reluops / 1e6
    }
}

/// Latency of a list of census entries (or of [`NonlinearityCensus::entries`]).
pub fn latency_estimate(
    entries: &[CensusEntry],
    table: &CostTable,
) -> Result<LatencyReport, LatencyError> {
    let mut by_tag = BTreeMap::new();
    let mut estimated = false;
    let mut total = 0.0;
    for e in entries {
        let unit = cost_of(e.tag, e.n, table)?;
        estimated |= !table.is_exact(e.tag, e.n);
        let c = unit * e.count as f64;
        *by_tag.entry(e.tag).or_insert(0.0) += c;
        total += c;
    }
    Ok(LatencyReport {
        total_reluops: total,
        by_tag,
        estimated,
    })
}
