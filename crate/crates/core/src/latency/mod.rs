//! Garbled-circuit latency model: nonlinearity costs in ReLUOps (the cost of
//! one scalar ReLU), per-model nonlinearity census, and Pareto frontiers.

mod census;
mod cost;
mod pareto;

pub use census::{
    census_of_model, census_of_switches, latency_estimate, CensusEntry, LatencyReport, LayerCensus,
    NonlinearityCensus,
};
pub use cost::{
    builtin_cost_table, cost_of, Anchor, CostTable, CostTag, ScalingRule, MAX_EXTRAPOLATION,
};
pub use pareto::{pareto_frontier, read_points_csv, write_pareto_csv, ParetoPoint};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("unknown cost tag `{0}`")]
    UnknownTag(String),
    #[error("vector length must be at least 1")]
    ZeroLength,
    #[error("no anchor for {tag}({n}); nearest is {tag}({nearest}) and scaling is limited to {MAX_EXTRAPOLATION}x, add an override for {tag}({n})")]
    Extrapolation {
        tag: CostTag,
        n: usize,
        nearest: usize,
    },
    #[error("cost table has no anchor for {0}")]
    MissingAnchor(CostTag),
    #[error("invalid anchor {tag}({n}) = {reluops}: costs must be positive")]
    InvalidAnchor {
        tag: CostTag,
        n: usize,
        reluops: f64,
    },
    #[error("model switches are not binarized")]
    NotBinarized,
    #[error("switch masks do not match the model config")]
    SwitchShape,
    #[error("pareto frontier of an empty point set")]
    EmptyInput,
    #[error("invalid point `{label}`: {msg}")]
    InvalidPoint { label: String, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
