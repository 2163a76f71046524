pub mod autodiff;
pub mod rng;

pub use autodiff::{AutodiffError, Graph, Tensor, Var};
pub use rng::Rng;
pub mod data;
pub mod experiment;
pub mod latency;
pub mod train;
pub mod vit;
