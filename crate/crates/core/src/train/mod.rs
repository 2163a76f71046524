//! Switch search: penalized training, distillation, penalty scheduling,
//! binarization and finetuning.

mod loss;
mod optim;
mod schedule;
mod search;

pub use loss::{kd_loss, privit_loss};
pub use optim::{cosine_lr, Adam};
pub use schedule::{
    apply_strategy, schedule_penalties, Binarization, IncrementRule, SearchConfig, SearchState,
    Strategy,
};
pub use search::{
    accuracy, finetune, layerwise_taylorize_baseline, per_class_accuracy, privit_search,
    teacher_logits, train_epoch, train_supervised, EpochStats, FinetuneRow, HistoryRow, PassConfig,
    SearchOutcome, SupervisedConfig, SupervisedRow,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::vit::VitError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("budgets not met after {epochs} epochs")]
    NonConvergence {
        epochs: usize,
        history: Vec<HistoryRow>,
    },
    #[error("finetuning requires both switch masks frozen and binary")]
    NotBinarized,
    #[error("cannot taylorize {k} layers of a {layers}-layer model")]
    LayerOutOfRange { k: usize, layers: usize },
    #[error("teacher logits {got:?} do not match the dataset, expected {expected:?}")]
    TeacherShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}
