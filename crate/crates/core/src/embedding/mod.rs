//! Step one: extractor, classifier, training and the clean embedding bank.

mod bank;
mod classifier;
mod extractor;
mod train;

pub use bank::{build_bank, mean_rows, EmbeddingBank, DEFAULT_SEGMENTS};
pub use classifier::{argmax, softmax_in_place, Classifier};
pub use extractor::{Extractor, ExtractorConfig, ARCHITECTURE, BLOCK_CONTEXT, TDNN1_CONTEXT, UNIT_CONTEXT};
pub(crate) use extractor::{push_dense, Dense};
#[cfg(test)]
pub(crate) use extractor::Pass;
pub use train::{
    holdout_accuracy, predict_labels, train_step_one, ClassifierTraining, EpochRecord, StepOneConfig, StepOneModel,
};
