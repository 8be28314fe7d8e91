//! Step two: de-mixing heads over frozen mixture embeddings.

mod checks;
mod head;
mod train;

pub use checks::variant_suite;
pub use head::{DemixHead, DemixVariant, Direction, FinalActivation};
pub use train::{
    embed_mixture, embed_mixtures, mixture_features, set_mae, test_set, train_head, training_pools, MixtureSet,
    StepTwoConfig, StepTwoLog, TrainedHead,
};

#[cfg(test)]
mod tests;
