//! Seed derivation. Every random choice in the crate draws from a ChaCha8
//! stream keyed by an experiment seed plus a fixed per-purpose label, so
//! adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    SpeakerRecipe = 1,
    Utterance = 2,
    ExtractorInit = 3,
    ClassifierInit = 4,
    StepOneBatches = 5,
    Holdout = 6,
    Bank = 7,
    Pairs = 8,
    DemixInit = 9,
    StepTwoBatches = 10,
    GradCheck = 11,
    MixPool = 12,
    MixCrops = 13,
}
