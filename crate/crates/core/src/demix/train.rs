//! Mixture embeddings through the frozen extractor and head training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{Corpus, FeatureMatrix, Mfcc, Split};
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::demix::head::{DemixHead, DemixVariant, Direction, FinalActivation};
use crate::embedding::{EmbeddingBank, Extractor};
use crate::error::{Error, Result};
use crate::mixer::{epoch_pairs, mix_at_snr, MixSpec};
use crate::rng::{stream, Purpose};
use crate::store::Archive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepTwoConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Distinct sets of training mixtures; epoch `e` uses set `e mod pools`.
    pub mixture_pools: usize,
    /// Embeddings per training mixture: the whole mixture plus
    /// `crops_per_mixture - 1` random crops.
    pub crops_per_mixture: usize,
    pub crop_frames: usize,
    pub final_activation: FinalActivation,
    pub adam: AdamConfig,
}

impl Default for StepTwoConfig {
    fn default() -> Self {
        StepTwoConfig {
            epochs: 50,
            batch_size: 32,
            mixture_pools: 8,
            crops_per_mixture: 4,
            crop_frames: 200,
            final_activation: FinalActivation::Relu,
            adam: AdamConfig::default(),
        }
    }
}

impl StepTwoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mixture_pools == 0 || self.crops_per_mixture == 0 || self.crop_frames == 0 {
            return Err(Error::Config(
                "batch_size, mixture_pools, crops_per_mixture and crop_frames must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixture embeddings with the pair each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSet {
    pub snr_db: f64,
    pub pairs: Vec<MixSpec>,
    /// (target speaker, interferer speaker) per row.
    pub speakers: Vec<(String, String)>,
    pub embeddings: Tensor,
}

impl MixtureSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Bank rows of the known and the predicted speaker of every row.
    pub fn bank_targets(&self, bank: &EmbeddingBank, direction: Direction) -> Result<(Tensor, Tensor)> {
        let d = bank.dim();
        let mut known = Vec::with_capacity(self.len() * d);
        let mut predicted = Vec::with_capacity(self.len() * d);
        for (t, i) in &self.speakers {
            let (k, p) = direction.roles(t, i);
            known.extend_from_slice(bank.get(k)?);
            predicted.extend_from_slice(bank.get(p)?);
        }
        Ok((Tensor::new(vec![self.len(), d], known)?, Tensor::new(vec![self.len(), d], predicted)?))
    }
}

/// Features of the mixture described by `spec`.
pub fn mixture_features(corpus: &Corpus, spec: &MixSpec, mfcc: &Mfcc) -> Result<FeatureMatrix> {
    let m = mix_at_snr(corpus.waveform(&spec.target_utt)?, corpus.waveform(&spec.interferer_utt)?, spec.snr_db)?;
    mfcc.compute(&m.waveform)
}

/// Eval-mode embedding of one whole mixture.
pub fn embed_mixture(extractor: &Extractor, corpus: &Corpus, spec: &MixSpec) -> Result<Vec<f64>> {
    let f = mixture_features(corpus, spec, &Mfcc::new())?;
    Ok(extractor.embed(f.frames())?.into_data())
}

/// Embeds every pair: the whole mixture first, then up to `crops - 1`
/// random `crop_frames` windows. `stream_index` keys the crop positions.
pub fn embed_mixtures(
    extractor: &Extractor,
    corpus: &Corpus,
    specs: &[MixSpec],
    crops: usize,
    crop_frames: usize,
    seed: u64,
    stream_index: u64,
) -> Result<MixtureSet> {
    if specs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let snr_db = specs[0].snr_db;
    let mfcc = Mfcc::new();
    let per_pair: Vec<(Tensor, (String, String))> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let speakers = (
                corpus.manifest.entry(&spec.target_utt)?.speaker_id.clone(),
                corpus.manifest.entry(&spec.interferer_utt)?.speaker_id.clone(),
            );
            if speakers.0 == speakers.1 {
                return Err(Error::Config(format!("{} and {} share a speaker", spec.target_utt, spec.interferer_utt)));
            }
            let f = mixture_features(corpus, spec, &mfcc)?;
            let t = f.num_frames();
            let cache = extractor.frame_cache(f.frames())?;
            let mut windows = vec![(0, t)];
            if t > crop_frames && crop_frames >= extractor.config.min_frames() {
                let mut rng = stream(seed, Purpose::MixCrops, (stream_index << 32) + i as u64);
                windows.extend((1..crops).map(|_| (rng.gen_range(0..=t - crop_frames), crop_frames)));
            }
            Ok((extractor.embed_windows(&cache, &windows)?, speakers))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    let mut speakers = Vec::new();
    for (spec, (emb, spk)) in specs.iter().zip(&per_pair) {
        for _ in 0..emb.rows() {
            pairs.push(spec.clone());
            speakers.push(spk.clone());
        }
    }
    let parts: Vec<&Tensor> = per_pair.iter().map(|(e, _)| e).collect();
    Ok(MixtureSet {
        snr_db,
        pairs,
        speakers,
        embeddings: Tensor::vstack(&parts)?,
    })
}

/// The training mixture sets for one SNR, shared by every head trained at it.
pub fn training_pools(extractor: &Extractor, corpus: &Corpus, snr_db: f64, cfg: &StepTwoConfig, seed: u64) -> Result<Vec<MixtureSet>> {
    cfg.validate()?;
    (0..cfg.mixture_pools)
        .map(|p| {
            let mut rng = stream(seed, Purpose::MixPool, p as u64);
            let specs = epoch_pairs(&corpus.manifest, Split::Train, snr_db, &mut rng)?;
            log::info!("embedding training mixture set {}/{} at {snr_db} dB", p + 1, cfg.mixture_pools);
            embed_mixtures(extractor, corpus, &specs, cfg.crops_per_mixture, cfg.crop_frames, seed, p as u64)
        })
        .collect()
}

/// Whole-mixture embeddings of evaluation pairs.
pub fn test_set(extractor: &Extractor, corpus: &Corpus, pairs: &[MixSpec]) -> Result<MixtureSet> {
    embed_mixtures(extractor, corpus, pairs, 1, 0, 0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTwoLog {
    /// MAE over the first mixture set before any update.
    pub initial_mae: f64,
    /// MAE over the first mixture set after the last update.
    pub final_mae: f64,
    /// Mean training MAE of each epoch.
    pub epoch_mae: Vec<f64>,
}

/// Mean absolute error of `head` over a whole set.
pub fn set_mae(head: &DemixHead, set: &MixtureSet, bank: &EmbeddingBank, direction: Direction) -> Result<f64> {
    let (known, target) = set.bank_targets(bank, direction)?;
    let pred = head.predict(&set.embeddings, &known)?;
    let total: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.numel() as f64)
}

fn init_index(variant: DemixVariant, direction: Direction) -> u64 {
    let v = DemixVariant::ALL.iter().position(|x| *x == variant).unwrap_or(0) as u64;
    let d = Direction::ALL.iter().position(|x| *x == direction).unwrap_or(0) as u64;
    v * 2 + d
}

/// Trains one head with MAE against bank embeddings of the predicted speaker.
pub fn train_head(
    variant: DemixVariant,
    pools: &[MixtureSet],
    bank: &EmbeddingBank,
    direction: Direction,
    cfg: &StepTwoConfig,
    seed: u64,
) -> Result<(DemixHead, StepTwoLog)> {
    cfg.validate()?;
    if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyTestSet);
    }
    let mut rng = stream(seed, Purpose::DemixInit, init_index(variant, direction));
    let mut head = DemixHead::new(variant, bank.dim(), cfg.final_activation, &mut rng)?;
    let targets: Vec<(Tensor, Tensor)> = pools.iter().map(|p| p.bank_targets(bank, direction)).collect::<Result<_>>()?;
    let initial_mae = set_mae(&head, &pools[0], bank, direction)?;
    let mut opt = AdamState::new(&head.params, cfg.adam);
    let mut epoch_mae = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let which = (epoch - 1) % pools.len();
        let (set, (known, target)) = (&pools[which], &targets[which]);
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::StepTwoBatches, epoch as u64));
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let pick = |t: &Tensor| -> Result<Tensor> {
                let d = t.cols();
                let data = batch.iter().flat_map(|&r| t.row_slice(r).iter().copied()).collect();
                Tensor::new(vec![batch.len(), d], data)
            };
            let mut tape = Tape::new();
            let p = head.params.bind(&mut tape, true);
            let m = tape.constant(pick(&set.embeddings)?);
            let k = tape.constant(pick(known)?);
            let t = tape.constant(pick(target)?);
            let y = head.forward(&mut tape, &p, m, k)?;
            let loss = tape.mae_loss(y, t)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "step two loss" });
            }
            tape.backward(loss)?;
            opt.step(&mut head.params, &p.grads(&tape))?;
            sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let mae = sum / seen as f64;
        log::debug!("{variant} {direction} epoch {epoch}: mae {mae:.5}");
        epoch_mae.push(mae);
    }
    let final_mae = set_mae(&head, &pools[0], bank, direction)?;
    Ok((
        head,
        StepTwoLog {
            initial_mae,
            final_mae,
            epoch_mae,
        },
    ))
}

/// A trained head with what it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: DemixHead,
    pub direction: Direction,
    pub snr_db: f64,
    pub seed: u64,
    pub extractor_fingerprint: String,
    pub bank_fingerprint: String,
    pub log: StepTwoLog,
}

impl TrainedHead {
    /// Conventional file name inside a heads directory.
    pub fn file_name(variant: DemixVariant, snr_db: f64, direction: Direction) -> String {
        format!("{}_{}_{}.sedm", variant.slug(), snr_db, direction.slug())
    }

    fn archive(&self) -> Result<Archive> {
        let mut a = self.head.archive(self.seed)?;
        a.set_meta("direction", self.direction)?;
        a.set_meta("snr_db", self.snr_db)?;
        a.set_meta("extractor_fingerprint", &self.extractor_fingerprint)?;
        a.set_meta("bank_fingerprint", &self.bank_fingerprint)?;
        a.set_meta("log", &self.log)?;
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.archive()?.to_bytes()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Ok(TrainedHead {
            head: DemixHead::from_archive(a)?,
            direction: a.meta("direction")?,
            snr_db: a.meta("snr_db")?,
            seed: a.seed,
            extractor_fingerprint: a.meta("extractor_fingerprint")?,
            bank_fingerprint: a.meta("bank_fingerprint")?,
            log: a.meta("log")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Refuses a head trained against a different extractor or bank.
    pub fn check_provenance(&self, extractor_fingerprint: &str, bank_fingerprint: &str) -> Result<()> {
        if self.extractor_fingerprint != extractor_fingerprint {
            return Err(Error::ProvenanceMismatch(format!(
                "head was trained on extractor {} but {} was supplied",
                self.extractor_fingerprint, extractor_fingerprint
            )));
        }
        if self.bank_fingerprint != bank_fingerprint {
            return Err(Error::ProvenanceMismatch(format!(
                "head was trained on bank {} but {} was supplied",
                self.bank_fingerprint, bank_fingerprint
            )));
        }
        Ok(())
    }
}
