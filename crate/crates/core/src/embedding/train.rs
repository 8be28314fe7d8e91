//! Step one: joint training of extractor and classifier on clean crops.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{sample_segment, Corpus, Split};
use crate::autodiff::{AdamConfig, AdamState, Mode, Tape, Tensor};
use crate::embedding::classifier::{argmax, Classifier};
use crate::embedding::extractor::{Extractor, ExtractorConfig, Pass, ARCHITECTURE};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::store::Archive;

/// How the classifier is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierTraining {
    /// Trained together with the extractor through one loss.
    Joint,
    /// The extractor is trained with a throwaway classifier; a fresh
    /// classifier is then fitted on frozen embeddings.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepOneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    /// Crops drawn from every training utterance per epoch.
    pub crops_per_utterance: usize,
    /// Fixed crops per test utterance for the held-out accuracy.
    pub holdout_crops: usize,
    pub classifier_hidden: usize,
    pub classifier_training: ClassifierTraining,
    pub adam: AdamConfig,
}

impl Default for StepOneConfig {
    fn default() -> Self {
        StepOneConfig {
            epochs: 20,
            batch_size: 32,
            crop_frames: 200,
            crops_per_utterance: 1,
            holdout_crops: 5,
            classifier_hidden: 512,
            classifier_training: ClassifierTraining::Joint,
            adam: AdamConfig::default(),
        }
    }
}

impl StepOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if self.crop_frames == 0 || self.crops_per_utterance == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("crop_frames, crops_per_utterance and classifier_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_accuracy: Option<f64>,
}

/// Extractor plus classifier, with the speaker label table they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOneModel {
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub speakers: Vec<String>,
    pub seed: u64,
    pub optimizer: Option<(AdamState, AdamState)>,
}

const KIND: &str = "checkpoint";
const MODEL_ARCH: &str = "residual-tdnn+classifier";

impl StepOneModel {
    pub fn init(config: &ExtractorConfig, hidden: usize, speakers: Vec<String>, seed: u64) -> Result<Self> {
        let extractor = Extractor::new(config.clone(), &mut stream(seed, Purpose::ExtractorInit, 0))?;
        let classifier = Classifier::new(
            config.embedding_dim,
            hidden,
            speakers.len(),
            &mut stream(seed, Purpose::ClassifierInit, 0),
        )?;
        Ok(StepOneModel {
            extractor,
            classifier,
            speakers,
            seed,
            optimizer: None,
        })
    }

    fn archive(&self, with_optimizer: bool) -> Result<Archive> {
        let mut a = Archive::new(KIND, MODEL_ARCH, self.seed);
        a.speakers = Some(self.speakers.clone());
        a.set_meta("extractor_architecture", ARCHITECTURE)?;
        self.extractor.to_archive(&mut a, "extractor.")?;
        self.classifier.to_archive(&mut a, "classifier.")?;
        if let (true, Some((ex, cl))) = (with_optimizer, &self.optimizer) {
            a.push_optimizer("extractor", &self.extractor.params, ex);
            a.push_optimizer("classifier", &self.classifier.params, cl);
        }
        Ok(a)
    }

    /// Identifies the trained weights, independent of optimizer state.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(self.archive(false)?.payload_sha256())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.archive(true)?.to_bytes()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect(KIND, MODEL_ARCH)?;
        let speakers = a
            .speakers
            .clone()
            .ok_or_else(|| Error::Corrupt("speaker table missing".into()))?;
        let extractor = Extractor::from_archive(a, "extractor.")?;
        let classifier = Classifier::from_archive(a, "classifier.")?;
        if classifier.n_speakers != speakers.len() || classifier.embedding_dim != extractor.config.embedding_dim {
            return Err(Error::Corrupt("classifier does not fit the extractor or speaker table".into()));
        }
        let optimizer = if a.optimizers.is_empty() {
            None
        } else {
            Some((
                a.load_optimizer("extractor", &extractor.params)?,
                a.load_optimizer("classifier", &classifier.params)?,
            ))
        };
        Ok(StepOneModel {
            extractor,
            classifier,
            speakers,
            seed: a.seed,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn label_of(&self, speaker: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::MissingBankEntry(speaker.to_string()))
    }
}

/// Fixed crops of the test split used to track held-out accuracy.
struct Holdout {
    /// (utterance id, label, window starts)
    items: Vec<(String, usize, Vec<usize>)>,
    crop: usize,
}

impl Holdout {
    fn new(corpus: &Corpus, crop: usize, per_utt: usize, seed: u64) -> Result<Option<Self>> {
        let mut rng = stream(seed, Purpose::Holdout, 0);
        let mut items = Vec::new();
        for e in corpus.manifest.in_split(Split::Test) {
            let t = corpus.features(&e.utterance_id)?.num_frames();
            if t < crop {
                continue;
            }
            let starts = (0..per_utt).map(|_| rng.gen_range(0..=t - crop)).collect();
            items.push((e.utterance_id.clone(), corpus.label(&e.utterance_id)?, starts));
        }
        Ok(if items.is_empty() || per_utt == 0 { None } else { Some(Holdout { items, crop }) })
    }

    fn accuracy(&self, corpus: &Corpus, model: &StepOneModel) -> Result<f64> {
        let per_utt: Vec<(usize, usize)> = self
            .items
            .par_iter()
            .map(|(utt, label, starts)| {
                let cache = model.extractor.frame_cache(corpus.features(utt)?.frames())?;
                let windows: Vec<(usize, usize)> = starts.iter().map(|&s| (s, self.crop)).collect();
                let emb = model.extractor.embed_windows(&cache, &windows)?;
                let pred = model.classifier.predict(&emb)?;
                Ok((pred.iter().filter(|p| **p == *label).count(), pred.len()))
            })
            .collect::<Result<_>>()?;
        let (hit, total) = per_utt.iter().fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
        Ok(hit as f64 / total as f64)
    }
}

/// Training utterances long enough for one crop, with their labels.
fn training_items(corpus: &Corpus, crop: usize) -> Result<Vec<(String, usize)>> {
    let mut items = Vec::new();
    for e in corpus.manifest.in_split(Split::Train) {
        if corpus.features(&e.utterance_id)?.num_frames() >= crop {
            items.push((e.utterance_id.clone(), corpus.label(&e.utterance_id)?));
        } else {
            log::warn!("{} is shorter than {crop} frames; skipped", e.utterance_id);
        }
    }
    if items.is_empty() {
        return Err(Error::NoUsableSegments("training split".into()));
    }
    Ok(items)
}

/// Trains on `corpus` and returns the model with its per-epoch log.
/// `on_epoch` sees each record as soon as it is produced.
pub fn train_step_one(
    corpus: &Corpus,
    extractor: &ExtractorConfig,
    cfg: &StepOneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(StepOneModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if extractor.input_dim != crate::audio::NUM_CEPS {
        return Err(Error::Config(format!(
            "extractor input_dim must be {} to match the features",
            crate::audio::NUM_CEPS
        )));
    }
    if cfg.crop_frames < extractor.min_frames() {
        return Err(Error::Config(format!(
            "crop_frames {} is below the extractor minimum {}",
            cfg.crop_frames,
            extractor.min_frames()
        )));
    }
    let speakers = corpus.manifest.speakers.clone();
    let mut model = StepOneModel::init(extractor, cfg.classifier_hidden, speakers, seed)?;
    let mut opt_ex = AdamState::new(&model.extractor.params, cfg.adam);
    let mut opt_cl = AdamState::new(&model.classifier.params, cfg.adam);
    let items = training_items(corpus, cfg.crop_frames)?;
    let holdout = Holdout::new(corpus, cfg.crop_frames, cfg.holdout_crops, seed)?;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = stream(seed, Purpose::StepOneBatches, epoch as u64);
        let mut order: Vec<&(String, usize)> = items.iter().flat_map(|it| std::iter::repeat(it).take(cfg.crops_per_utterance)).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let mut crops = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (utt, label) in batch {
                crops.push(sample_segment(corpus.features(utt)?, cfg.crop_frames, &mut rng)?.into_frames());
                labels.push(*label);
            }
            let x = Tensor::vstack(&crops.iter().collect::<Vec<_>>())?;
            let loss = joint_step(&mut model, &mut opt_ex, &mut opt_cl, x, &labels)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen.max(1) as f64;
        let holdout_accuracy = match (&holdout, cfg.classifier_training) {
            (Some(h), ClassifierTraining::Joint) => Some(h.accuracy(corpus, &model)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss,
            holdout_accuracy,
        };
        log::info!("step one epoch {epoch}: loss {loss:.4} holdout {holdout_accuracy:?}");
        on_epoch(&record);
        log.push(record);
    }

    if cfg.classifier_training == ClassifierTraining::Probe && cfg.epochs > 0 {
        let (classifier, opt, probe_log) = fit_probe(corpus, &model.extractor, &items, cfg, seed, holdout.as_ref(), &model.speakers)?;
        model.classifier = classifier;
        opt_cl = opt;
        for (r, p) in log.iter_mut().zip(probe_log) {
            r.holdout_accuracy = p;
            on_epoch(r);
        }
    }
    model.optimizer = Some((opt_ex, opt_cl));
    Ok((model, log))
}

fn joint_step(model: &mut StepOneModel, opt_ex: &mut AdamState, opt_cl: &mut AdamState, x: Tensor, labels: &[usize]) -> Result<f64> {
    let segments = labels.len();
    let mut tape = Tape::new();
    let bx = model.extractor.params.bind(&mut tape, true);
    let bc = model.classifier.params.bind(&mut tape, true);
    let xv = tape.constant(x);
    // The running statistics are moved out so the layers can be borrowed
    // alongside them.
    let mut ex_stats = std::mem::take(&mut model.extractor.stats);
    let mut cl_stats = std::mem::take(&mut model.classifier.stats);
    let emb = {
        let mut pass = Pass {
            p: &bx,
            stats: &mut ex_stats,
            mode: Mode::Train,
        };
        model.extractor.forward(&mut tape, &mut pass, xv, segments)
    };
    let logits = emb.and_then(|emb| {
        let mut pass = Pass {
            p: &bc,
            stats: &mut cl_stats,
            mode: Mode::Train,
        };
        model.classifier.logits_var(&mut tape, &mut pass, emb)
    });
    model.extractor.stats = ex_stats;
    model.classifier.stats = cl_stats;
    let logits = logits?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    opt_ex.step(&mut model.extractor.params, &bx.grads(&tape))?;
    opt_cl.step(&mut model.classifier.params, &bc.grads(&tape))?;
    Ok(value)
}

type ProbeFit = (Classifier, AdamState, Vec<Option<f64>>);

/// Fits a fresh classifier on frozen eval-mode embeddings of random crops.
fn fit_probe(
    corpus: &Corpus,
    extractor: &Extractor,
    items: &[(String, usize)],
    cfg: &StepOneConfig,
    seed: u64,
    holdout: Option<&Holdout>,
    speakers: &[String],
) -> Result<ProbeFit> {
    let caches: Vec<Tensor> = items
        .par_iter()
        .map(|(utt, _)| extractor.frame_cache(corpus.features(utt)?.frames()))
        .collect::<Result<_>>()?;
    let mut classifier = Classifier::new(
        extractor.config.embedding_dim,
        cfg.classifier_hidden,
        speakers.len(),
        &mut stream(seed, Purpose::ClassifierInit, 1),
    )?;
    let mut opt = AdamState::new(&classifier.params, cfg.adam);
    let mut accs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(seed, Purpose::StepOneBatches, (1 << 32) + epoch as u64);
        let mut order: Vec<usize> = (0..items.len()).flat_map(|i| std::iter::repeat(i).take(cfg.crops_per_utterance)).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = caches[i].rows() + extractor.config.shrinkage();
                let start = rng.gen_range(0..=t - cfg.crop_frames);
                rows.push(extractor.embed_windows(&caches[i], &[(start, cfg.crop_frames)])?);
            }
            let emb = Tensor::vstack(&rows.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].1).collect();
            let mut tape = Tape::new();
            let bc = classifier.params.bind(&mut tape, true);
            let e = tape.constant(emb);
            let mut stats = std::mem::take(&mut classifier.stats);
            let logits = {
                let mut pass = Pass {
                    p: &bc,
                    stats: &mut stats,
                    mode: Mode::Train,
                };
                classifier.logits_var(&mut tape, &mut pass, e)
            };
            classifier.stats = stats;
            let logits = logits?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            opt.step(&mut classifier.params, &bc.grads(&tape))?;
        }
        let acc = match holdout {
            Some(h) => {
                let probe = StepOneModel {
                    extractor: extractor.clone(),
                    classifier: classifier.clone(),
                    speakers: speakers.to_vec(),
                    seed,
                    optimizer: None,
                };
                Some(h.accuracy(corpus, &probe)?)
            }
            None => None,
        };
        accs.push(acc);
    }
    Ok((classifier, opt, accs))
}

/// Accuracy of `model` on fixed clean crops of the test split.
pub fn holdout_accuracy(corpus: &Corpus, model: &StepOneModel, crop: usize, per_utt: usize, seed: u64) -> Result<f64> {
    Holdout::new(corpus, crop, per_utt, seed)?
        .ok_or(Error::EmptyTestSet)?
        .accuracy(corpus, model)
}

/// Most probable label for each row, via the model's classifier.
pub fn predict_labels(model: &StepOneModel, embeddings: &Tensor) -> Result<Vec<usize>> {
    let logits = model.classifier.logits(embeddings)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row_slice(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SynthParams;

    fn tiny() -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 20,
            frame_dim: 16,
            residual_blocks: 1,
            pool_dim: 24,
            segment_dim: 16,
            embedding_dim: 16,
        }
    }

    fn corpus() -> Corpus {
        Corpus::synthetic(&SynthParams {
            speakers: 4,
            utts_per_speaker: 4,
            duration_s: 0.6,
            seed: 5,
        })
        .unwrap()
    }

    fn cfg(epochs: usize) -> StepOneConfig {
        StepOneConfig {
            epochs,
            batch_size: 4,
            crop_frames: 30,
            crops_per_utterance: 4,
            holdout_crops: 2,
            classifier_hidden: 16,
            ..StepOneConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = StepOneConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.crop_frames), (20, 32, 200));
        assert_eq!(c.adam.beta1, 0.95);
    }

    #[test]
    fn same_seed_same_trajectory_and_bytes() {
        let c = corpus();
        let (m1, l1) = train_step_one(&c, &tiny(), &cfg(3), 7, |_| {}).unwrap();
        let (m2, l2) = train_step_one(&c, &tiny(), &cfg(3), 7, |_| {}).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.to_bytes().unwrap(), m2.to_bytes().unwrap());
        let (_, l3) = train_step_one(&c, &tiny(), &cfg(3), 8, |_| {}).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let (_, log) = train_step_one(&corpus(), &tiny(), &cfg(6), 1, |_| {}).unwrap();
        assert!(log[5].loss < log[0].loss, "{log:?}");
        assert!(log.iter().all(|r| r.holdout_accuracy.is_some()));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (m, log) = train_step_one(&corpus(), &tiny(), &cfg(0), 3, |_| {}).unwrap();
        assert!(log.is_empty());
        let init = StepOneModel::init(&tiny(), 16, m.speakers.clone(), 3).unwrap();
        assert_eq!(m.extractor, init.extractor);
    }

    #[test]
    fn probe_mode_refits_classifier() {
        let c = StepOneConfig {
            classifier_training: ClassifierTraining::Probe,
            ..cfg(2)
        };
        let (m, log) = train_step_one(&corpus(), &tiny(), &c, 2, |_| {}).unwrap();
        assert!(log.iter().all(|r| r.holdout_accuracy.is_some()));
        assert_eq!(m.classifier.n_speakers, 4);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (m, _) = train_step_one(&corpus(), &tiny(), &cfg(1), 4, |_| {}).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = StepOneModel::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.optimizer.is_some());
        assert_eq!(back.fingerprint().unwrap(), m.fingerprint().unwrap());
    }

    #[test]
    fn crop_below_minimum_is_a_config_error() {
        let c = StepOneConfig { crop_frames: 4, ..cfg(1) };
        assert!(matches!(train_step_one(&corpus(), &tiny(), &c, 0, |_| {}), Err(Error::Config(_))));
    }
}
