//! Per-speaker mean embeddings over random clean training crops.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::audio::{Corpus, Split};
use crate::autodiff::Tensor;
use crate::embedding::extractor::Extractor;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::store::{sha256_hex, Archive};

pub const DEFAULT_SEGMENTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub speakers: Vec<String>,
    /// One row per speaker, in `speakers` order.
    pub embeddings: Tensor,
    pub segments_per_speaker: usize,
    pub crop_frames: usize,
    pub seed: u64,
    /// Fingerprint of the extractor the bank was built with.
    pub extractor_fingerprint: String,
}

const KIND: &str = "bank";
const ARCH: &str = "mean-embedding";

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index_of(&self, speaker: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::MissingBankEntry(speaker.to_string()))
    }

    pub fn get(&self, speaker: &str) -> Result<&[f64]> {
        Ok(self.embeddings.row_slice(self.index_of(speaker)?))
    }

    fn archive(&self) -> Result<Archive> {
        let mut a = Archive::new(KIND, ARCH, self.seed);
        a.speakers = Some(self.speakers.clone());
        a.set_meta("segments_per_speaker", self.segments_per_speaker)?;
        a.set_meta("crop_frames", self.crop_frames)?;
        a.set_meta("extractor_fingerprint", &self.extractor_fingerprint)?;
        a.push("embeddings", self.embeddings.clone());
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.archive()?.to_bytes()
    }

    /// Checksum of the serialized bank.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect(KIND, ARCH)?;
        let speakers = a
            .speakers
            .clone()
            .ok_or_else(|| Error::Corrupt("bank has no speaker-id table".into()))?;
        let embeddings = a.tensor("embeddings")?.clone();
        if embeddings.shape().len() != 2 || embeddings.rows() != speakers.len() {
            return Err(Error::Corrupt(format!(
                "bank table lists {} speakers but holds {:?} embeddings",
                speakers.len(),
                embeddings.shape()
            )));
        }
        Ok(EmbeddingBank {
            speakers,
            embeddings,
            segments_per_speaker: a.meta("segments_per_speaker")?,
            crop_frames: a.meta("crop_frames")?,
            seed: a.seed,
            extractor_fingerprint: a.meta("extractor_fingerprint")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Arithmetic mean of the rows of `t`, summed in row order.
pub fn mean_rows(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= t.rows() as f64);
    out
}

/// For every training-split speaker, averages eval-mode embeddings of
/// `segments` random `crop_frames` crops drawn across that speaker's
/// training utterances.
pub fn build_bank(
    extractor: &Extractor,
    extractor_fingerprint: &str,
    corpus: &Corpus,
    segments: usize,
    crop_frames: usize,
    seed: u64,
) -> Result<EmbeddingBank> {
    if segments == 0 {
        return Err(Error::Config("segments_per_speaker must be positive".into()));
    }
    if crop_frames < extractor.config.min_frames() {
        return Err(Error::Config(format!(
            "bank crop of {crop_frames} frames is below the extractor minimum {}",
            extractor.config.min_frames()
        )));
    }
    let by_speaker = corpus.manifest.by_speaker(Split::Train);
    let speakers: Vec<(&str, Vec<String>)> = by_speaker
        .iter()
        .map(|(s, es)| (*s, es.iter().map(|e| e.utterance_id.clone()).collect()))
        .collect();
    let rows: Vec<Vec<f64>> = speakers
        .par_iter()
        .map(|(speaker, utts)| {
            let usable: Vec<(&String, usize)> = utts
                .iter()
                .map(|u| Ok((u, corpus.features(u)?.num_frames())))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|(_, t)| *t >= crop_frames)
                .collect();
            if usable.is_empty() {
                return Err(Error::NoUsableSegments(speaker.to_string()));
            }
            let index = corpus.manifest.speaker_index(speaker).unwrap_or(0) as u64;
            let mut rng = stream(seed, Purpose::Bank, index);
            let picks: Vec<(usize, usize)> = (0..segments)
                .map(|_| {
                    let u = rng.gen_range(0..usable.len());
                    (u, rng.gen_range(0..=usable[u].1 - crop_frames))
                })
                .collect();
            let mut per_segment = Tensor::zeros(segments, extractor.config.embedding_dim);
            for (u, (utt, _)) in usable.iter().enumerate() {
                let slots: Vec<usize> = (0..segments).filter(|&k| picks[k].0 == u).collect();
                if slots.is_empty() {
                    continue;
                }
                let cache = extractor.frame_cache(corpus.features(utt)?.frames())?;
                let windows: Vec<(usize, usize)> = slots.iter().map(|&k| (picks[k].1, crop_frames)).collect();
                let emb = extractor.embed_windows(&cache, &windows)?;
                for (i, &k) in slots.iter().enumerate() {
                    let d = emb.cols();
                    per_segment.data_mut()[k * d..(k + 1) * d].copy_from_slice(emb.row_slice(i));
                }
            }
            Ok(mean_rows(&per_segment))
        })
        .collect::<Result<_>>()?;
    let dim = extractor.config.embedding_dim;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(EmbeddingBank {
        speakers: speakers.iter().map(|(s, _)| s.to_string()).collect(),
        embeddings: Tensor::new(vec![speakers.len(), dim], data)?,
        segments_per_speaker: segments,
        crop_frames,
        seed,
        extractor_fingerprint: extractor_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SynthParams;
    use crate::embedding::extractor::ExtractorConfig;

    fn bank(rows: Vec<f64>, speakers: &[&str]) -> EmbeddingBank {
        EmbeddingBank {
            speakers: speakers.iter().map(|s| s.to_string()).collect(),
            embeddings: Tensor::matrix(speakers.len(), rows.len() / speakers.len(), rows).unwrap(),
            segments_per_speaker: 200,
            crop_frames: 200,
            seed: 3,
            extractor_fingerprint: "abc".into(),
        }
    }

    #[test]
    fn mean_of_identical_rows_is_that_row() {
        let v = [0.1, -2.5, 3.0];
        let t = Tensor::matrix(4, 3, v.iter().cycle().take(12).cloned().collect()).unwrap();
        assert_eq!(mean_rows(&t), v.to_vec());
    }

    #[test]
    fn round_trip_preserves_order_and_values() {
        let b = bank(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &["zed", "amy"]);
        let back = EmbeddingBank::from_archive(&Archive::from_bytes(&b.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.get("amy").unwrap(), &[4.0, 5.0, 6.0]);
        assert!(matches!(back.get("bob"), Err(Error::MissingBankEntry(_))));
    }

    #[test]
    fn single_speaker_bank_is_valid() {
        let b = bank(vec![0.5, 0.25], &["solo"]);
        let back = EmbeddingBank::from_archive(&Archive::from_bytes(&b.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
    }

    #[test]
    fn missing_speaker_table_is_corrupt() {
        let b = bank(vec![0.5, 0.25], &["solo"]);
        let mut a = b.archive().unwrap();
        a.speakers = None;
        let err = EmbeddingBank::from_archive(&Archive::from_bytes(&a.to_bytes().unwrap()).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
    }

    #[test]
    fn bank_is_seed_deterministic_and_covers_train_speakers() {
        let corpus = Corpus::synthetic(&SynthParams {
            speakers: 3,
            utts_per_speaker: 4,
            duration_s: 0.5,
            seed: 2,
        })
        .unwrap();
        let cfg = ExtractorConfig {
            frame_dim: 8,
            residual_blocks: 1,
            pool_dim: 6,
            segment_dim: 8,
            embedding_dim: 5,
            ..ExtractorConfig::default()
        };
        let ex = Extractor::new(cfg, &mut stream(0, Purpose::ExtractorInit, 0)).unwrap();
        let a = build_bank(&ex, "fp", &corpus, 20, 25, 9).unwrap();
        let b = build_bank(&ex, "fp", &corpus, 20, 25, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.speakers, corpus.manifest.speakers);
        assert_eq!(a.dim(), 5);
        let c = build_bank(&ex, "fp", &corpus, 20, 25, 10).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
        assert!(matches!(build_bank(&ex, "fp", &corpus, 20, 60, 9), Err(Error::NoUsableSegments(_))));
    }
}
