//! Two-speaker mixtures at a prescribed target-to-interferer SNR.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{CorpusManifest, ManifestEntry, Split, Waveform};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// One mixture recipe: target utterance plus an interferer from another speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub target_utt: String,
    pub interferer_utt: String,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub waveform: Waveform,
    /// Gain applied to the interferer.
    pub scale: f64,
    /// True if any mixed sample left [-1, 1]. The samples are kept as is.
    pub clipped: bool,
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Interferer gain that puts the pair at `snr_db`.
pub fn snr_scale(p_target: f64, p_interferer: f64, snr_db: f64) -> f64 {
    (p_target / (p_interferer * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Crops both signals to the shorter one (offset 0) and adds the
/// interferer scaled so that target power over interferer power is `snr_db`.
pub fn mix_at_snr(x1: &Waveform, x2: &Waveform, snr_db: f64) -> Result<Mixture> {
    if x1.sample_rate != x2.sample_rate {
        return Err(Error::SampleRateMismatch(x1.sample_rate, x2.sample_rate));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db must be finite, got {snr_db}")));
    }
    let n = x1.len().min(x2.len());
    if n == 0 {
        return Err(Error::ZeroPower);
    }
    let (a, b) = (&x1.samples[..n], &x2.samples[..n]);
    let (p1, p2) = (mean_power(a), mean_power(b));
    if p1 == 0.0 || p2 == 0.0 {
        return Err(Error::ZeroPower);
    }
    let scale = snr_scale(p1, p2, snr_db);
    let samples: Vec<f64> = a.iter().zip(b).map(|(s, i)| s + scale * i).collect();
    let clipped = samples.iter().any(|s| s.abs() > 1.0);
    Ok(Mixture {
        waveform: Waveform::new(samples, x1.sample_rate)?,
        scale,
        clipped,
    })
}

/// `10·log10(P(x1) / P(x2))` over equal-length signals.
pub fn measure_snr(x1: &[f64], scaled_x2: &[f64]) -> Result<f64> {
    if x1.len() != scaled_x2.len() {
        return Err(Error::ShapeMismatch {
            op: "measure_snr",
            left: vec![x1.len()],
            right: vec![scaled_x2.len()],
        });
    }
    if x1.is_empty() {
        return Err(Error::ZeroPower);
    }
    let (p1, p2) = (mean_power(x1), mean_power(scaled_x2));
    if p1 == 0.0 || p2 == 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok(10.0 * (p1 / p2).log10())
}

/// Draws one interferer for `target` among other speakers' utterances.
fn draw_interferer<'a>(pool: &[&'a ManifestEntry], target: &ManifestEntry, rng: &mut impl Rng) -> &'a ManifestEntry {
    loop {
        let cand = pool[rng.gen_range(0..pool.len())];
        if cand.speaker_id != target.speaker_id {
            return cand;
        }
    }
}

fn split_pool(manifest: &CorpusManifest, split: Split) -> Result<Vec<&ManifestEntry>> {
    let speakers = manifest.speakers_in(split).len();
    if speakers < 2 {
        return Err(Error::InsufficientSpeakers(speakers));
    }
    Ok(manifest.in_split(split).collect())
}

/// `count` random pairs within `split`: uniform target utterance, uniform
/// interferer among the other speakers' utterances of the same split.
pub fn sample_pairs(manifest: &CorpusManifest, split: Split, count: usize, snr_db: f64, seed: u64) -> Result<Vec<MixSpec>> {
    let pool = split_pool(manifest, split)?;
    let mut rng = stream(seed, Purpose::Pairs, split as u64);
    Ok((0..count)
        .map(|_| {
            let target = pool[rng.gen_range(0..pool.len())];
            let interferer = draw_interferer(&pool, target, &mut rng);
            MixSpec {
                target_utt: target.utterance_id.clone(),
                interferer_utt: interferer.utterance_id.clone(),
                snr_db,
            }
        })
        .collect())
}

/// One pass over every utterance of `split` as target, each with a fresh
/// random interferer, in shuffled order. Used for per-epoch re-sampling.
pub fn epoch_pairs(manifest: &CorpusManifest, split: Split, snr_db: f64, rng: &mut impl Rng) -> Result<Vec<MixSpec>> {
    let pool = split_pool(manifest, split)?;
    let mut targets = pool.clone();
    targets.shuffle(rng);
    Ok(targets
        .into_iter()
        .map(|t| MixSpec {
            target_utt: t.utterance_id.clone(),
            interferer_utt: draw_interferer(&pool, t, rng).utterance_id.clone(),
            snr_db,
        })
        .collect())
}

/// Checks that both utterances exist, share a split, and differ in speaker.
pub fn validate_pair(manifest: &CorpusManifest, spec: &MixSpec) -> Result<()> {
    let t = manifest.entry(&spec.target_utt)?;
    let i = manifest.entry(&spec.interferer_utt)?;
    if t.speaker_id == i.speaker_id {
        return Err(Error::Config(format!(
            "pair {} / {} uses one speaker twice",
            spec.target_utt, spec.interferer_utt
        )));
    }
    if t.split != i.split {
        return Err(Error::Config(format!(
            "pair {} / {} crosses the train/test boundary",
            spec.target_utt, spec.interferer_utt
        )));
    }
    Ok(())
}

pub fn save_pairs(path: &Path, pairs: &[MixSpec]) -> Result<()> {
    crate::store::write_atomic(path, (serde_json::to_string_pretty(pairs)? + "\n").as_bytes())
}

pub fn load_pairs(path: &Path) -> Result<Vec<MixSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
