//! License-free synthetic speaker corpus.
//!
//! Each speaker is a fixed voice recipe: three formant resonators with
//! speaker-specific centre frequencies and bandwidths, a base pitch, and a
//! coloured noise floor. Each utterance draws a fresh pitch contour and a
//! syllabic amplitude envelope under that recipe.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::audio::mfcc::{FRAME_LENGTH, SAMPLE_RATE};
use crate::audio::wav::{wav_bytes, Waveform};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            speakers: 20,
            utts_per_speaker: 8,
            duration_s: 3.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::InvalidCount(format!(
                "need at least 2 speakers for mixing, got {}",
                self.speakers
            )));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::InvalidCount(format!(
                "need at least 2 utterances per speaker (one per split), got {}",
                self.utts_per_speaker
            )));
        }
        if !(self.duration_s * SAMPLE_RATE as f64 >= FRAME_LENGTH as f64) || !self.duration_s.is_finite() {
            return Err(Error::InvalidCount(format!("duration {} s is too short", self.duration_s)));
        }
        Ok(())
    }

    /// Train utterances per speaker: three quarters, at least one per split.
    pub fn train_per_speaker(&self) -> usize {
        let k = self.utts_per_speaker;
        ((k as f64 * 0.75).round() as usize).clamp(1, k - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceRecipe {
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
    pub pitch_hz: f64,
    /// One-pole low-pass coefficient of the noise floor.
    pub noise_pole: f64,
    /// Noise RMS relative to the voiced signal's RMS.
    pub noise_level: f64,
}

const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2400.0), (2400.0, 3600.0)];

fn log_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x / y).ln().abs()).sum()
}

/// Draws one recipe per speaker, keeping formant sets apart.
pub fn voice_recipes(n: usize, seed: u64) -> Vec<VoiceRecipe> {
    let mut out: Vec<VoiceRecipe> = Vec::with_capacity(n);
    for s in 0..n {
        let mut rng = stream(seed, Purpose::SpeakerRecipe, s as u64);
        let mut formants = [0.0; 3];
        for attempt in 0..2000 {
            for (f, &(lo, hi)) in formants.iter_mut().zip(&FORMANT_RANGES) {
                *f = (rng.gen_range(lo.ln()..hi.ln())).exp();
            }
            // Relax the spacing requirement slowly if the space is crowded.
            let min_gap = 0.35 * (1.0 - attempt as f64 / 2000.0);
            if out.iter().all(|r| log_distance(&r.formants_hz, &formants) > min_gap) {
                break;
            }
        }
        let bandwidths_hz = [
            rng.gen_range(60.0..140.0),
            rng.gen_range(80.0..180.0),
            rng.gen_range(100.0..220.0),
        ];
        out.push(VoiceRecipe {
            formants_hz: formants,
            bandwidths_hz,
            pitch_hz: rng.gen_range(90f64.ln()..240f64.ln()).exp(),
            noise_pole: rng.gen_range(0.0..0.9),
            noise_level: rng.gen_range(0.03..0.12),
        });
    }
    out
}

/// Second-order resonator run in place.
fn resonate(signal: &mut [f64], freq: f64, bandwidth: f64) {
    let fs = SAMPLE_RATE as f64;
    let r = (-PI * bandwidth / fs).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
    let a2 = -r * r;
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for s in signal.iter_mut() {
        let y = gain * *s + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *s = y;
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Renders one utterance of `recipe`.
pub fn render_utterance(recipe: &VoiceRecipe, duration_s: f64, rng: &mut impl Rng) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;

    // Pitch contour: slow vibrato-like wander plus declination.
    let wander: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| (rng.gen_range(0.03..0.12), rng.gen_range(0.3..2.5), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let declination = rng.gen_range(0.0..0.15);

    // Syllables: voiced bursts separated by short pauses.
    let mut envelope = vec![0.0; n];
    let mut t = (rng.gen_range(0.0..0.1) * fs) as usize;
    while t < n {
        let len = (rng.gen_range(0.12..0.32) * fs) as usize;
        let amp = rng.gen_range(0.5..1.0);
        for i in 0..len.min(n - t) {
            envelope[t + i] = amp * (PI * i as f64 / len as f64).sin().sqrt();
        }
        t += len + (rng.gen_range(0.03..0.15) * fs) as usize;
    }

    let mut phase: f64 = rng.gen_range(0.0..1.0);
    let mut voiced: Vec<f64> = (0..n)
        .map(|i| {
            let time = i as f64 / fs;
            let mut f0 = recipe.pitch_hz * (1.0 - declination * time / duration_s.max(1e-9));
            for &(depth, rate, ph) in &wander {
                f0 *= 1.0 + depth * (2.0 * PI * rate * time + ph).sin();
            }
            phase = (phase + f0 / fs).fract();
            (2.0 * phase - 1.0) * envelope[i]
        })
        .collect();
    for k in 0..3 {
        let jitter = 1.0 + rng.gen_range(-0.02..0.02);
        resonate(&mut voiced, recipe.formants_hz[k] * jitter, recipe.bandwidths_hz[k]);
    }
    let voiced_rms = rms(&voiced).max(1e-12);
    voiced.iter_mut().for_each(|v| *v /= voiced_rms);

    let mut state = 0.0;
    let mut noise: Vec<f64> = (0..n)
        .map(|_| {
            let white: f64 = rng.gen_range(-1.0..1.0);
            state = recipe.noise_pole * state + (1.0 - recipe.noise_pole) * white;
            state
        })
        .collect();
    let noise_rms = rms(&noise).max(1e-12);
    noise.iter_mut().for_each(|v| *v *= recipe.noise_level / noise_rms);

    let mut samples: Vec<f64> = voiced.iter().zip(&noise).map(|(v, w)| v + w).collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    samples.iter_mut().for_each(|v| *v *= 0.7 / peak);
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

pub fn utterance_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}_u{utt:02}")
}

/// Generates every utterance in memory, in manifest order.
pub fn synth_waveforms(params: &SynthParams) -> Result<Vec<(ManifestEntry, Waveform)>> {
    params.validate()?;
    let recipes = voice_recipes(params.speakers, params.seed);
    let n_train = params.train_per_speaker();
    let mut out = Vec::with_capacity(params.speakers * params.utts_per_speaker);
    for (s, recipe) in recipes.iter().enumerate() {
        for u in 0..params.utts_per_speaker {
            let index = (s * params.utts_per_speaker + u) as u64;
            let mut rng = stream(params.seed, Purpose::Utterance, index);
            let wave = render_utterance(recipe, params.duration_s, &mut rng);
            let uid = utterance_id(s, u);
            let entry = ManifestEntry {
                path: Path::new("wav").join(speaker_id(s)).join(format!("{uid}.wav")),
                utterance_id: uid,
                speaker_id: speaker_id(s),
                split: if u < n_train { Split::Train } else { Split::Test },
            };
            out.push((entry, wave));
        }
    }
    Ok(out)
}

/// Writes the corpus as 16-bit WAV files plus `manifest.json` under `out_dir`.
pub fn synth_corpus(params: &SynthParams, out_dir: &Path) -> Result<CorpusManifest> {
    let items = synth_waveforms(params)?;
    let mut entries = Vec::with_capacity(items.len());
    for (entry, wave) in items {
        let path = out_dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        crate::store::write_atomic(&path, &wav_bytes(&wave)?)?;
        entries.push(entry);
    }
    let manifest = CorpusManifest::new(entries)?.with_root(out_dir);
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mfcc::Mfcc;
    use crate::audio::wav::read_wav;
    use crate::autodiff::Tensor;

    fn small() -> SynthParams {
        SynthParams {
            speakers: 4,
            utts_per_speaker: 4,
            duration_s: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn counts_and_split_ratio() {
        let p = SynthParams {
            speakers: 20,
            utts_per_speaker: 8,
            duration_s: 0.03,
            seed: 1,
        };
        let items = synth_waveforms(&p).unwrap();
        assert_eq!(items.len(), 160);
        assert_eq!(items.iter().filter(|(e, _)| e.split == Split::Train).count(), 120);
        assert_eq!(items.iter().filter(|(e, _)| e.split == Split::Test).count(), 40);
    }

    #[test]
    fn invalid_counts() {
        for p in [
            SynthParams { speakers: 1, ..small() },
            SynthParams { utts_per_speaker: 1, ..small() },
            SynthParams { duration_s: 0.001, ..small() },
        ] {
            assert!(matches!(p.validate(), Err(Error::InvalidCount(_))));
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_corpus(&small(), a.path()).unwrap();
        synth_corpus(&small(), b.path()).unwrap();
        for e in &ma.entries {
            let fa = std::fs::read(a.path().join(&e.path)).unwrap();
            let fb = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
        let w = read_wav(&a.path().join(&ma.entries[0].path)).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.len(), 8000);
        assert!(w.samples.iter().all(|s| s.abs() <= 0.7 + 1e-4));
    }

    #[test]
    fn different_seed_changes_audio() {
        let a = synth_waveforms(&small()).unwrap();
        let b = synth_waveforms(&SynthParams { seed: 12, ..small() }).unwrap();
        assert_ne!(a[0].1, b[0].1);
    }

    /// Mean raw cepstrum per utterance, before mean subtraction.
    fn mean_cepstrum(m: &Mfcc, w: &Waveform) -> Vec<f64> {
        let raw: Tensor = m.raw(w).unwrap();
        crate::audio::FeatureMatrix::new(raw).unwrap().mean()
    }

    #[test]
    fn speakers_are_separable_by_nearest_mean() {
        let p = SynthParams {
            speakers: 10,
            utts_per_speaker: 8,
            duration_s: 1.0,
            seed: 3,
        };
        let items = synth_waveforms(&p).unwrap();
        let m = Mfcc::new();
        let feats: Vec<(usize, Split, Vec<f64>)> = items
            .iter()
            .enumerate()
            .map(|(i, (e, w))| (i / p.utts_per_speaker, e.split, mean_cepstrum(&m, w)))
            .collect();
        let mut centroids = vec![vec![0.0; 20]; p.speakers];
        let mut counts = vec![0usize; p.speakers];
        for (s, split, f) in &feats {
            if *split == Split::Train {
                counts[*s] += 1;
                centroids[*s].iter_mut().zip(f).for_each(|(c, v)| *c += v);
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..p.speakers {
            for j in i + 1..p.speakers {
                assert!(dist(&centroids[i], &centroids[j]) > 0.1);
            }
        }
        let test: Vec<_> = feats.iter().filter(|(_, s, _)| *s == Split::Test).collect();
        let correct = test
            .iter()
            .filter(|(s, _, f)| {
                let best = (0..p.speakers)
                    .min_by(|&a, &b| dist(f, &centroids[a]).total_cmp(&dist(f, &centroids[b])))
                    .unwrap();
                best == *s
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 5.0 / p.speakers as f64, "accuracy {acc}");
    }
}
