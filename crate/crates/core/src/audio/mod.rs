//! Waveform ingestion, MFCC features, and the synthetic corpus.

mod manifest;
mod mfcc;
mod synth;
mod wav;

use std::collections::HashMap;

use rayon::prelude::*;

pub use manifest::{CorpusManifest, ManifestEntry, Split};
pub use mfcc::{
    frame_count, mfcc, sample_segment, FeatureMatrix, Mfcc, FFT_SIZE, FRAME_LENGTH, FRAME_SHIFT, NUM_CEPS,
    NUM_MEL, SAMPLE_RATE,
};
pub use synth::{
    render_utterance, speaker_id, synth_corpus, synth_waveforms, utterance_id, voice_recipes, SynthParams,
    VoiceRecipe,
};
pub use wav::{read_wav, read_wav_bytes, wav_bytes, write_wav, Waveform};

use crate::error::Result;

/// Waveforms and clean features for every utterance of a manifest.
pub struct Corpus {
    pub manifest: CorpusManifest,
    waves: HashMap<String, Waveform>,
    features: HashMap<String, FeatureMatrix>,
}

impl Corpus {
    /// Reads every listed file and extracts its features.
    pub fn load(manifest: CorpusManifest) -> Result<Self> {
        let loaded: Vec<(String, Waveform)> = manifest
            .entries
            .par_iter()
            .map(|e| Ok((e.utterance_id.clone(), read_wav(&manifest.resolve(e))?)))
            .collect::<Result<_>>()?;
        Self::from_waveforms(manifest, loaded)
    }

    pub fn from_waveforms(manifest: CorpusManifest, waves: Vec<(String, Waveform)>) -> Result<Self> {
        let front = Mfcc::new();
        let features: Vec<(String, FeatureMatrix)> = waves
            .par_iter()
            .map(|(id, w)| Ok((id.clone(), front.compute(w)?)))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            manifest,
            waves: waves.into_iter().collect(),
            features: features.into_iter().collect(),
        })
    }

    /// Synthesises a corpus in memory, bit-identical to the files
    /// [`synth_corpus`] would write.
    pub fn synthetic(params: &SynthParams) -> Result<Self> {
        let items = synth_waveforms(params)?;
        let mut entries = Vec::with_capacity(items.len());
        let mut waves = Vec::with_capacity(items.len());
        for (entry, w) in items {
            // Round-trip through 16-bit PCM so in-memory and on-disk corpora agree.
            let w = read_wav_bytes(&wav_bytes(&w)?)?;
            waves.push((entry.utterance_id.clone(), w));
            entries.push(entry);
        }
        Self::from_waveforms(CorpusManifest::new(entries)?, waves)
    }

    pub fn waveform(&self, utterance_id: &str) -> Result<&Waveform> {
        self.waves
            .get(utterance_id)
            .ok_or_else(|| crate::Error::UnknownUtterance(utterance_id.to_string()))
    }

    pub fn features(&self, utterance_id: &str) -> Result<&FeatureMatrix> {
        self.features
            .get(utterance_id)
            .ok_or_else(|| crate::Error::UnknownUtterance(utterance_id.to_string()))
    }

    pub fn label(&self, utterance_id: &str) -> Result<usize> {
        let e = self.manifest.entry(utterance_id)?;
        Ok(self.manifest.speaker_index(&e.speaker_id).expect("manifest speaker index"))
    }
}
