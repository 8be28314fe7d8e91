//! Experiment configuration: one JSON document drives a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::SynthParams;
use crate::demix::{DemixVariant, Direction, StepTwoConfig};
use crate::embedding::{ExtractorConfig, StepOneConfig, DEFAULT_SEGMENTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SynthParams),
    /// A manifest file; relative entry paths resolve against its directory.
    Manifest { path: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub segments_per_speaker: usize,
    pub crop_frames: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            segments_per_speaker: DEFAULT_SEGMENTS,
            crop_frames: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub variants: Vec<DemixVariant>,
    pub snrs_db: Vec<f64>,
    pub directions: Vec<Direction>,
    /// Test mixtures per SNR.
    pub test_pairs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            variants: DemixVariant::ALL.to_vec(),
            snrs_db: vec![-5.0, 0.0, 5.0],
            directions: Direction::ALL.to_vec(),
            test_pairs: 200,
        }
    }
}

/// Seeds per stage, so one stage can be re-drawn while the others stay put.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub extractor: u64,
    pub bank: u64,
    pub demix: u64,
    pub pairs: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::all(0)
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            extractor: seed,
            bank: seed,
            demix: seed,
            pairs: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub extractor: ExtractorConfig,
    pub step_one: StepOneConfig,
    pub bank: BankConfig,
    pub step_two: StepTwoConfig,
    pub grid: GridConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::default(),
            extractor: ExtractorConfig::default(),
            step_one: StepOneConfig::default(),
            bank: BankConfig::default(),
            step_two: StepTwoConfig::default(),
            grid: GridConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let CorpusSource::Synthetic(p) = &self.corpus {
            p.validate()?;
        }
        self.extractor.validate()?;
        self.step_one.validate()?;
        self.step_two.validate()?;
        if self.bank.segments_per_speaker == 0 {
            return Err(Error::Config("bank.segments_per_speaker must be positive".into()));
        }
        let g = &self.grid;
        if g.variants.is_empty() || g.snrs_db.is_empty() || g.directions.is_empty() || g.test_pairs == 0 {
            return Err(Error::Config("the grid needs variants, SNRs, directions and test pairs".into()));
        }
        if let Some(s) = g.snrs_db.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("SNR {s} is not finite")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
