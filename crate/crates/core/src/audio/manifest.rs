use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

/// Utterance listing with a contiguous speaker index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Speaker ids in label order: label `i` is `speakers[i]`.
    pub speakers: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: Option<PathBuf>,
}

impl CorpusManifest {
    /// Builds a manifest; speaker labels follow sorted speaker-id order.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Config(format!("duplicate utterance id {:?}", e.utterance_id)));
            }
        }
        let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
        Ok(CorpusManifest {
            speakers: speakers.into_iter().map(str::to_string).collect(),
            entries,
            root: None,
        })
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = Some(root.into());
        self
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker_id)).ok()
    }

    pub fn entry(&self, utterance_id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.utterance_id == utterance_id)
            .ok_or_else(|| Error::UnknownUtterance(utterance_id.to_string()))
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn speakers_in(&self, split: Split) -> BTreeSet<&str> {
        self.in_split(split).map(|e| e.speaker_id.as_str()).collect()
    }

    /// Entries of `split` grouped by speaker id.
    pub fn by_speaker(&self, split: Split) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.in_split(split) {
            map.entry(e.speaker_id.as_str()).or_default().push(e);
        }
        map
    }

    /// Speakers that do not appear in both splits.
    pub fn warnings(&self) -> Vec<String> {
        let train = self.speakers_in(Split::Train);
        let test = self.speakers_in(Split::Test);
        self.speakers
            .iter()
            .filter_map(|s| match (train.contains(s.as_str()), test.contains(s.as_str())) {
                (true, true) => None,
                (false, _) => Some(format!("speaker {s} has no train utterances")),
                (_, false) => Some(format!("speaker {s} has no test utterances")),
            })
            .collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        match &self.root {
            Some(root) if entry.path.is_relative() => root.join(&entry.path),
            _ => entry.path.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: CorpusManifest = serde_json::from_str(&text)?;
        // Re-derive the index so a hand-edited file cannot desynchronise it.
        let rebuilt = CorpusManifest::new(parsed.entries)?;
        if rebuilt.speakers != parsed.speakers {
            return Err(Error::Config(
                "manifest speaker list does not match its entries".into(),
            ));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(rebuilt.with_root(root))
    }

    /// Indexes a TIMIT-style tree (`<root>/**/<speaker>/<utterance>.wav`).
    ///
    /// For every speaker, six utterances go to train and two to test, at
    /// random under `seed`; leftovers are not listed. With `exclude_sa`
    /// the two shared-transcription `SA*` sentences are dropped first.
    pub fn from_timit_layout(root: &Path, seed: u64, exclude_sa: bool) -> Result<Self> {
        let mut by_speaker: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            for item in rd {
                let path = item.map_err(|e| Error::io(&dir, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path
                    .extension()
                    .map(|x| x.eq_ignore_ascii_case("wav"))
                    .unwrap_or(false)
                {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_uppercase();
                    if exclude_sa && stem.starts_with("SA") {
                        continue;
                    }
                    let speaker = path
                        .parent()
                        .and_then(Path::file_name)
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_default();
                    by_speaker.entry(speaker).or_default().push(path);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (speaker, mut files) in by_speaker {
            files.sort();
            if files.len() < 8 {
                return Err(Error::InvalidCount(format!(
                    "speaker {speaker} has {} utterances, need 8",
                    files.len()
                )));
            }
            files.shuffle(&mut rng);
            for (i, f) in files.into_iter().take(8).enumerate() {
                let stem = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
                let rel = f.strip_prefix(root).map(Path::to_path_buf).unwrap_or(f.clone());
                entries.push(ManifestEntry {
                    utterance_id: format!("{speaker}_{stem}"),
                    speaker_id: speaker.clone(),
                    path: rel,
                    split: if i < 6 { Split::Train } else { Split::Test },
                });
            }
        }
        entries.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        Ok(CorpusManifest::new(entries)?.with_root(root))
    }
}
