//! Stage drivers shared by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::audio::{synth_corpus, Corpus, CorpusManifest, Split};
use crate::autodiff::gradcheck::{op_suite, GradCheckReport};
use crate::config::{CorpusSource, ExperimentConfig};
use crate::demix::{test_set, train_head, training_pools, variant_suite, Direction, MixtureSet, TrainedHead};
use crate::embedding::{build_bank, train_step_one, EmbeddingBank, EpochRecord, StepOneModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate_before, evaluate_clean, evaluate_head, render_report, EvalCell, EvalReport, Judge, ReportFormat};
use crate::mixer::{sample_pairs, save_pairs, MixSpec};
use crate::rng::{stream, Purpose};

/// Every tape operation and every variant graph at `trials` random points.
pub fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = stream(seed, Purpose::GradCheck, 0);
    let mut reports = op_suite(&mut rng, trials)?;
    reports.extend(variant_suite(&mut rng, trials)?);
    Ok(reports)
}

/// Loads the corpus a configuration names. Synthetic corpora are written
/// under `corpus_dir` first and read back from disk.
pub fn load_corpus(source: &CorpusSource, corpus_dir: &Path) -> Result<Corpus> {
    let manifest = match source {
        CorpusSource::Synthetic(p) => synth_corpus(p, corpus_dir)?,
        CorpusSource::Manifest { path } => CorpusManifest::load(path)?,
    };
    for w in manifest.warnings() {
        log::warn!("{w}");
    }
    Corpus::load(manifest)
}

/// Line-delimited JSON, one record per epoch.
pub fn train_log_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Refuses a bank that was not built from `model`.
pub fn check_bank(model: &StepOneModel, bank: &EmbeddingBank) -> Result<String> {
    let fp = model.fingerprint()?;
    if bank.extractor_fingerprint != fp {
        return Err(Error::ProvenanceMismatch(format!(
            "bank was built from extractor {} but {} was supplied",
            bank.extractor_fingerprint, fp
        )));
    }
    Ok(fp)
}

/// Before, every head, and Clean on one set of test mixtures.
pub fn evaluate_set(
    model: &StepOneModel,
    corpus: &Corpus,
    bank: &EmbeddingBank,
    set: &MixtureSet,
    direction: Direction,
    heads: &[&TrainedHead],
) -> Result<Vec<EvalCell>> {
    let judge = Judge {
        classifier: &model.classifier,
        labels: &model.speakers,
        bank,
    };
    let mut cells = vec![evaluate_before(set, direction, &judge)?];
    for h in heads {
        cells.push(evaluate_head(&h.head, set, direction, &judge)?);
    }
    cells.push(evaluate_clean(&model.extractor, corpus, set, direction, &judge)?);
    Ok(cells)
}

/// Scores every head on the test pairs of its SNR, with Before and Clean
/// rows for each (SNR, direction) that has a head.
pub fn evaluate_heads(
    model: &StepOneModel,
    corpus: &Corpus,
    bank: &EmbeddingBank,
    heads: &[TrainedHead],
    pairs: &[MixSpec],
) -> Result<EvalReport> {
    if heads.is_empty() {
        return Err(Error::MissingHeads("no trained heads were supplied".into()));
    }
    let fp = check_bank(model, bank)?;
    let bank_fp = bank.fingerprint()?;
    for h in heads {
        h.check_provenance(&fp, &bank_fp)?;
    }
    let mut by_snr: BTreeMap<u64, Vec<MixSpec>> = BTreeMap::new();
    for p in pairs {
        by_snr.entry(p.snr_db.to_bits()).or_default().push(p.clone());
    }
    let mut cells = Vec::new();
    let mut used = 0;
    for group in by_snr.values() {
        let snr = group[0].snr_db;
        let mut at_snr: Vec<&TrainedHead> = heads.iter().filter(|h| h.snr_db == snr).collect();
        if at_snr.is_empty() {
            continue;
        }
        at_snr.sort_by_key(|h| (h.direction, h.head.variant));
        let set = test_set(&model.extractor, corpus, group)?;
        for d in Direction::ALL {
            let hs: Vec<&TrainedHead> = at_snr.iter().copied().filter(|h| h.direction == d).collect();
            if hs.is_empty() {
                continue;
            }
            used += hs.len();
            cells.extend(evaluate_set(model, corpus, bank, &set, d, &hs)?);
        }
    }
    if used < heads.len() {
        return Err(Error::MissingHeads(format!(
            "{} head(s) have no test pairs at their SNR",
            heads.len() - used
        )));
    }
    EvalReport::new(cells)
}

/// Paths of a grid run's artifacts under one output directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn extractor(&self) -> PathBuf {
        self.root.join("extractor.sedm")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.sedm")
    }
    pub fn pairs(&self, snr_db: f64) -> PathBuf {
        self.root.join("pairs").join(format!("test_{snr_db}.json"))
    }
    pub fn heads(&self) -> PathBuf {
        self.root.join("heads")
    }
    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }
}

pub struct GridOutcome {
    pub model: StepOneModel,
    pub train_log: Vec<EpochRecord>,
    pub bank: EmbeddingBank,
    pub heads: Vec<TrainedHead>,
    pub report: EvalReport,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// The whole protocol: corpus, step one, bank, one head per grid cell,
/// evaluation and reports, all written under `out`.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path) -> Result<GridOutcome> {
    cfg.validate()?;
    let layout = RunLayout::new(out);
    mkdir(out)?;
    crate::store::write_atomic(&layout.config(), cfg.to_json()?.as_bytes())?;
    let corpus = load_corpus(&cfg.corpus, &layout.corpus())?;

    log::info!("step one: {} epochs", cfg.step_one.epochs);
    let (model, train_log) = train_step_one(&corpus, &cfg.extractor, &cfg.step_one, cfg.seeds.extractor, |r| {
        log::info!("epoch {} loss {:.4} holdout {:?}", r.epoch, r.loss, r.holdout_accuracy)
    })?;
    model.save(&layout.extractor())?;
    crate::store::write_atomic(&layout.train_log(), train_log_jsonl(&train_log)?.as_bytes())?;
    let fp = model.fingerprint()?;

    log::info!("building the embedding bank");
    let bank = build_bank(
        &model.extractor,
        &fp,
        &corpus,
        cfg.bank.segments_per_speaker,
        cfg.bank.crop_frames,
        cfg.seeds.bank,
    )?;
    bank.save(&layout.bank())?;
    let bank_fp = bank.fingerprint()?;

    mkdir(&layout.heads())?;
    mkdir(&layout.root.join("pairs"))?;
    let mut heads = Vec::new();
    let mut cells = Vec::new();
    for &snr in &cfg.grid.snrs_db {
        let pairs = sample_pairs(&corpus.manifest, Split::Test, cfg.grid.test_pairs, snr, cfg.seeds.pairs)?;
        save_pairs(&layout.pairs(snr), &pairs)?;
        let test = test_set(&model.extractor, &corpus, &pairs)?;
        let pools = training_pools(&model.extractor, &corpus, snr, &cfg.step_two, cfg.seeds.demix)?;
        for &direction in &cfg.grid.directions {
            let mut trained = Vec::new();
            for &variant in &cfg.grid.variants {
                log::info!("training {variant} at {snr} dB, {direction}");
                let (head, log) = train_head(variant, &pools, &bank, direction, &cfg.step_two, cfg.seeds.demix)?;
                let t = TrainedHead {
                    head,
                    direction,
                    snr_db: snr,
                    seed: cfg.seeds.demix,
                    extractor_fingerprint: fp.clone(),
                    bank_fingerprint: bank_fp.clone(),
                    log,
                };
                t.save(&layout.heads().join(TrainedHead::file_name(variant, snr, direction)))?;
                trained.push(t);
            }
            let refs: Vec<&TrainedHead> = trained.iter().collect();
            cells.extend(evaluate_set(&model, &corpus, &bank, &test, direction, &refs)?);
            heads.extend(trained);
        }
    }
    let report = EvalReport::new(cells)?;
    for (fmt, ext) in [(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv"), (ReportFormat::Table, "txt")] {
        crate::store::write_atomic(&layout.report(ext), render_report(&report, fmt)?.as_bytes())?;
    }
    Ok(GridOutcome {
        model,
        train_log,
        bank,
        heads,
        report,
    })
}
