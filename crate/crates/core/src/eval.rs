//! Cosine and identification metrics, and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Corpus;
use crate::autodiff::Tensor;
use crate::demix::{DemixHead, DemixVariant, Direction, MixtureSet};
use crate::embedding::{Classifier, EmbeddingBank, Extractor};
use crate::error::{Error, Result};

/// `a·b / (‖a‖‖b‖)`, computed as `a·b / sqrt(‖a‖²‖b‖²)` so that a vector
/// compared with itself gives exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na * nb).sqrt())
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![predicted.len()],
            right: vec![truth.len()],
        });
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Report rows in their fixed display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReportRow {
    Before,
    Sub,
    Mul,
    Concat1,
    Concat2,
    #[serde(rename = "Share-Concat")]
    ShareConcat,
    #[serde(rename = "Separate-Concat")]
    SeparateConcat,
    Clean,
}

impl ReportRow {
    pub const ALL: [ReportRow; 8] = [
        ReportRow::Before,
        ReportRow::Sub,
        ReportRow::Mul,
        ReportRow::Concat1,
        ReportRow::Concat2,
        ReportRow::ShareConcat,
        ReportRow::SeparateConcat,
        ReportRow::Clean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportRow::Before => "Before",
            ReportRow::Clean => "Clean",
            ReportRow::Sub => DemixVariant::Sub.display_name(),
            ReportRow::Mul => DemixVariant::Mul.display_name(),
            ReportRow::Concat1 => DemixVariant::Concat1.display_name(),
            ReportRow::Concat2 => DemixVariant::Concat2.display_name(),
            ReportRow::ShareConcat => DemixVariant::ShareConcat.display_name(),
            ReportRow::SeparateConcat => DemixVariant::SeparateConcat.display_name(),
        }
    }
}

impl From<DemixVariant> for ReportRow {
    fn from(v: DemixVariant) -> Self {
        match v {
            DemixVariant::Sub => ReportRow::Sub,
            DemixVariant::Mul => ReportRow::Mul,
            DemixVariant::Concat1 => ReportRow::Concat1,
            DemixVariant::Concat2 => ReportRow::Concat2,
            DemixVariant::ShareConcat => ReportRow::ShareConcat,
            DemixVariant::SeparateConcat => ReportRow::SeparateConcat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCell {
    pub row: ReportRow,
    pub snr_db: f64,
    pub direction: Direction,
    /// Mean over samples of the per-sample cosine.
    pub cosine: f64,
    /// Fraction of samples identified as the predicted speaker.
    pub accuracy: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    /// Sorts cells into direction, row, SNR order and rejects duplicates
    /// and empty cells.
    pub fn new(mut cells: Vec<EvalCell>) -> Result<Self> {
        cells.sort_by(|a, b| {
            (a.direction, a.row)
                .cmp(&(b.direction, b.row))
                .then(a.snr_db.total_cmp(&b.snr_db))
        });
        for w in cells.windows(2) {
            if w[0].direction == w[1].direction && w[0].row == w[1].row && w[0].snr_db == w[1].snr_db {
                return Err(Error::Config(format!(
                    "duplicate report cell {} at {} dB ({})",
                    w[0].row.name(),
                    w[0].snr_db,
                    w[0].direction
                )));
            }
        }
        if let Some(c) = cells.iter().find(|c| c.n_examples == 0) {
            return Err(Error::Config(format!("report cell {} at {} dB has no examples", c.row.name(), c.snr_db)));
        }
        Ok(EvalReport { cells })
    }

    pub fn get(&self, row: ReportRow, snr_db: f64, direction: Direction) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.row == row && c.snr_db == snr_db && c.direction == direction)
    }

    pub fn directions(&self) -> Vec<Direction> {
        let mut d: Vec<Direction> = self.cells.iter().map(|c| c.direction).collect();
        d.dedup();
        d
    }

    /// Ascending SNRs present for `direction`.
    pub fn snrs(&self, direction: Direction) -> Vec<f64> {
        let mut s: Vec<f64> = self.cells.iter().filter(|c| c.direction == direction).map(|c| c.snr_db).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    pub fn rows(&self, direction: Direction) -> Vec<ReportRow> {
        let mut r: Vec<ReportRow> = self.cells.iter().filter(|c| c.direction == direction).map(|c| c.row).collect();
        r.dedup();
        r
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        EvalReport::new(r.cells)
    }
}

/// What classifier B needs to name speakers.
pub struct Judge<'a> {
    pub classifier: &'a Classifier,
    /// Speaker id of each classifier output.
    pub labels: &'a [String],
    pub bank: &'a EmbeddingBank,
}

impl Judge<'_> {
    fn label(&self, speaker: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::MissingBankEntry(speaker.to_string()))
    }

    /// Scores one embedding per sample against the bank entry and the
    /// label of that sample's speaker.
    pub fn score(&self, embeddings: &Tensor, speakers: &[&str], row: ReportRow, snr_db: f64, direction: Direction) -> Result<EvalCell> {
        if speakers.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let cosines: Vec<f64> = (0..embeddings.rows())
            .into_par_iter()
            .map(|r| cosine(embeddings.row_slice(r), self.bank.get(speakers[r])?))
            .collect::<Result<_>>()?;
        let predicted = self.classifier.predict(embeddings)?;
        let truth: Vec<usize> = speakers.iter().map(|s| self.label(s)).collect::<Result<_>>()?;
        Ok(EvalCell {
            row,
            snr_db,
            direction,
            cosine: cosines.iter().sum::<f64>() / cosines.len() as f64,
            accuracy: accuracy(&predicted, &truth)?,
            n_examples: cosines.len(),
        })
    }
}

fn predicted_speakers(set: &MixtureSet, direction: Direction) -> Vec<&str> {
    set.speakers.iter().map(|(t, i)| direction.roles(t, i).1).collect()
}

/// De-mixed embeddings of `head` scored against the predicted speaker.
pub fn evaluate_head(head: &DemixHead, set: &MixtureSet, direction: Direction, judge: &Judge) -> Result<EvalCell> {
    if set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let (known, _) = set.bank_targets(judge.bank, direction)?;
    let pred = head.predict(&set.embeddings, &known)?;
    judge.score(&pred, &predicted_speakers(set, direction), head.variant.into(), set.snr_db, direction)
}

/// The mixture embedding itself scored against the predicted speaker.
pub fn evaluate_before(set: &MixtureSet, direction: Direction, judge: &Judge) -> Result<EvalCell> {
    if set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    judge.score(&set.embeddings, &predicted_speakers(set, direction), ReportRow::Before, set.snr_db, direction)
}

/// The clean reference. Cosine compares the predicted speaker's bank entry
/// with itself; accuracy classifies the clean embedding of the predicted
/// speaker's own utterance in each pair.
pub fn evaluate_clean(extractor: &Extractor, corpus: &Corpus, set: &MixtureSet, direction: Direction, judge: &Judge) -> Result<EvalCell> {
    if set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let speakers = predicted_speakers(set, direction);
    let utts: Vec<&str> = set
        .pairs
        .iter()
        .map(|p| direction.roles(&p.target_utt, &p.interferer_utt).1)
        .collect();
    let clean: Vec<Vec<f64>> = utts
        .par_iter()
        .map(|u| Ok(extractor.embed(corpus.features(u)?.frames())?.into_data()))
        .collect::<Result<_>>()?;
    let d = judge.bank.dim();
    let clean = Tensor::new(vec![utts.len(), d], clean.into_iter().flatten().collect())?;
    let mut cell = judge.score(&clean, &speakers, ReportRow::Clean, set.snr_db, direction)?;
    let cosines: Vec<f64> = speakers
        .iter()
        .map(|s| {
            let e = judge.bank.get(s)?;
            cosine(e, e)
        })
        .collect::<Result<_>>()?;
    cell.cosine = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(cell)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}; expected table, json or csv"))),
        }
    }
}

fn snr_label(snr: f64) -> String {
    format!("{snr}dB")
}

/// Renders `report`; the same report always yields the same bytes.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Table => Ok(render_table(report)),
        ReportFormat::Csv => render_csv(report),
    }
}

fn direction_title(d: Direction) -> &'static str {
    match d {
        Direction::KnownInterferer => "known interferer, predicted target",
        Direction::KnownTarget => "known target, predicted interferer",
    }
}

fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    for (i, d) in report.directions().into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let snrs = report.snrs(d);
        let w = 8;
        let group = snrs.len() * w;
        let _ = writeln!(out, "Direction: {}", direction_title(d));
        let _ = writeln!(out, "{:<16}{:<group$}  {}", "", "Cosine Similarity", "Identification Accuracy (%)");
        let mut header = format!("{:<16}", "Method");
        for pass in 0..2 {
            for s in &snrs {
                let _ = write!(header, "{:>w$}", snr_label(*s));
            }
            if pass == 0 {
                header.push_str("  ");
            }
        }
        let _ = writeln!(out, "{}", header.trim_end());
        for row in report.rows(d) {
            let mut line = format!("{:<16}", row.name());
            for s in &snrs {
                let v = report.get(row, *s, d).map(|c| format!("{:.2}", c.cosine)).unwrap_or_else(|| "-".into());
                let _ = write!(line, "{v:>w$}");
            }
            line.push_str("  ");
            for s in &snrs {
                let v = report
                    .get(row, *s, d)
                    .map(|c| format!("{:.1}", 100.0 * c.accuracy))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(line, "{v:>w$}");
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
    }
    out
}

fn render_csv(report: &EvalReport) -> Result<String> {
    let mut snrs: Vec<f64> = report.cells.iter().map(|c| c.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["direction".to_string(), "method".to_string()];
    for metric in ["cosine", "accuracy", "n_examples"] {
        header.extend(snrs.iter().map(|s| format!("{metric}_{}", snr_label(*s))));
    }
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for d in report.directions() {
        for row in report.rows(d) {
            let mut rec = vec![d.slug().to_string(), row.name().to_string()];
            let cell = |s: f64| report.get(row, s, d);
            rec.extend(snrs.iter().map(|s| cell(*s).map(|c| c.cosine.to_string()).unwrap_or_default()));
            rec.extend(snrs.iter().map(|s| cell(*s).map(|c| c.accuracy.to_string()).unwrap_or_default()));
            rec.extend(snrs.iter().map(|s| cell(*s).map(|c| c.n_examples.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}
