//! Speaker classifier on top of embeddings: one hidden layer with batch
//! norm and ReLU, then a linear output over speakers.

use rand::Rng;

use crate::autodiff::{Mode, ParamSet, RunningStats, Tape, Tensor, Var};
use crate::embedding::extractor::{push_dense, push_norm, Dense, Norm, Pass};
use crate::error::{Error, Result};
use crate::store::Archive;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub n_speakers: usize,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
    hidden: (Dense, Norm),
    output: Dense,
}

impl Classifier {
    pub fn new(embedding_dim: usize, hidden_dim: usize, n_speakers: usize, rng: &mut impl Rng) -> Result<Self> {
        if embedding_dim == 0 || hidden_dim == 0 || n_speakers < 2 {
            return Err(Error::Config(format!(
                "classifier needs positive widths and at least 2 speakers, got {embedding_dim}/{hidden_dim}/{n_speakers}"
            )));
        }
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let d = push_dense(&mut params, "hidden", embedding_dim, hidden_dim, true, rng);
        let n = push_norm(&mut params, &mut stats, "hidden", hidden_dim);
        let output = push_dense(&mut params, "output", hidden_dim, n_speakers, false, rng);
        Ok(Classifier {
            embedding_dim,
            hidden_dim,
            n_speakers,
            params,
            stats,
            hidden: (d, n),
            output,
        })
    }

    pub(crate) fn logits_var(&self, tape: &mut Tape, pass: &mut Pass, e: Var) -> Result<Var> {
        let h = pass.dense_bn_relu(tape, e, self.hidden.0, self.hidden.1)?;
        pass.affine(tape, h, self.output)
    }

    /// Eval-mode logits for each row of `embeddings`.
    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        if embeddings.cols() != self.embedding_dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: embeddings.shape().to_vec(),
                right: vec![self.embedding_dim],
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut stats = self.stats.clone();
        let mut pass = Pass {
            p: &bound,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        let e = tape.constant(embeddings.clone());
        let l = self.logits_var(&mut tape, &mut pass, e)?;
        Ok(tape.value(l).clone())
    }

    /// Softmax probabilities over speakers, one row per embedding.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        let logits = self.logits(embeddings)?;
        let c = logits.cols();
        let mut out = logits.into_data();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Tensor::new(vec![embeddings.rows(), c], out)
    }

    /// Most probable speaker label per row.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(embeddings)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row_slice(r))).collect())
    }

    pub fn to_archive(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.set_meta(&format!("{prefix}shape"), [self.embedding_dim, self.hidden_dim, self.n_speakers])?;
        archive.push_params(prefix, &self.params);
        archive.push_stats(&format!("{prefix}running0"), &self.stats[0]);
        Ok(())
    }

    pub fn from_archive(archive: &Archive, prefix: &str) -> Result<Self> {
        let [e, h, n]: [usize; 3] = archive.meta(&format!("{prefix}shape"))?;
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::ClassifierInit, 0);
        let mut c = Classifier::new(e, h, n, &mut rng).map_err(|err| Error::Corrupt(err.to_string()))?;
        archive.load_params(prefix, &mut c.params)?;
        archive.load_stats(&format!("{prefix}running0"), &mut c.stats[0])?;
        Ok(c)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
