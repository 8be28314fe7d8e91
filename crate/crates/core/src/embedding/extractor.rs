//! Residual-TDNN speaker-embedding extractor.
//!
//! Frame level: TDNN `[t-1, t, t+1]`, TDNN `[t]`, residual blocks of a
//! five-frame convolution plus a one-frame convolution, then TDNN `[t]` to
//! the pooling width. Statistics pooling concatenates mean and standard
//! deviation. Segment level: one fully connected layer with batch norm and
//! ReLU, then the embedding layer, which is plain affine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{he_uniform, glorot_uniform, pool_block, Bound, Mode, ParamId, ParamSet, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::store::Archive;

pub const TDNN1_CONTEXT: [isize; 3] = [-1, 0, 1];
pub const BLOCK_CONTEXT: [isize; 5] = [-2, -1, 0, 1, 2];
pub const UNIT_CONTEXT: [isize; 1] = [0];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub frame_dim: usize,
    pub residual_blocks: usize,
    pub pool_dim: usize,
    pub segment_dim: usize,
    pub embedding_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_dim: 20,
            frame_dim: 512,
            residual_blocks: 3,
            pool_dim: 1500,
            segment_dim: 512,
            embedding_dim: 512,
        }
    }
}

impl ExtractorConfig {
    /// Frames lost to valid splicing between input and pooling.
    pub fn shrinkage(&self) -> usize {
        let span = |c: &[isize]| (c.iter().max().unwrap() - c.iter().min().unwrap()) as usize;
        span(&TDNN1_CONTEXT) + self.residual_blocks * span(&BLOCK_CONTEXT)
    }

    /// Shortest input that leaves one frame to pool.
    pub fn min_frames(&self) -> usize {
        self.shrinkage() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.frame_dim,
            self.pool_dim,
            self.segment_dim,
            self.embedding_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

/// Appends an affine layer initialised for the activation that follows it.
pub(crate) fn push_dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, relu: bool, rng: &mut impl Rng) -> Dense {
    let w = if relu {
        he_uniform(rng, fan_in, fan_out)
    } else {
        glorot_uniform(rng, fan_in, fan_out)
    };
    Dense {
        w: params.push(format!("{name}.w"), w),
        b: params.push(format!("{name}.b"), Tensor::zeros(1, fan_out)),
    }
}

pub(crate) fn push_norm(params: &mut ParamSet, stats: &mut Vec<RunningStats>, name: &str, dim: usize) -> Norm {
    stats.push(RunningStats::new(dim));
    Norm {
        gamma: params.push(format!("{name}.bn.gamma"), Tensor::ones(1, dim)),
        beta: params.push(format!("{name}.bn.beta"), Tensor::zeros(1, dim)),
        stats: stats.len() - 1,
    }
}

/// One forward pass: parameters bound to a tape plus the batch-norm state
/// the pass reads (eval) or updates (train).
pub(crate) struct Pass<'a> {
    pub p: &'a Bound,
    pub stats: &'a mut [RunningStats],
    pub mode: Mode,
}

impl Pass<'_> {
    pub fn affine(&self, tape: &mut Tape, x: Var, d: Dense) -> Result<Var> {
        tape.linear(x, self.p.var(d.w), self.p.var(d.b))
    }

    pub fn norm(&mut self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (self.p.var(n.gamma), self.p.var(n.beta));
        tape.batch_norm(x, g, b, &mut self.stats[n.stats], self.mode)
    }

    /// affine → batch norm → ReLU
    pub fn dense_bn_relu(&mut self, tape: &mut Tape, x: Var, d: Dense, n: Norm) -> Result<Var> {
        let h = self.affine(tape, x, d)?;
        let h = self.norm(tape, h, n)?;
        tape.relu(h)
    }

    pub fn tdnn(&mut self, tape: &mut Tape, x: Var, context: &[isize], segments: usize, d: Dense, n: Norm) -> Result<Var> {
        let s = tape.tdnn_splice(x, context, segments)?;
        self.dense_bn_relu(tape, s, d, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: (Dense, Norm),
    point: (Dense, Norm),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tdnn1: (Dense, Norm),
    tdnn2: (Dense, Norm),
    blocks: Vec<Block>,
    tdnn3: (Dense, Norm),
    segment: (Dense, Norm),
    embedding: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
    layout: Layout,
}

pub const ARCHITECTURE: &str = "residual-tdnn";

impl Extractor {
    pub fn new(config: ExtractorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let mut layer = |params: &mut ParamSet, stats: &mut Vec<RunningStats>, name: &str, fan_in: usize, fan_out: usize| {
            let d = push_dense(params, name, fan_in, fan_out, true, rng);
            (d, push_norm(params, stats, name, fan_out))
        };
        let tdnn1 = layer(&mut params, &mut stats, "tdnn1", c.input_dim * TDNN1_CONTEXT.len(), c.frame_dim);
        let tdnn2 = layer(&mut params, &mut stats, "tdnn2", c.frame_dim, c.frame_dim);
        let blocks = (0..c.residual_blocks)
            .map(|i| Block {
                conv: layer(&mut params, &mut stats, &format!("block{i}.conv"), c.frame_dim * BLOCK_CONTEXT.len(), c.frame_dim),
                point: layer(&mut params, &mut stats, &format!("block{i}.point"), c.frame_dim, c.frame_dim),
            })
            .collect();
        let tdnn3 = layer(&mut params, &mut stats, "tdnn3", c.frame_dim, c.pool_dim);
        let segment = layer(&mut params, &mut stats, "segment", 2 * c.pool_dim, c.segment_dim);
        let embedding = push_dense(&mut params, "embedding", c.segment_dim, c.embedding_dim, false, rng);
        Ok(Extractor {
            config,
            params,
            stats,
            layout: Layout {
                tdnn1,
                tdnn2,
                blocks,
                tdnn3,
                segment,
                embedding,
            },
        })
    }

    /// Width of every layer output, input to embedding.
    pub fn layer_widths(&self) -> Vec<(String, usize)> {
        let w = |d: Dense| self.params.get(d.w).cols();
        let mut out = vec![
            ("tdnn1".to_string(), w(self.layout.tdnn1.0)),
            ("tdnn2".to_string(), w(self.layout.tdnn2.0)),
        ];
        for (i, b) in self.layout.blocks.iter().enumerate() {
            out.push((format!("block{i}"), w(b.point.0)));
        }
        out.push(("tdnn3".into(), w(self.layout.tdnn3.0)));
        out.push(("pool".into(), self.params.get(self.layout.segment.0.w).rows()));
        out.push(("segment".into(), w(self.layout.segment.0)));
        out.push(("embedding".into(), w(self.layout.embedding)));
        out
    }

    pub(crate) fn frame_level(&self, tape: &mut Tape, pass: &mut Pass, x: Var, segments: usize) -> Result<Var> {
        let l = &self.layout;
        let h = pass.tdnn(tape, x, &TDNN1_CONTEXT, segments, l.tdnn1.0, l.tdnn1.1)?;
        let mut h = pass.dense_bn_relu(tape, h, l.tdnn2.0, l.tdnn2.1)?;
        let half = (BLOCK_CONTEXT.len() / 2) as usize;
        for b in &l.blocks {
            let skip = tape.trim_frames(h, segments, half, half)?;
            let r = pass.tdnn(tape, h, &BLOCK_CONTEXT, segments, b.conv.0, b.conv.1)?;
            let r = pass.affine(tape, r, b.point.0)?;
            let r = pass.norm(tape, r, b.point.1)?;
            let sum = tape.add(r, skip)?;
            h = tape.relu(sum)?;
        }
        pass.dense_bn_relu(tape, h, l.tdnn3.0, l.tdnn3.1)
    }

    pub(crate) fn segment_level(&self, tape: &mut Tape, pass: &mut Pass, pooled: Var) -> Result<Var> {
        let l = &self.layout;
        let h = pass.dense_bn_relu(tape, pooled, l.segment.0, l.segment.1)?;
        pass.affine(tape, h, l.embedding)
    }

    /// Embeddings for `segments` equally long sequences stacked in `x`.
    pub(crate) fn forward(&self, tape: &mut Tape, pass: &mut Pass, x: Var, segments: usize) -> Result<Var> {
        let rows = tape.value(x).rows();
        if segments == 0 || rows % segments != 0 {
            return Err(Error::ShapeMismatch {
                op: "extractor",
                left: tape.value(x).shape().to_vec(),
                right: vec![segments],
            });
        }
        self.check_length(rows / segments)?;
        let frames = self.frame_level(tape, pass, x, segments)?;
        let pooled = tape.stats_pool(frames, segments)?;
        self.segment_level(tape, pass, pooled)
    }

    fn check_length(&self, frames: usize) -> Result<()> {
        if frames < self.config.min_frames() {
            return Err(Error::SegmentTooShort {
                frames,
                needed: self.config.min_frames(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "extractor input",
                left: x.shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        Ok(())
    }

    /// Runs `f` on a fresh tape with the parameters as constants, in eval mode.
    fn eval<T>(&self, f: impl FnOnce(&mut Tape, &mut Pass) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut stats = self.stats.clone();
        let mut pass = Pass {
            p: &bound,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        f(&mut tape, &mut pass)
    }

    /// Eval-mode embedding of one feature sequence (`T × input_dim`).
    pub fn embed(&self, frames: &Tensor) -> Result<Tensor> {
        self.embed_batch(frames, 1)
    }

    /// Eval-mode embeddings of `segments` stacked, equally long sequences.
    pub fn embed_batch(&self, x: &Tensor, segments: usize) -> Result<Tensor> {
        self.check_input(x)?;
        self.eval(|tape, pass| {
            let xv = tape.constant(x.clone());
            let e = self.forward(tape, pass, xv, segments)?;
            Ok(tape.value(e).clone())
        })
    }

    /// Eval-mode frame-level output for a whole utterance.
    ///
    /// In eval mode every frame-level layer acts on each output frame
    /// independently of the others, so the frame-level output of any crop
    /// equals the matching rows of this tensor. [`Extractor::embed_windows`]
    /// exploits that to embed many crops of one utterance cheaply.
    pub fn frame_cache(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_input(frames)?;
        self.check_length(frames.rows())?;
        self.eval(|tape, pass| {
            let xv = tape.constant(frames.clone());
            let h = self.frame_level(tape, pass, xv, 1)?;
            Ok(tape.value(h).clone())
        })
    }

    /// Embeddings of crops `(start, len)` of the utterance whose
    /// [`Extractor::frame_cache`] is `cache`; positions refer to input frames.
    pub fn embed_windows(&self, cache: &Tensor, windows: &[(usize, usize)]) -> Result<Tensor> {
        let d = self.config.pool_dim;
        let shrink = self.config.shrinkage();
        if cache.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "embed_windows",
                left: cache.shape().to_vec(),
                right: vec![d],
            });
        }
        if windows.is_empty() {
            return Err(Error::EmptySequence { op: "embed_windows" });
        }
        let mut pooled = vec![0.0; windows.len() * 2 * d];
        for (i, &(start, len)) in windows.iter().enumerate() {
            self.check_length(len)?;
            let end = start + len - shrink;
            if end > cache.rows() {
                return Err(Error::UtteranceTooShort {
                    frames: cache.rows() + shrink,
                    needed: start + len,
                });
            }
            pool_block(&cache.data()[start * d..end * d], d, &mut pooled[i * 2 * d..(i + 1) * 2 * d]);
        }
        let pooled = Tensor::new(vec![windows.len(), 2 * d], pooled)?;
        self.eval(|tape, pass| {
            let pv = tape.constant(pooled);
            let e = self.segment_level(tape, pass, pv)?;
            Ok(tape.value(e).clone())
        })
    }

    pub fn to_archive(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.set_meta(&format!("{prefix}config"), &self.config)?;
        archive.push_params(prefix, &self.params);
        for (i, s) in self.stats.iter().enumerate() {
            archive.push_stats(&format!("{prefix}running{i}"), s);
        }
        Ok(())
    }

    pub fn from_archive(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: ExtractorConfig = archive.meta(&format!("{prefix}config"))?;
        config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        // Initial values are overwritten; the draw only fixes the layout.
        let mut rng = crate::rng::stream(0, crate::rng::Purpose::ExtractorInit, 0);
        let mut ex = Extractor::new(config, &mut rng)?;
        archive.load_params(prefix, &mut ex.params)?;
        for (i, s) in ex.stats.iter_mut().enumerate() {
            archive.load_stats(&format!("{prefix}running{i}"), s)?;
        }
        Ok(ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::{stream, Purpose};

    fn small() -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 4,
            frame_dim: 6,
            residual_blocks: 2,
            pool_dim: 5,
            segment_dim: 6,
            embedding_dim: 3,
        }
    }

    fn model(c: ExtractorConfig) -> Extractor {
        Extractor::new(c, &mut stream(1, Purpose::ExtractorInit, 0)).unwrap()
    }

    /// Parameter count walked independently from the layer table:
    /// (fan_in, fan_out, has batch norm) per layer.
    fn counted_params(c: &ExtractorConfig) -> usize {
        let mut rows = vec![(c.input_dim * 3, c.frame_dim, true), (c.frame_dim, c.frame_dim, true)];
        for _ in 0..c.residual_blocks {
            rows.push((c.frame_dim * 5, c.frame_dim, true));
            rows.push((c.frame_dim, c.frame_dim, true));
        }
        rows.push((c.frame_dim, c.pool_dim, true));
        rows.push((2 * c.pool_dim, c.segment_dim, true));
        rows.push((c.segment_dim, c.embedding_dim, false));
        rows.iter()
            .map(|&(i, o, bn)| i * o + o + if bn { 2 * o } else { 0 })
            .sum()
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        let c = ExtractorConfig::default();
        assert_eq!(counted_params(&c), 7_596_436);
        assert_eq!(model(c).params.numel(), 7_596_436);
        assert_eq!(model(small()).params.numel(), counted_params(&small()));
    }

    #[test]
    fn layer_widths_follow_the_table() {
        let widths: Vec<usize> = model(ExtractorConfig::default()).layer_widths().into_iter().map(|(_, w)| w).collect();
        assert_eq!(widths, vec![512, 512, 512, 512, 512, 1500, 3000, 512, 512]);
    }

    #[test]
    fn embedding_layer_has_no_norm() {
        let m = model(ExtractorConfig::default());
        assert!(m.params.names().iter().any(|n| n == "embedding.w"));
        assert!(!m.params.names().iter().any(|n| n.starts_with("embedding.bn")));
        // One running-statistics slot per normalised layer: all but the embedding.
        assert_eq!(m.stats.len(), 2 + 2 * 3 + 1 + 1);
    }

    #[test]
    fn shrinkage_is_fourteen_frames() {
        let c = ExtractorConfig::default();
        assert_eq!(c.shrinkage(), 2 + 3 * 4);
        assert_eq!(c.min_frames(), 15);
    }

    #[test]
    fn minimum_length_input() {
        let m = model(ExtractorConfig::default());
        let mut rng = stream(2, Purpose::GradCheck, 0);
        let ok = gradcheck::uniform(&mut rng, 15, 20, -1.0, 1.0);
        assert_eq!(m.embed(&ok).unwrap().shape(), &[1, 512]);
        for t in [14, 9] {
            let short = gradcheck::uniform(&mut rng, t, 20, -1.0, 1.0);
            assert!(matches!(m.embed(&short), Err(Error::SegmentTooShort { needed: 15, .. })));
        }
    }

    #[test]
    fn eval_embedding_is_deterministic() {
        let m = model(small());
        let x = gradcheck::uniform(&mut stream(3, Purpose::GradCheck, 0), 20, 4, -1.0, 1.0);
        assert_eq!(m.embed(&x).unwrap(), m.embed(&x).unwrap());
    }

    #[test]
    fn cached_windows_match_direct_crops() {
        let m = model(small());
        let x = gradcheck::uniform(&mut stream(4, Purpose::GradCheck, 0), 40, 4, -1.0, 1.0);
        let cache = m.frame_cache(&x).unwrap();
        let windows = [(0, 40), (3, 15), (10, 30), (25, 15)];
        let fast = m.embed_windows(&cache, &windows).unwrap();
        for (i, &(s, l)) in windows.iter().enumerate() {
            let direct = m.embed(&x.slice_rows(s, s + l).unwrap()).unwrap();
            for (a, b) in fast.row_slice(i).iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        assert!(m.embed_windows(&cache, &[(30, 15)]).is_err());
        assert!(m.embed_windows(&cache, &[(0, 10)]).is_err());
    }

    #[test]
    fn batched_embedding_matches_single() {
        let m = model(small());
        let mut rng = stream(5, Purpose::GradCheck, 0);
        let a = gradcheck::uniform(&mut rng, 16, 4, -1.0, 1.0);
        let b = gradcheck::uniform(&mut rng, 16, 4, -1.0, 1.0);
        let both = m.embed_batch(&Tensor::vstack(&[&a, &b]).unwrap(), 2).unwrap();
        assert!(both.row_slice(1).iter().zip(m.embed(&b).unwrap().data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn residual_block_with_zero_weights_passes_the_skip() {
        let mut m = model(ExtractorConfig {
            residual_blocks: 1,
            ..small()
        });
        let names: Vec<String> = m.params.names().to_vec();
        for n in names.iter().filter(|n| n.starts_with("block0")) {
            let shape = m.params.iter().find(|(k, _)| k == n).unwrap().1.shape().to_vec();
            m.params.assign(n, Tensor::zeros(shape[0], shape[1])).unwrap();
        }
        let l = m.layout.clone();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let mut stats = m.stats.clone();
        let mut pass = Pass {
            p: &bound,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        let x = tape.constant(gradcheck::uniform(&mut stream(6, Purpose::GradCheck, 0), 12, 4, -1.0, 1.0));
        let h = pass.tdnn(&mut tape, x, &TDNN1_CONTEXT, 1, l.tdnn1.0, l.tdnn1.1).unwrap();
        let h = pass.dense_bn_relu(&mut tape, h, l.tdnn2.0, l.tdnn2.1).unwrap();
        let b = &l.blocks[0];
        let skip = tape.trim_frames(h, 1, 2, 2).unwrap();
        let r = pass.tdnn(&mut tape, h, &BLOCK_CONTEXT, 1, b.conv.0, b.conv.1).unwrap();
        let r = pass.affine(&mut tape, r, b.point.0).unwrap();
        let r = pass.norm(&mut tape, r, b.point.1).unwrap();
        let sum = tape.add(r, skip).unwrap();
        let out = tape.relu(sum).unwrap();
        assert_eq!(tape.value(out), tape.value(skip));
    }

    #[test]
    fn archive_round_trip() {
        let m = model(small());
        let mut a = Archive::new("checkpoint", ARCHITECTURE, 1);
        m.to_archive(&mut a, "extractor.").unwrap();
        let back = Extractor::from_archive(&Archive::from_bytes(&a.to_bytes().unwrap()).unwrap(), "extractor.").unwrap();
        assert_eq!(back.config, m.config);
        for (x, y) in back.params.tensors().iter().zip(m.params.tensors()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| *p == *q as f32 as f64));
        }
    }
}
