//! 20-dimensional MFCC front end.
//!
//! 25 ms Hann-windowed frames every 10 ms, 512-point magnitude spectrum,
//! 40 triangular mel filters over 20–7600 Hz, log energies floored at
//! 1e-10, orthonormal DCT-II keeping c0..c19, then per-utterance cepstral
//! mean subtraction.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::wav::Waveform;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;
pub const FRAME_LENGTH: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL: usize = 40;
pub const NUM_CEPS: usize = 20;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// `T × 20` cepstral frames for one utterance or segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Tensor,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.cols() != NUM_CEPS || frames.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "feature_matrix",
                left: frames.shape().to_vec(),
                right: vec![NUM_CEPS],
            });
        }
        Ok(FeatureMatrix {
            frames,
            frame_shift_ms: FRAME_SHIFT as f64 * 1000.0 / SAMPLE_RATE as f64,
            frame_length_ms: FRAME_LENGTH as f64 * 1000.0 / SAMPLE_RATE as f64,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn window(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::UtteranceTooShort {
                frames: self.num_frames(),
                needed: start + len,
            });
        }
        FeatureMatrix::new(self.frames.slice_rows(start, start + len)?)
    }

    /// Per-coefficient mean over frames.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; NUM_CEPS];
        for r in 0..self.num_frames() {
            for (m, v) in mean.iter_mut().zip(self.frames.row_slice(r)) {
                *m += v;
            }
        }
        let n = self.num_frames() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Number of full frames in `samples` samples.
pub fn frame_count(samples: usize) -> usize {
    if samples < FRAME_LENGTH {
        0
    } else {
        (samples - FRAME_LENGTH) / FRAME_SHIFT + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT matrix and FFT plan.
pub struct Mfcc {
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for Mfcc {
    fn default() -> Self {
        Self::new()
    }
}

impl Mfcc {
    pub fn new() -> Self {
        let window = (0..FRAME_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LENGTH - 1) as f64).cos())
            .collect();

        let bins = FFT_SIZE / 2 + 1;
        let lo = hz_to_mel(MEL_LOW_HZ);
        let hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..NUM_MEL + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL + 1) as f64))
            .collect();
        let filters = (0..NUM_MEL)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                        let w = if f > left && f <= center {
                            (f - left) / (center - left)
                        } else if f > center && f < right {
                            (right - f) / (right - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();

        let n = NUM_MEL as f64;
        let mut dct = vec![0.0; NUM_CEPS * NUM_MEL];
        for k in 0..NUM_CEPS {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..NUM_MEL {
                dct[k * NUM_MEL + i] =
                    scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos();
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Mfcc {
            window,
            filters,
            dct,
            fft,
        }
    }

    /// Cepstra before mean subtraction.
    pub fn raw(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::WrongSampleRate {
                expected: SAMPLE_RATE,
                actual: w.sample_rate,
            });
        }
        let frames = frame_count(w.len());
        if frames == 0 {
            return Err(Error::SignalTooShort {
                samples: w.len(),
                needed: FRAME_LENGTH,
            });
        }
        let mut out = Vec::with_capacity(frames * NUM_CEPS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; FFT_SIZE / 2 + 1];
        let mut logmel = vec![0.0; NUM_MEL];
        for t in 0..frames {
            let frame = &w.samples[t * FRAME_SHIFT..t * FRAME_SHIFT + FRAME_LENGTH];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < FRAME_LENGTH {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (l, filt) in logmel.iter_mut().zip(&self.filters) {
                let e: f64 = filt.iter().map(|&(k, wt)| wt * mag[k]).sum();
                *l = e.max(LOG_FLOOR).ln();
            }
            for k in 0..NUM_CEPS {
                let row = &self.dct[k * NUM_MEL..(k + 1) * NUM_MEL];
                out.push(row.iter().zip(&logmel).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::matrix(frames, NUM_CEPS, out)
    }

    /// Cepstra with per-utterance mean subtraction.
    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let mut raw = self.raw(w)?;
        let frames = raw.rows();
        let mut mean = [0.0; NUM_CEPS];
        for row in raw.data().chunks_exact(NUM_CEPS) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames as f64);
        for row in raw.data_mut().chunks_exact_mut(NUM_CEPS) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        FeatureMatrix::new(raw)
    }
}

/// Convenience wrapper building a one-off [`Mfcc`].
pub fn mfcc(w: &Waveform) -> Result<FeatureMatrix> {
    Mfcc::new().compute(w)
}

/// Uniformly random contiguous crop of exactly `length` frames.
pub fn sample_segment(f: &FeatureMatrix, length: usize, rng: &mut impl Rng) -> Result<FeatureMatrix> {
    let total = f.num_frames();
    if length == 0 || length > total {
        return Err(Error::UtteranceTooShort {
            frames: total,
            needed: length,
        });
    }
    let start = rng.gen_range(0..=total - length);
    f.window(start, length)
}
