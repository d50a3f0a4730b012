//! MFCC extraction for 16 kHz mono audio.
//!
//! 400-sample frames with 200-sample hop (25 ms / 12.5 ms), reflection
//! padding of 200 samples on each side, periodic Hann window, magnitude-
//! squared 400-point DFT (201 bins), a 128-filter triangular mel filterbank
//! on `mel(f) = 2595 log10(1 + f/700)` spanning 0-8000 Hz with unit-peak
//! filters, decibel conversion with a 1e-10 power floor, and an orthonormal
//! DCT-II truncated to the first 40 coefficients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// MFCC sequences longer than this many frames are dropped.
pub const FRAME_CAP: usize = 8192;
/// Power floor applied before the decibel conversion.
pub const POWER_FLOOR: f64 = 1e-10;

const PI: f64 = core::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MfccParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub sample_rate: u32,
}

impl Default for MfccParams {
    fn default() -> Self {
        MfccParams {
            n_fft: 400,
            hop: 200,
            n_mels: 128,
            n_mfcc: 40,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl MfccParams {
    pub fn validate(&self) -> Result<()> {
        if self.hop != self.n_fft / 2 {
            return Err(Error::Invalid(alloc::format!(
                "hop must equal n_fft/2 ({} != {})",
                self.hop,
                self.n_fft / 2
            )));
        }
        if self.n_mfcc > self.n_mels {
            return Err(Error::Invalid(alloc::format!(
                "n_mfcc {} exceeds n_mels {}",
                self.n_mfcc,
                self.n_mels
            )));
        }
        Ok(())
    }
}

/// Mono audio, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct RawAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl RawAudio {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        Ok(RawAudio {
            samples,
            sample_rate,
        })
    }

    /// Normalize signed 16-bit PCM to [-1, 1].
    pub fn from_pcm16(samples: &[i16], sample_rate: u32) -> Result<Self> {
        Self::new(
            samples.iter().map(|&s| s as f64 / 32768.0).collect(),
            sample_rate,
        )
    }
}

/// A `T x 40` time-ordered coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    pub frames: Tensor<f64>,
    pub source_id: String,
}

impl MfccSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// True iff the sequence fits the 8192-frame cap (boundary inclusive).
pub fn within_length_limit(seq: &MfccSequence) -> bool {
    seq.num_frames() <= FRAME_CAP
}

/// Number of analysis windows for a signal of `len` samples:
/// `floor(len / hop) + 1` under symmetric n_fft/2 reflection padding.
pub fn frame_count(len: usize, params: &MfccParams) -> usize {
    len / params.hop + 1
}

/// Reflected index (no edge repetition), bouncing for out-of-range offsets.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i % period;
    if j < 0 {
        j += period;
    }
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Split into overlapping frames, each multiplied by a periodic Hann window.
pub fn frame_signal(audio: &RawAudio, params: &MfccParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if audio.sample_rate != params.sample_rate {
        return Err(Error::BadSampleRate(audio.sample_rate));
    }
    if audio.samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let n_fft = params.n_fft;
    let pad = n_fft / 2;
    let n = audio.samples.len();
    let window: Vec<f64> = (0..n_fft)
        .map(|j| 0.5 * (1.0 - (2.0 * PI * j as f64 / n_fft as f64).cos()))
        .collect();

    let t = frame_count(n, params);
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let start = ti * params.hop;
        let mut frame = vec![0.0; n_fft];
        for (j, out) in frame.iter_mut().enumerate() {
            let src = (start + j) as isize - pad as isize;
            *out = audio.samples[reflect_index(src, n)] * window[j];
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Precomputed DFT / mel / DCT tables for a fixed parameter set.
pub struct MfccExtractor {
    params: MfccParams,
    cos_table: Vec<f64>, // (n_fft/2 + 1) x n_fft
    sin_table: Vec<f64>,
    mel_fb: Vec<f64>, // n_mels x (n_fft/2 + 1)
    dct: Vec<f64>,    // n_mfcc x n_mels
}

impl MfccExtractor {
    pub fn new(params: MfccParams) -> Result<Self> {
        params.validate()?;
        let n_fft = params.n_fft;
        let bins = n_fft / 2 + 1;
        let mut cos_table = vec![0.0; bins * n_fft];
        let mut sin_table = vec![0.0; bins * n_fft];
        for k in 0..bins {
            for j in 0..n_fft {
                let angle = 2.0 * PI * (k * j) as f64 / n_fft as f64;
                cos_table[k * n_fft + j] = angle.cos();
                sin_table[k * n_fft + j] = angle.sin();
            }
        }

        let mel_fb = mel_filterbank(&params);

        let n_mels = params.n_mels;
        let mut dct = vec![0.0; params.n_mfcc * n_mels];
        for k in 0..params.n_mfcc {
            let scale = if k == 0 {
                (1.0 / n_mels as f64).sqrt()
            } else {
                (2.0 / n_mels as f64).sqrt()
            };
            for m in 0..n_mels {
                dct[k * n_mels + m] =
                    scale * (PI * k as f64 * (2 * m + 1) as f64 / (2 * n_mels) as f64).cos();
            }
        }

        Ok(MfccExtractor {
            params,
            cos_table,
            sin_table,
            mel_fb,
            dct,
        })
    }

    pub fn params(&self) -> &MfccParams {
        &self.params
    }

    /// Full pipeline: framing, power spectrum, mel energies, dB, DCT-II.
    pub fn process(&self, audio: &RawAudio, source_id: &str) -> Result<MfccSequence> {
        let frames = frame_signal(audio, &self.params)?;
        let n_fft = self.params.n_fft;
        let bins = n_fft / 2 + 1;
        let n_mels = self.params.n_mels;
        let n_mfcc = self.params.n_mfcc;

        let mut out = Tensor::zeros(&[frames.len(), n_mfcc]);
        let mut power = vec![0.0; bins];
        let mut mel_db = vec![0.0; n_mels];
        for (ti, frame) in frames.iter().enumerate() {
            for k in 0..bins {
                let ct = &self.cos_table[k * n_fft..(k + 1) * n_fft];
                let st = &self.sin_table[k * n_fft..(k + 1) * n_fft];
                let mut re = 0.0;
                let mut im = 0.0;
                for j in 0..n_fft {
                    re += frame[j] * ct[j];
                    im -= frame[j] * st[j];
                }
                power[k] = re * re + im * im;
            }
            for m in 0..n_mels {
                let fb = &self.mel_fb[m * bins..(m + 1) * bins];
                let energy: f64 = fb.iter().zip(&power).map(|(&f, &p)| f * p).sum();
                mel_db[m] = 10.0 * energy.max(POWER_FLOOR).log10();
            }
            for k in 0..n_mfcc {
                let row = &self.dct[k * n_mels..(k + 1) * n_mels];
                let coeff: f64 = row.iter().zip(&mel_db).map(|(&d, &e)| d * e).sum();
                let oi = out.idx2(ti, k);
                out.data_mut()[oi] = coeff;
            }
        }

        Ok(MfccSequence {
            frames: out,
            source_id: String::from(source_id),
        })
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (Float::powf(10.0f64, m / 2595.0) - 1.0)
}

/// Unit-peak triangular filters on a uniform mel grid from 0 Hz to Nyquist.
fn mel_filterbank(params: &MfccParams) -> Vec<f64> {
    let bins = params.n_fft / 2 + 1;
    let n_mels = params.n_mels;
    let f_max = params.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = params.sample_rate as f64 / params.n_fft as f64;

    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * bins + k] = v;
        }
    }
    fb
}

/// Linear-domain mel energies for one already-windowed frame (used by the
/// scaling-property tests and the synthetic-data design).
pub fn mel_energies(extractor: &MfccExtractor, frame: &[f64]) -> Vec<f64> {
    let n_fft = extractor.params.n_fft;
    let bins = n_fft / 2 + 1;
    let mut power = vec![0.0; bins];
    for k in 0..bins {
        let mut re = 0.0;
        let mut im = 0.0;
        for j in 0..n_fft {
            re += frame[j] * extractor.cos_table[k * n_fft + j];
            im -= frame[j] * extractor.sin_table[k * n_fft + j];
        }
        power[k] = re * re + im * im;
    }
    (0..extractor.params.n_mels)
        .map(|m| {
            extractor.mel_fb[m * bins..(m + 1) * bins]
                .iter()
                .zip(&power)
                .map(|(&f, &p)| f * p)
                .sum()
        })
        .collect()
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(params: &MfccParams) -> Vec<f64> {
    let mel_max = hz_to_mel(params.sample_rate as f64 / 2.0);
    (1..=params.n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (params.n_mels + 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_second_zero() -> RawAudio {
        RawAudio::new(vec![0.0; 16000], SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_count_examples() {
        let p = MfccParams::default();
        assert_eq!(frame_count(16000, &p), 81);
        assert_eq!(frame_count(200, &p), 2);
    }

    #[test]
    fn frame_signal_window_counts_match_formula() {
        let p = MfccParams::default();
        for len in [1usize, 7, 199, 200, 201, 400, 1234, 16000] {
            let audio = RawAudio::new(vec![0.1; len], SAMPLE_RATE).unwrap();
            let frames = frame_signal(&audio, &p).unwrap();
            assert_eq!(frames.len(), len / 200 + 1, "len {len}");
        }
    }

    #[test]
    fn zero_signal_gives_zero_windows() {
        let p = MfccParams::default();
        let frames = frame_signal(&one_second_zero(), &p).unwrap();
        assert!(frames.iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert_eq!(
            RawAudio::new(vec![], SAMPLE_RATE).unwrap_err(),
            Error::EmptyAudio
        );
    }

    #[test]
    fn zero_signal_mfcc_is_analytic() {
        let ext = MfccExtractor::new(MfccParams::default()).unwrap();
        let seq = ext.process(&one_second_zero(), "zero").unwrap();
        // All mel powers hit the floor: every dB value is -100, so DCT
        // coefficient 0 is -100 * sqrt(1/128) * 128 and the rest vanish.
        let c0 = -100.0 * (1.0f64 / 128.0).sqrt() * 128.0;
        for t in 0..seq.num_frames() {
            assert_abs_diff_eq!(seq.frames.at2(t, 0), c0, epsilon = 1e-9);
            for k in 1..40 {
                assert_abs_diff_eq!(seq.frames.at2(t, k), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn length_cap_boundaries() {
        let mk = |t: usize| MfccSequence {
            frames: Tensor::zeros(&[t, 40]),
            source_id: String::from("x"),
        };
        assert!(within_length_limit(&mk(1)));
        assert!(within_length_limit(&mk(8192)));
        assert!(!within_length_limit(&mk(8193)));
    }

    #[test]
    fn amplitude_scaling_shifts_live_bands_uniformly() {
        let params = MfccParams::default();
        let ext = MfccExtractor::new(params.clone()).unwrap();
        // Broadband signal keeps every non-empty mel band above the floor.
        let mut state = 123456789u64;
        let samples: Vec<f64> = (0..4000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        let audio = RawAudio::new(samples.clone(), SAMPLE_RATE).unwrap();
        let c = 3.0;
        let scaled = RawAudio::new(samples.iter().map(|&s| s * c).collect(), SAMPLE_RATE).unwrap();
        let a = ext.process(&audio, "a").unwrap();
        let b = ext.process(&scaled, "b").unwrap();
        let shift = 10.0 * (c * c).log10();
        // The narrowest filters fall entirely between DFT bins and stay at
        // the dB floor regardless of amplitude; every other band shifts by a
        // constant, so the coefficient change is the DCT of that pattern.
        let bins = params.n_fft / 2 + 1;
        let fb = mel_filterbank(&params);
        let live: Vec<bool> = (0..params.n_mels)
            .map(|m| fb[m * bins..(m + 1) * bins].iter().any(|&w| w > 0.0))
            .collect();
        assert!(live.iter().filter(|&&l| !l).count() > 0);
        let j_total = params.n_mels as f64;
        let expected: Vec<f64> = (0..params.n_mfcc)
            .map(|k| {
                let scale = if k == 0 { (1.0 / j_total).sqrt() } else { (2.0 / j_total).sqrt() };
                let sum: f64 = live
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l)
                    .map(|(j, _)| (PI * (j as f64 + 0.5) * k as f64 / j_total).cos())
                    .sum();
                scale * shift * sum
            })
            .collect();
        for t in 0..a.num_frames() {
            for k in 0..params.n_mfcc {
                assert_abs_diff_eq!(
                    b.frames.at2(t, k) - a.frames.at2(t, k),
                    expected[k],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let ext = MfccExtractor::new(MfccParams::default()).unwrap();
        let samples: Vec<f64> = (0..3200)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let audio = RawAudio::new(samples, SAMPLE_RATE).unwrap();
        let a = ext.process(&audio, "a").unwrap();
        let b = ext.process(&audio, "a").unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn output_is_finite_for_extreme_inputs() {
        let ext = MfccExtractor::new(MfccParams::default()).unwrap();
        for signal in [vec![0.0; 800], vec![1.0; 800], vec![-1.0; 800]] {
            let audio = RawAudio::new(signal, SAMPLE_RATE).unwrap();
            let seq = ext.process(&audio, "x").unwrap();
            assert!(seq.frames.all_finite());
        }
    }
}
