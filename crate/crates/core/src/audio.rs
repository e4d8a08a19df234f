//! Waveform to normalized magnitude spectrogram.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const FRAME_WIDTH_MS: u32 = 25;
pub const FRAME_STEP_MS: u32 = 10;
pub const SEGMENT_SECONDS: f64 = 3.0;

/// Bins whose standard deviation falls below this are zeroed, not scaled.
const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Framing parameters in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
}

impl Framing {
    pub fn new(sample_rate: u32, width_ms: u32, step_ms: u32) -> Result<Self> {
        let window = (sample_rate as u64 * width_ms as u64 / 1000) as usize;
        let hop = (sample_rate as u64 * step_ms as u64 / 1000) as usize;
        if window < 2 || hop == 0 {
            return Err(Error::Parameter(format!(
                "framing {width_ms} ms / {step_ms} ms at {sample_rate} Hz is degenerate"
            )));
        }
        Ok(Framing {
            sample_rate,
            window,
            hop,
        })
    }

    pub fn standard(sample_rate: u32) -> Result<Self> {
        Self::new(sample_rate, FRAME_WIDTH_MS, FRAME_STEP_MS)
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// `floor((len − W)/H) + 1`, or 0 when the signal is shorter than one window.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Frames in a segment of `seconds` of audio (298 for 3 s at 16 kHz).
    pub fn segment_frames(&self, seconds: f64) -> usize {
        self.frame_count((seconds * self.sample_rate as f64).round() as usize)
    }
}

/// Time × frequency magnitude matrix, row-major with one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
    pub frame_width_ms: u32,
    pub frame_step_ms: u32,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn from_frames(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || bins == 0 || data.len() != frames * bins {
            return Err(Error::dim("spectrogram", &[frames, bins], &[data.len()]));
        }
        Ok(Spectrogram {
            frames,
            bins,
            data,
            frame_width_ms: FRAME_WIDTH_MS,
            frame_step_ms: FRAME_STEP_MS,
            normalized: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    /// Mean magnitude per bin over all frames.
    pub fn mean_spectrum(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for t in 0..self.frames {
            for (acc, v) in m.iter_mut().zip(self.frame(t)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }

    /// `len` frames starting at `start`, wrapping cyclically past the end.
    pub fn cyclic_slice(&self, start: usize, len: usize) -> Spectrogram {
        let mut data = Vec::with_capacity(len * self.bins);
        for i in 0..len {
            data.extend_from_slice(self.frame((start + i) % self.frames));
        }
        Spectrogram {
            frames: len,
            bins: self.bins,
            data,
            ..*self
        }
    }
}

/// Symmetric Hamming window `0.54 − 0.46·cos(2πn/(N−1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Parameter(format!("hamming window needs N >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    let mut w: Vec<f64> = (0..n.div_ceil(2))
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos())
        .collect();
    // mirror the first half so w[n] == w[N-1-n] holds bitwise
    let tail: Vec<f64> = w[..n / 2].iter().rev().copied().collect();
    w.extend(tail);
    Ok(w)
}

/// Magnitude spectrogram with the standard 25 ms / 10 ms hamming framing.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram> {
    spectrogram_with(w, FRAME_WIDTH_MS, FRAME_STEP_MS)
}

pub fn spectrogram_with(w: &Waveform, width_ms: u32, step_ms: u32) -> Result<Spectrogram> {
    let framing = Framing::new(w.sample_rate, width_ms, step_ms)?;
    let frames = framing.frame_count(w.samples.len());
    if frames == 0 {
        return Err(Error::InputTooShort {
            needed: framing.window,
            got: w.samples.len(),
        });
    }
    let window = hamming_window(framing.window)?;
    let bins = framing.bins();
    let fft = FftPlanner::new().plan_fft_forward(framing.window);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); framing.window];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * framing.hop;
        for (b, (&s, &h)) in buf
            .iter_mut()
            .zip(w.samples[start..start + framing.window].iter().zip(&window))
        {
            *b = Complex::new(s * h, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    let mut s = Spectrogram::from_frames(frames, bins, data)?;
    s.frame_width_ms = width_ms;
    s.frame_step_ms = step_ms;
    Ok(s)
}

/// Per-bin standardization over time. Near-constant bins become all zero.
pub fn normalize(s: &Spectrogram) -> Result<Spectrogram> {
    if s.frames < 2 {
        return Err(Error::Parameter(format!(
            "normalization needs at least 2 frames, got {}",
            s.frames
        )));
    }
    let n = s.frames as f64;
    let mean = s.mean_spectrum();
    let mut var = vec![0.0; s.bins];
    for t in 0..s.frames {
        for ((acc, v), m) in var.iter_mut().zip(s.frame(t)).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let mut data = Vec::with_capacity(s.data.len());
    for t in 0..s.frames {
        data.extend(s.frame(t).iter().zip(&mean).zip(&std).map(|((v, m), sd)| {
            if *sd < MIN_STD {
                0.0
            } else {
                (v - m) / sd
            }
        }));
    }
    Ok(Spectrogram {
        data,
        normalized: true,
        ..s.clone()
    })
}

/// A random contiguous run of `seg_frames` frames, or the whole spectrogram
/// repeated cyclically when it is shorter than that.
pub fn sample_segment<R: Rng + ?Sized>(s: &Spectrogram, seg_frames: usize, rng: &mut R) -> Spectrogram {
    if s.frames >= seg_frames {
        let start = rng.gen_range(0..=s.frames - seg_frames);
        s.cyclic_slice(start, seg_frames)
    } else {
        s.cyclic_slice(0, seg_frames)
    }
}

/// Deterministic segments covering the whole utterance with hop = segment
/// length; the last one wraps around to the start.
pub fn cover_segments(s: &Spectrogram, seg_frames: usize) -> Vec<Spectrogram> {
    let count = s.frames.div_ceil(seg_frames).max(1);
    (0..count)
        .map(|i| s.cyclic_slice(i * seg_frames, seg_frames))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dft_magnitudes(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Spectrogram {
        let data = (0..frames * bins).map(|_| rng.gen_range(0.0..5.0)).collect();
        Spectrogram::from_frames(frames, bins, data).unwrap()
    }

    #[test]
    fn hamming_values() {
        for n in [2, 5, 400, 401] {
            let w = hamming_window(n).unwrap();
            assert_eq!(w[0], 0.54 - 0.46);
            for i in 0..n {
                assert_eq!(w[i], w[n - 1 - i]);
            }
            if n % 2 == 1 {
                assert_eq!(w[(n - 1) / 2], 1.0);
            }
        }
        assert!(hamming_window(1).is_err());
    }

    #[test]
    fn silence_gives_98_zero_frames() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let s = spectrogram(&w).unwrap();
        assert_eq!(s.frames(), 98);
        assert_eq!(s.bins(), 201);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(spectrogram(&w), Err(Error::InputTooShort { needed: 400, got: 399 })));
    }

    #[test]
    fn sine_peaks_at_its_bin_and_matches_direct_dft() {
        let sr = 16_000;
        let bin = 25;
        let freq = bin as f64 * sr as f64 / 400.0;
        let samples: Vec<f64> = (0..4000)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples.clone(), sr).unwrap();
        let s = spectrogram(&w).unwrap();
        let win = hamming_window(400).unwrap();
        for t in [0, 7, s.frames() - 1] {
            let row = s.frame(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, bin);
            let frame: Vec<f64> = samples[t * 160..t * 160 + 400]
                .iter()
                .zip(&win)
                .map(|(a, b)| a * b)
                .collect();
            let direct = dft_magnitudes(&frame);
            for (a, b) in row.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_signal_is_dc() {
        let w = Waveform::new(vec![0.3; 800], 16_000).unwrap();
        let s = spectrogram(&w).unwrap();
        for t in 0..s.frames() {
            let row = s.frame(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, 0);
        }
    }

    #[test]
    fn normalize_postconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_spec(&mut rng, 50, 7);
        let n = normalize(&s).unwrap();
        assert!(n.normalized);
        for f in 0..7 {
            let col: Vec<f64> = (0..50).map(|t| n.get(t, f)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
        let nn = normalize(&n).unwrap();
        for (a, b) in n.data().iter().zip(nn.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_constant_bin_is_zero() {
        let mut data = vec![0.0; 20];
        for t in 0..10 {
            data[t * 2] = 3.0;
            data[t * 2 + 1] = t as f64;
        }
        let s = Spectrogram::from_frames(10, 2, data).unwrap();
        let n = normalize(&s).unwrap();
        assert!((0..10).all(|t| n.get(t, 0) == 0.0));
        assert!(n.data().iter().all(|v| v.is_finite()));

        let one = Spectrogram::from_frames(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(normalize(&one).is_err());
    }

    #[test]
    fn segment_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_spec(&mut rng, 10, 3);
        let same = sample_segment(&s, 10, &mut rng);
        assert_eq!(same, s);

        let long = random_spec(&mut rng, 20, 3);
        let a = sample_segment(&long, 10, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_segment(&long, 10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);

        let short = random_spec(&mut rng, 5, 3);
        let padded = sample_segment(&short, 10, &mut rng);
        assert_eq!(padded.frames(), 10);
        assert_eq!(&padded.data()[..15], short.data());
        assert_eq!(&padded.data()[15..], short.data());
    }

    #[test]
    fn segment_frame_count_for_three_seconds() {
        assert_eq!(Framing::standard(16_000).unwrap().segment_frames(3.0), 298);
        assert_eq!(Framing::standard(8_000).unwrap().segment_frames(3.0), 298);
    }

    #[test]
    fn cover_segments_wraps_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_spec(&mut rng, 7, 2);
        let segs = cover_segments(&s, 3);
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[2].frame(0), s.frame(6));
        assert_eq!(segs[2].frame(1), s.frame(0));
        assert_eq!(cover_segments(&s, 7).len(), 1);
    }
}
