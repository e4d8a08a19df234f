//! Synthetic speakers with two independent ground-truth factors.
//!
//! Identity is a set of three low-frequency harmonics with formant-shaped
//! amplitudes, voiced in random syllable bursts. The nuisance factor is one of
//! `n_nuisance` band-limited noise classes in the upper part of the spectrum, each with its own band and amplitude-modulation
//! rate, mixed in at a random gain after a random onset. Both factors are
//! time-varying so that they survive per-bin normalization.
//!
//! Every random draw comes from a ChaCha stream keyed by (seed, purpose, index),
//! so speaker `i` looks the same in any dataset built from the same seed.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::manifest::{write_manifest, Manifest};
use super::trials::{trials_to_text, TrialPair};
use super::wav::{pcm16_roundtrip, write_wav};
use crate::audio::{Framing, Waveform};
use crate::error::{Error, Result};

const STREAM_NUISANCE: u64 = 1 << 20;
const STREAM_SPEAKER: u64 = 2 << 20;
const STREAM_TRIALS: u64 = 3 << 20;
const STREAM_UTTERANCE: u64 = 1 << 32;

const SPEECH_LEVEL: f64 = 0.12;
const NOISE_LEVEL: f64 = 0.05;
// The floor must bury the harmonics' window leakage, or every bin ends up
// following the syllable envelope and identity dominates raw similarity.
const FLOOR_LEVEL: f64 = 0.02;
const BROADBAND: f64 = 0.05;
const ONSET_MAX: f64 = 0.5;

// Identity lives below HARMONIC_TOP of the band, nuisance between the other
// two fractions, so the factors never share a bin.
const HARMONIC_TOP: f64 = 0.45;
const NUISANCE_BOTTOM: f64 = 0.55;
const NUISANCE_TOP: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_speakers: usize,
    pub n_nuisance: usize,
    pub utts_per_speaker: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Global index of the first speaker; lets an evaluation set draw fresh
    /// speakers that share the nuisance classes of a training set.
    pub first_speaker: usize,
}

impl SyntheticConfig {
    pub fn new(n_speakers: usize, n_nuisance: usize, utts_per_speaker: usize) -> Self {
        SyntheticConfig {
            n_speakers,
            n_nuisance,
            utts_per_speaker,
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            duration_secs: 4.0,
            first_speaker: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(what.to_string()))
            }
        };
        check(self.n_speakers >= 2, "synthetic dataset needs at least 2 speakers")?;
        check(self.n_nuisance >= 2, "synthetic dataset needs at least 2 nuisance classes")?;
        check(self.utts_per_speaker >= 2, "synthetic dataset needs at least 2 utterances per speaker")?;
        check(self.sample_rate >= 4000, "synthetic sample rate must be at least 4000 Hz")?;
        check(self.duration_secs >= 0.5, "synthetic utterances must be at least 0.5 s")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSignature {
    /// Spectrogram bins of the three harmonics, ascending.
    pub harmonic_bins: [usize; 3],
    pub amplitudes: [f64; 3],
    /// Rotation applied to the per-utterance nuisance class cycle.
    nuisance_rotation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceProfile {
    pub center_bin: f64,
    pub width_bins: f64,
    pub am_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    /// Global speaker index (`first_speaker + local index`).
    pub speaker: usize,
    pub nuisance: usize,
    pub gain: f64,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub speakers: Vec<SpeakerSignature>,
    pub nuisance: Vec<NuisanceProfile>,
    pub utterances: Vec<SyntheticUtterance>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn nuisance_profile(seed: u64, class: usize, n_classes: usize, bins: usize) -> NuisanceProfile {
    let mut rng = stream(seed, STREAM_NUISANCE + class as u64);
    // band centres share the upper part of the spectrum, above every harmonic
    let span = bins as f64 * (NUISANCE_TOP - NUISANCE_BOTTOM) / n_classes as f64;
    NuisanceProfile {
        center_bin: bins as f64 * NUISANCE_BOTTOM + span * (class as f64 + rng.gen_range(0.25..0.75)),
        width_bins: bins as f64 * rng.gen_range(0.08..0.15),
        am_hz: rng.gen_range(1.0..7.0),
    }
}

fn speaker_signature(seed: u64, speaker: usize, n_nuisance: usize, bins: usize) -> SpeakerSignature {
    let mut rng = stream(seed, STREAM_SPEAKER + speaker as u64);
    let (lo, hi) = (4, ((bins as f64 * HARMONIC_TOP) as usize).max(16));
    let mut harmonic_bins = [0usize; 3];
    loop {
        for b in &mut harmonic_bins {
            *b = rng.gen_range(lo..hi);
        }
        harmonic_bins.sort_unstable();
        if harmonic_bins[1] >= harmonic_bins[0] + 4 && harmonic_bins[2] >= harmonic_bins[1] + 4 {
            break;
        }
    }
    // two formants shape the harmonic amplitudes into [0.6, 1]
    let formants: [(f64, f64); 2] = [
        (rng.gen_range(lo as f64..hi as f64), rng.gen_range(8.0..25.0)),
        (rng.gen_range(lo as f64..hi as f64), rng.gen_range(8.0..25.0)),
    ];
    let env = |b: usize| -> f64 {
        formants
            .iter()
            .map(|(c, w)| (-((b as f64 - c) / w).powi(2) / 2.0).exp())
            .sum()
    };
    let raw: Vec<f64> = harmonic_bins.iter().map(|&b| env(b)).collect();
    let max = raw.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let mut amplitudes = [0.0; 3];
    for (a, r) in amplitudes.iter_mut().zip(&raw) {
        *a = 0.6 + 0.4 * r / max;
    }
    SpeakerSignature {
        harmonic_bins,
        amplitudes,
        nuisance_rotation: rng.gen_range(0..n_nuisance),
    }
}

/// Raised-cosine on/off envelope of random syllable lengths.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = (0.02 * sr) as usize;
    let mut t = (rng.gen_range(0.0..0.15) * sr) as usize;
    while t < n {
        let on = (rng.gen_range(0.08..0.30) * sr) as usize;
        let off = (rng.gen_range(0.04..0.20) * sr) as usize;
        for i in 0..on.min(n - t) {
            let edge = i.min(on - 1 - i);
            env[t + i] = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
        }
        t += on + off;
    }
    env
}

impl SyntheticDataset {
    pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let framing = Framing::standard(config.sample_rate)?;
        let bins = framing.bins();
        let sr = config.sample_rate as f64;
        let n = (config.duration_secs * sr).round() as usize;
        // an n-point FFT index k sits at k·sr/n Hz = k·W/n spectrogram bins
        let fft_to_bin = framing.window as f64 / n as f64;

        let nuisance: Vec<NuisanceProfile> = (0..config.n_nuisance)
            .map(|k| nuisance_profile(seed, k, config.n_nuisance, bins))
            .collect();
        let speakers: Vec<SpeakerSignature> = (0..config.n_speakers)
            .map(|i| speaker_signature(seed, config.first_speaker + i, config.n_nuisance, bins))
            .collect();

        let mut utterances = Vec::with_capacity(config.n_speakers * config.utts_per_speaker);
        for (local, sig) in speakers.iter().enumerate() {
            let speaker = config.first_speaker + local;
            for u in 0..config.utts_per_speaker {
                let mut rng = stream(
                    seed,
                    STREAM_UTTERANCE + (speaker as u64) * 100_000 + u as u64,
                );
                let class = (u + sig.nuisance_rotation) % config.n_nuisance;
                let profile = &nuisance[class];
                let gain = rng.gen_range(0.5..2.0);
                let onset = rng.gen_range(0.0..ONSET_MAX);

                let env = syllable_envelope(&mut rng, n, sr);
                let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                let freqs: Vec<f64> = sig
                    .harmonic_bins
                    .iter()
                    .map(|&b| b as f64 * sr / framing.window as f64)
                    .collect();

                let noise = shaped_noise(&mut rng, n, profile, fft_to_bin);
                let am_phase = rng.gen_range(0.0..2.0 * PI);
                let ramp = 0.05 * sr;
                let onset_sample = onset * sr;

                let samples: Vec<f64> = (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        let voiced: f64 = (0..3)
                            .map(|h| sig.amplitudes[h] * (2.0 * PI * freqs[h] * t + phases[h]).sin())
                            .sum();
                        let speech = SPEECH_LEVEL * env[i] * voiced;
                        let gate = ((i as f64 - onset_sample) / ramp).clamp(0.0, 1.0);
                        let am = 1.0 + 0.9 * (2.0 * PI * profile.am_hz * t + am_phase).sin();
                        let floor = FLOOR_LEVEL * rng.sample::<f64, _>(StandardNormal);
                        let s = speech + gain * NOISE_LEVEL * gate * am * noise[i] + floor;
                        pcm16_roundtrip(s.clamp(-1.0, 32767.0 / 32768.0))
                    })
                    .collect();
                utterances.push(SyntheticUtterance {
                    id: format!("spk{speaker:03}_utt{u:03}"),
                    speaker,
                    nuisance: class,
                    gain,
                    waveform: Waveform::new(samples, config.sample_rate)?,
                });
            }
        }
        Ok(SyntheticDataset {
            config: config.clone(),
            speakers,
            nuisance,
            utterances,
        })
    }

    pub fn wav_path(id: &str) -> PathBuf {
        PathBuf::from("wavs").join(format!("{id}.wav"))
    }

    pub fn manifest(&self, root: impl Into<PathBuf>) -> Manifest {
        Manifest::from_entries(
            self.utterances
                .iter()
                .map(|u| (u.id.clone(), format!("spk{:03}", u.speaker), Self::wav_path(&u.id))),
            root,
        )
        .expect("generated ids are unique and non-empty")
    }

    pub fn nuisance_text(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            let _ = writeln!(s, "{} {}", u.id, u.nuisance);
        }
        s
    }

    /// One same-speaker and one different-speaker trial per utterance.
    ///
    /// Stratified on the nuisance factor: the same-speaker partner is drawn
    /// from a different nuisance class and the different-speaker partner from
    /// the same class whenever such candidates exist, so nuisance similarity
    /// works against correct decisions.
    pub fn balanced_trials(&self, seed: u64) -> Vec<TrialPair> {
        let mut rng = stream(seed, STREAM_TRIALS);
        let us = &self.utterances;
        let mut out = Vec::with_capacity(2 * us.len());
        for (i, u) in us.iter().enumerate() {
            let pick = |rng: &mut ChaCha8Rng, pred: &dyn Fn(&SyntheticUtterance) -> bool, fallback: &dyn Fn(&SyntheticUtterance) -> bool| {
                let strict: Vec<usize> = (0..us.len()).filter(|&j| j != i && pred(&us[j])).collect();
                let pool = if strict.is_empty() {
                    (0..us.len()).filter(|&j| j != i && fallback(&us[j])).collect()
                } else {
                    strict
                };
                pool.choose(rng).copied()
            };
            if let Some(j) = pick(
                &mut rng,
                &|v| v.speaker == u.speaker && v.nuisance != u.nuisance,
                &|v| v.speaker == u.speaker,
            ) {
                out.push(TrialPair {
                    same_speaker: true,
                    utt_a: u.id.clone(),
                    utt_b: us[j].id.clone(),
                });
            }
            if let Some(j) = pick(
                &mut rng,
                &|v| v.speaker != u.speaker && v.nuisance == u.nuisance,
                &|v| v.speaker != u.speaker,
            ) {
                out.push(TrialPair {
                    same_speaker: false,
                    utt_a: u.id.clone(),
                    utt_b: us[j].id.clone(),
                });
            }
        }
        out
    }

    /// Writes `wavs/*.wav`, `manifest.txt`, `nuisance.txt` and `trials.txt`.
    pub fn write_to(&self, dir: &Path, trial_seed: u64) -> Result<Manifest> {
        let wav_dir = dir.join("wavs");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for u in &self.utterances {
            write_wav(&dir.join(Self::wav_path(&u.id)), &u.waveform)?;
        }
        let manifest = self.manifest(dir);
        write_manifest(&dir.join("manifest.txt"), &manifest)?;
        let np = dir.join(super::NUISANCE_FILE);
        std::fs::write(&np, self.nuisance_text()).map_err(|e| Error::io(&np, e))?;
        let tp = dir.join("trials.txt");
        std::fs::write(&tp, trials_to_text(&self.balanced_trials(trial_seed)))
            .map_err(|e| Error::io(&tp, e))?;
        Ok(manifest)
    }
}

/// Unit-RMS noise with a Gaussian band profile, shaped in the frequency domain.
fn shaped_noise(rng: &mut ChaCha8Rng, n: usize, profile: &NuisanceProfile, fft_to_bin: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k) as f64 * fft_to_bin;
        let z = (bin - profile.center_bin) / profile.width_bins;
        *c *= BROADBAND + (-z * z / 2.0).exp();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}
