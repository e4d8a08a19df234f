//! Manifests, trial lists, WAV I/O and the synthetic speaker generator.

mod manifest;
mod synthetic;
mod trials;
mod wav;

use std::collections::HashMap;
use std::path::Path;

pub use manifest::{load_manifest, parse_manifest, write_manifest, Manifest, ManifestEntry};
pub use synthetic::{
    NuisanceProfile, SpeakerSignature, SyntheticConfig, SyntheticDataset, SyntheticUtterance,
};
pub use trials::{
    load_trials, parse_nuisance, parse_trials, trials_to_text, validate_trials, TrialPair,
};
pub use wav::{pcm16_roundtrip, read_wav, write_wav};

use crate::audio::{self, Spectrogram, Waveform};
use crate::error::{Error, Result};

/// Normalized spectrograms of a set of utterances with their speaker indices.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub speakers: Vec<usize>,
    pub num_speakers: usize,
    pub spectrograms: Vec<Spectrogram>,
    pub sample_rate: u32,
}

impl FeatureSet {
    pub fn from_waveforms(
        ids: Vec<String>,
        speakers: Vec<usize>,
        num_speakers: usize,
        waves: &[Waveform],
    ) -> Result<Self> {
        let sample_rate = waves.first().map(|w| w.sample_rate).unwrap_or(0);
        if waves.iter().any(|w| w.sample_rate != sample_rate) {
            return Err(Error::Validation("utterances have mixed sample rates".into()));
        }
        let spectrograms = waves
            .iter()
            .map(|w| audio::normalize(&audio::spectrogram(w)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet {
            ids,
            speakers,
            num_speakers,
            spectrograms,
            sample_rate,
        })
    }

    /// Reads and featurizes every utterance of a manifest.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let waves = manifest
            .entries
            .iter()
            .map(|e| read_wav(&manifest.resolve(e)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(
            manifest.entries.iter().map(|e| e.id.clone()).collect(),
            manifest.entries.iter().map(|e| e.speaker).collect(),
            manifest.num_speakers(),
            &waves,
        )
    }

    /// Speakers re-indexed relative to this set (0-based, order of first appearance).
    pub fn from_synthetic(ds: &SyntheticDataset) -> Result<Self> {
        let mut index = HashMap::new();
        let speakers: Vec<usize> = ds
            .utterances
            .iter()
            .map(|u| {
                let n = index.len();
                *index.entry(u.speaker).or_insert(n)
            })
            .collect();
        let waves: Vec<Waveform> = ds.utterances.iter().map(|u| u.waveform.clone()).collect();
        Self::from_waveforms(
            ds.utterances.iter().map(|u| u.id.clone()).collect(),
            speakers,
            index.len(),
            &waves,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.spectrograms.first().map(|s| s.bins()).unwrap_or(0)
    }
}

pub const NUISANCE_FILE: &str = "nuisance.txt";

/// Reads the `nuisance.txt` that sits next to a synthetic manifest.
pub fn load_nuisance(path: &Path) -> Result<HashMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nuisance(&text, &path.display().to_string())
}
