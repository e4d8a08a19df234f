use std::path::Path;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Reads a mono 16-bit PCM WAV file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat {
            field: "sample_format",
            detail: format!("{:?} in {}, expected integer PCM", spec.sample_format, path.display()),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            field: "bits_per_sample",
            detail: format!("{} in {}, expected 16", spec.bits_per_sample, path.display()),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat {
            field: "channels",
            detail: format!("{} in {}, expected 1", spec.channels, path.display()),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Waveform::new(samples, spec.sample_rate).map_err(|_| Error::UnsupportedFormat {
        field: "data",
        detail: format!("{} contains no samples", path.display()),
    })
}

/// Writes mono 16-bit PCM; samples are clamped to [−1, 1) and rounded.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &w.samples {
        writer
            .write_sample(quantize(s))
            .map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

pub(crate) fn quantize(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Value a sample takes after a write/read round trip.
pub fn pcm16_roundtrip(s: f64) -> f64 {
    quantize(s) as f64 / PCM_SCALE
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::UnsupportedFormat {
            field: "header",
            detail: format!("{}: {msg}", path.display()),
        },
        hound::Error::Unsupported => Error::UnsupportedFormat {
            field: "header",
            detail: format!("{}: unsupported WAV variant", path.display()),
        },
        other => Error::UnsupportedFormat {
            field: "data",
            detail: format!("{}: {other}", path.display()),
        },
    }
}
