use std::path::Path;

use super::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM, mono, 16 kHz WAV file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: expected {DEFAULT_SAMPLE_RATE} Hz, found {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {:?} {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples outside [-1, 1) are clipped.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fmt = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(fmt)?;
    for &v in clip.samples() {
        let q = (v * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(fmt)?;
    }
    writer.finalize().map_err(fmt)
}

/// Value a sample takes after a write/read cycle.
pub(crate) fn quantize(v: f64) -> f64 {
    (v * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) / FULL_SCALE
}
