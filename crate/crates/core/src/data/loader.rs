use std::path::Path;

use rand::Rng;

use super::{Manifest, MixtureRecord, Split};
use crate::dsp::{self, fit_frames, stft, AudioClip, FitMode, SpectrogramComplex, StftConfig};
use crate::error::{Error, Result};

/// Audio of one manifest record.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub index: usize,
    pub record: MixtureRecord,
    pub clean: AudioClip,
    pub noise: AudioClip,
    pub noisy: AudioClip,
}

/// Aligned (clean spectrogram, noisy waveform, noisy spectrogram).
#[derive(Clone, Debug)]
pub struct Example {
    pub index: usize,
    pub id: String,
    pub snr_db: f64,
    pub clean: SpectrogramComplex,
    pub noisy_audio: AudioClip,
    pub noisy: SpectrogramComplex,
}

/// One split of a manifest, read lazily.
#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: Manifest,
    indices: Vec<usize>,
    stft: StftConfig,
    target_frames: usize,
}

pub fn load_dataset(
    manifest: &Path,
    split: Split,
    stft_cfg: &StftConfig,
    target_frames: usize,
) -> Result<Dataset> {
    let manifest = Manifest::load(manifest)?;
    Dataset::new(manifest, split, stft_cfg, target_frames)
}

impl Dataset {
    pub fn new(
        manifest: Manifest,
        split: Split,
        stft_cfg: &StftConfig,
        target_frames: usize,
    ) -> Result<Self> {
        stft_cfg.validate()?;
        if target_frames == 0 {
            return Err(Error::invalid("target_frames must be positive"));
        }
        let indices = manifest.split(split).into_iter().map(|(i, _)| i).collect();
        Ok(Self {
            manifest,
            indices,
            stft: stft_cfg.clone(),
            target_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> impl Iterator<Item = (usize, &MixtureRecord)> {
        self.indices.iter().map(|&i| (i, &self.manifest.records[i]))
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn target_frames(&self) -> usize {
        self.target_frames
    }

    /// Reads the audio of the `k`-th record in this split.
    pub fn load(&self, k: usize) -> Result<LoadedRecord> {
        let index = self.indices[k];
        let record = &self.manifest.records[index];
        let read = |rel: &Path| {
            dsp::read_wav(&self.manifest.resolve(rel)).map_err(|e| {
                Error::Data(format!("record {index} ({}): {e}", record.id))
            })
        };
        let clean = read(&record.clean_path)?;
        let noise = read(&record.noise_path)?;
        let noisy = read(&record.noisy_path)?;
        if clean.len() != noisy.len() || noise.len() != noisy.len() {
            return Err(Error::Data(format!(
                "record {index} ({}): component lengths differ",
                record.id
            )));
        }
        Ok(LoadedRecord {
            index,
            record: record.clone(),
            clean,
            noise,
            noisy,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedRecord>> {
        (0..self.len()).map(|k| self.load(k)).collect()
    }

    /// Examples in manifest order, left-aligned to `target_frames`.
    pub fn iter(&self) -> impl Iterator<Item = Result<Example>> + '_ {
        (0..self.len()).map(move |k| {
            let rec = self.load(k)?;
            example(&rec, &self.stft, self.target_frames, None::<&mut rand_chacha::ChaCha8Rng>)
        })
    }
}

/// Builds an example from loaded audio. With an RNG, clean and noisy are
/// cropped at the same random offset.
pub(crate) fn example<R: Rng + Clone>(
    rec: &LoadedRecord,
    cfg: &StftConfig,
    target_frames: usize,
    rng: Option<&mut R>,
) -> Result<Example> {
    let clean_full = stft(&rec.clean, cfg)?;
    let noisy_full = stft(&rec.noisy, cfg)?;
    let (clean, noisy) = match rng {
        None => (
            fit_frames(&clean_full, target_frames, FitMode::<R>::Inference)?,
            fit_frames(&noisy_full, target_frames, FitMode::<R>::Inference)?,
        ),
        Some(rng) => {
            // Equal frame counts, so a cloned generator draws the same crop.
            let mut twin = rng.clone();
            let c = fit_frames(&clean_full, target_frames, FitMode::Training(rng))?;
            let n = fit_frames(&noisy_full, target_frames, FitMode::Training(&mut twin))?;
            (c, n)
        }
    };
    Ok(Example {
        index: rec.index,
        id: rec.record.id.clone(),
        snr_db: rec.record.snr_db,
        clean,
        noisy_audio: rec.noisy.clone(),
        noisy,
    })
}
