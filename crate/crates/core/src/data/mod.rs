//! Synthetic parallel corpus: generation, SNR mixing, manifests and loading.

mod loader;
mod synth;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

pub use loader::{load_dataset, Dataset, Example, LoadedRecord};
pub use synth::{synth_noise, synth_speech, NoiseKind};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Peak level of every synthesized mixture.
pub const MIX_PEAK: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// How per-record SNRs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SnrSpec {
    /// Uniform over [lo, hi] dB.
    Range { lo: f64, hi: f64 },
    /// Uniform choice from a fixed set.
    Set(Vec<f64>),
}

impl SnrSpec {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            SnrSpec::Range { lo, hi } if lo == hi => *lo,
            SnrSpec::Range { lo, hi } => rng.random_range(*lo..=*hi),
            SnrSpec::Set(v) => v[rng.random_range(0..v.len())],
        }
    }

    pub fn contains(&self, snr: f64) -> bool {
        match self {
            SnrSpec::Range { lo, hi } => snr >= *lo && snr <= *hi,
            SnrSpec::Set(v) => v.contains(&snr),
        }
    }
}

/// Parses `LO:HI` or a comma-separated set such as `0,5,10,15`.
impl FromStr for SnrSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("bad SNR value {t:?}")))
        };
        if let Some((lo, hi)) = s.split_once(':') {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if lo > hi {
                return Err(Error::Config(format!("SNR range {s:?} is reversed")));
            }
            return Ok(SnrSpec::Range { lo, hi });
        }
        let set = s.split(',').map(num).collect::<Result<Vec<_>>>()?;
        Ok(SnrSpec::Set(set))
    }
}

impl fmt::Display for SnrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrSpec::Range { lo, hi } => write!(f, "{lo}:{hi}"),
            SnrSpec::Set(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl TryFrom<String> for SnrSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SnrSpec> for String {
    fn from(s: SnrSpec) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub noisy_path: PathBuf,
    pub snr_db: f64,
    pub split: Split,
    pub seed: u64,
}

/// Manifest records with the directory their paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MixtureRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    /// Writes `manifest.jsonl` into `root`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Records of one split with their manifest indices.
    pub fn split(&self, split: Split) -> Vec<(usize, &MixtureRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .collect()
    }
}

/// Result of mixing: all three signals share the final peak gain.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: AudioClip,
    pub clean: AudioClip,
    /// Noise component as it appears in `noisy`.
    pub noise: AudioClip,
    /// Gain g applied to the raw noise before peak normalisation.
    pub noise_gain: f64,
    /// Common gain applied last.
    pub peak_gain: f64,
}

/// Loops `noise` from `offset` until it covers `len` samples.
pub fn loop_noise(noise: &AudioClip, len: usize, offset: usize) -> Result<AudioClip> {
    if noise.is_empty() {
        return Err(Error::invalid("noise clip is empty"));
    }
    let n = noise.samples();
    let v = (0..len).map(|i| n[(offset + i) % n.len()]).collect();
    AudioClip::new(v, noise.sample_rate())
}

/// Mixes at the requested SNR. Noise of a different length is looped or
/// cropped from its start. The mixture is scaled to peak [`MIX_PEAK`].
pub fn mix_at_snr(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid("clean and noise sample rates differ"));
    }
    let noise = if noise.len() == clean.len() {
        noise.clone()
    } else {
        loop_noise(noise, clean.len(), 0)?
    };
    let (pc, pn) = (clean.power(), noise.power());
    if pc == 0.0 {
        return Err(Error::invalid("clean signal is silent"));
    }
    if pn == 0.0 {
        return Err(Error::invalid("noise signal is silent"));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise = noise.scaled(g);
    let sum: Vec<f64> = clean
        .samples()
        .iter()
        .zip(scaled_noise.samples())
        .map(|(c, n)| c + n)
        .collect();
    let peak = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_gain = if peak > 0.0 { MIX_PEAK / peak } else { 1.0 };
    let noisy = AudioClip::new(sum, clean.sample_rate())?.scaled(peak_gain);
    Ok(Mixture {
        noisy,
        clean: clean.scaled(peak_gain),
        noise: scaled_noise.scaled(peak_gain),
        noise_gain: g,
        peak_gain,
    })
}

/// 10·log10 of the clean-to-noise power ratio.
pub fn measured_snr(clean: &AudioClip, noise: &AudioClip) -> f64 {
    10.0 * (clean.power() / noise.power()).log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub snr: SnrSpec,
    /// Clip length in samples (2.1 s at 16 kHz by default).
    pub clip_samples: usize,
    /// Length of each noise source before looping.
    pub noise_samples: usize,
    pub noise_kinds: Vec<NoiseKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_train: 200,
            num_valid: 20,
            num_test: 20,
            snr: SnrSpec::Range { lo: 0.0, hi: 20.0 },
            clip_samples: 33_600,
            noise_samples: 24_000,
            noise_kinds: NoiseKind::ALL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_samples == 0 || self.noise_samples == 0 {
            return Err(Error::Config("clip and noise lengths must be positive".into()));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::Config("at least one noise kind is required".into()));
        }
        if let SnrSpec::Set(v) = &self.snr {
            if v.is_empty() {
                return Err(Error::Config("SNR set is empty".into()));
            }
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Valid => self.num_valid,
            Split::Test => self.num_test,
        }
    }
}

/// Deterministic per-record seed.
pub fn record_seed(corpus_seed: u64, split: Split, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(split as u64 + 1);
    rng.set_word_pos(index as u128 * 2);
    rng.random()
}

/// Generates clean/noise/mixture triples for one record. Components are
/// quantised to the 16-bit grid before summing, so the stored files add up
/// exactly and the stored SNR is what a reader measures.
pub fn synth_record(cfg: &CorpusConfig, seed: u64) -> Result<(f64, Mixture)> {
    let sr = DEFAULT_SAMPLE_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr = cfg.snr.draw(&mut rng);
    let kind = cfg.noise_kinds[rng.random_range(0..cfg.noise_kinds.len())];
    let offset = rng.random_range(0..cfg.noise_samples);
    let clean = AudioClip::new(synth_speech(cfg.clip_samples, sr, &mut rng), sr)?;
    let noise = AudioClip::new(synth_noise(kind, cfg.noise_samples, sr, &mut rng), sr)?;
    let noise = loop_noise(&noise, cfg.clip_samples, offset)?;
    let mix = mix_at_snr(&clean, &noise, snr)?;
    let q = |c: &AudioClip| {
        AudioClip::new(c.samples().iter().map(|&v| dsp::quantize(v)).collect(), sr)
    };
    let clean_q = q(&mix.clean)?;
    let noise_q = q(&mix.noise)?;
    let noisy: Vec<f64> = clean_q
        .samples()
        .iter()
        .zip(noise_q.samples())
        .map(|(a, b)| a + b)
        .collect();
    Ok((
        snr,
        Mixture {
            noisy: AudioClip::new(noisy, sr)?,
            clean: clean_q,
            noise: noise_q,
            ..mix
        },
    ))
}

/// Writes the corpus under `out_dir` and returns its manifest.
pub fn synth_corpus(out_dir: &Path, cfg: &CorpusConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    for sub in ["clean", "noise", "noisy"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            let id = format!("{split}_{i:04}");
            let rseed = record_seed(seed, split, i);
            let (snr, mix) = synth_record(cfg, rseed)?;
            let rel = |sub: &str| PathBuf::from(sub).join(format!("{id}.wav"));
            let rec = MixtureRecord {
                clean_path: rel("clean"),
                noise_path: rel("noise"),
                noisy_path: rel("noisy"),
                id,
                snr_db: snr,
                split,
                seed: rseed,
            };
            dsp::write_wav(&out_dir.join(&rec.clean_path), &mix.clean)?;
            dsp::write_wav(&out_dir.join(&rec.noise_path), &mix.noise)?;
            dsp::write_wav(&out_dir.join(&rec.noisy_path), &mix.noisy)?;
            records.push(rec);
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save()?;
    log::info!(
        "synthesized {} records into {}",
        manifest.records.len(),
        out_dir.display()
    );
    Ok(manifest)
}

/// Clean speech clips for conditioner pretraining, drawn from a seed stream
/// disjoint from the mixture records.
pub fn synth_clean_clips(count: usize, len: usize, seed: u64) -> Result<Vec<AudioClip>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(0x00c0_ffee);
    (0..count)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let v = synth_speech(len, DEFAULT_SAMPLE_RATE, &mut rng);
            AudioClip::mono16k(v)
        })
        .collect()
}
