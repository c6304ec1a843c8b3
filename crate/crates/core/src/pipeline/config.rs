use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::conditioner::{CondArch, CondTrainConfig};
use crate::data::{CorpusConfig, NoiseKind, SnrSpec};
use crate::diffusion::{DenoiserArch, DiffTrainConfig, ScheduleKind};
use crate::dsp::{PhaseReference, StftConfig};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::vae::{VaeArch, VaeTrainConfig};

/// Full recipe of one experiment. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    pub stft: StftSection,
    pub corpus: CorpusSection,
    pub optimizer: OptimizerSection,
    pub conditioner: ConditionerSection,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
    pub sampling: SamplingSection,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    /// Parent of the timestamped experiment directories.
    pub output_dir: PathBuf,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    /// Independent enhancement runs of the test split.
    pub eval_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub n_fft: usize,
    pub hop: usize,
    pub phase: PhaseReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory holding `manifest.jsonl`.
    pub path: PathBuf,
    /// Generate the synthetic corpus at `path` when it is absent.
    pub synthesize: bool,
    pub seed: u64,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub snr: SnrSpec,
    pub clip_samples: usize,
    pub noise_samples: usize,
    pub noise_kinds: Vec<NoiseKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionerSection {
    pub n_mels: usize,
    pub dim: usize,
    pub kernel: usize,
    pub pool: usize,
    /// Clean clips synthesised for masked-prediction pretraining.
    pub pretrain_clips: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub mask_fraction: f64,
    pub span: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    /// Frames per spectrogram image.
    pub target_frames: usize,
    pub width: usize,
    pub hidden: usize,
    pub latent_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub crops_per_clip: usize,
    pub beta: f64,
    pub warmup_frac: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub schedule: ScheduleKind,
    pub t_train: usize,
    /// Feed the noisy mixture's latent to the denoiser next to z_t.
    pub noisy_latent_input: bool,
    /// Frames between the starts of consecutive training chunks.
    pub chunk_stride: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub p_uncond: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub steps: usize,
    pub init_from_noisy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enabled: bool,
    pub steps: Vec<usize>,
    pub modes: Vec<Mode>,
    /// Width of the per-SNR report buckets in dB.
    pub snr_bucket_db: f64,
}

impl Default for RunConfig {
    /// Full-scale settings.
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            stft: StftSection::default(),
            corpus: CorpusSection::default(),
            optimizer: OptimizerSection::default(),
            conditioner: ConditionerSection::default(),
            vae: VaeSection::default(),
            diffusion: DiffusionSection::default(),
            sampling: SamplingSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "full".into(),
            output_dir: "runs".into(),
            seed: 0,
            eval_runs: 2,
        }
    }
}

impl Default for StftSection {
    fn default() -> Self {
        let s = StftConfig::full_scale();
        Self {
            n_fft: s.n_fft,
            hop: s.hop,
            phase: s.phase,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            path: "data/corpus".into(),
            synthesize: false,
            seed: 1,
            num_train: c.num_train,
            num_valid: c.num_valid,
            num_test: c.num_test,
            snr: c.snr,
            clip_samples: c.clip_samples,
            noise_samples: c.noise_samples,
            noise_kinds: c.noise_kinds,
        }
    }
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            decay: a.decay,
            decay_every: a.decay_every,
            clip_norm: a.clip_norm,
        }
    }
}

impl Default for ConditionerSection {
    fn default() -> Self {
        let a = CondArch::full_scale();
        let t = CondTrainConfig::default();
        Self {
            n_mels: a.n_mels,
            dim: a.dim,
            kernel: a.kernel,
            pool: a.pool,
            pretrain_clips: 200,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crop_frames: t.crop_frames,
            mask_fraction: t.mask_fraction,
            span: t.span,
            lr: t.adam.lr,
        }
    }
}

impl Default for VaeSection {
    fn default() -> Self {
        let a = VaeArch::full_scale();
        let t = VaeTrainConfig::default();
        Self {
            target_frames: a.n_frames,
            width: a.width,
            hidden: a.hidden,
            latent_channels: a.latent_channels,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crops_per_clip: t.crops_per_clip,
            beta: t.beta,
            warmup_frac: t.warmup_frac,
            lr: t.adam.lr,
        }
    }
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let t = DiffTrainConfig::default();
        Self {
            width: 64,
            time_dim: 64,
            blocks: 6,
            schedule: ScheduleKind::LinearBeta,
            t_train: 1000,
            noisy_latent_input: true,
            chunk_stride: 256,
            steps: 100_000,
            batch_size: t.batch_size,
            p_uncond: t.p_uncond,
            lr: AdamConfig::default().lr,
        }
    }
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            steps: 6,
            init_from_noisy: false,
        }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: vec![1, 2, 3, 6, 12, 25, 50],
            modes: vec![Mode::Conditional, Mode::Unconditional],
            snr_bucket_db: 5.0,
        }
    }
}

impl RunConfig {
    /// Full-scale defaults.
    pub fn full_scale() -> Self {
        Self::default()
    }

    /// Small configuration that trains end to end on one CPU.
    pub fn desk() -> Self {
        let stft = StftConfig::desk();
        let mut c = Self::default();
        c.experiment.name = "desk".into();
        c.stft = StftSection {
            n_fft: stft.n_fft,
            hop: stft.hop,
            phase: stft.phase,
        };
        c.corpus.path = "data/desk-corpus".into();
        c.corpus.synthesize = true;
        c.conditioner = ConditionerSection {
            n_mels: 32,
            dim: 64,
            pretrain_clips: 64,
            epochs: 10,
            ..ConditionerSection::default()
        };
        c.vae = VaeSection {
            target_frames: 64,
            width: 16,
            hidden: 32,
            latent_channels: 8,
            epochs: 40,
            batch_size: 16,
            crops_per_clip: 4,
            lr: 4e-3,
            ..VaeSection::default()
        };
        c.diffusion = DiffusionSection {
            width: 32,
            time_dim: 32,
            blocks: 4,
            chunk_stride: 64,
            steps: 4000,
            lr: 1e-3,
            ..DiffusionSection::default()
        };
        c.ablation.steps = vec![2, 6, 50];
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.corpus.path, &mut cfg.experiment.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.stft_config().map_err(|e| Error::Config(format!("stft: {e}")))?;
        self.corpus_config().validate()?;
        self.cond_arch().validate()?;
        self.vae_arch().validate()?;
        self.denoiser_arch().validate()?;
        if self.vae_arch().n_bins != self.cond_arch().stft.n_bins() {
            return cfg("stft bins do not match the VAE input".into());
        }
        if self.vae.target_frames / 4 * self.conditioner.pool != self.vae.target_frames {
            return cfg(format!(
                "conditioner.pool must be 4 so one feature frame matches one latent frame, got {}",
                self.conditioner.pool
            ));
        }
        if self.sampling.steps == 0 {
            return cfg("sampling.steps must be at least 1".into());
        }
        if self.sampling.steps > self.diffusion.t_train {
            return cfg("sampling.steps exceeds diffusion.t_train".into());
        }
        if self.experiment.eval_runs == 0 {
            return cfg("experiment.eval_runs must be at least 1".into());
        }
        if self.corpus.num_train == 0 || self.corpus.num_test == 0 {
            return cfg("corpus needs train and test clips".into());
        }
        if self.diffusion.chunk_stride == 0 || self.diffusion.chunk_stride % self.conditioner.pool != 0 {
            return cfg("diffusion.chunk_stride must be a positive multiple of conditioner.pool".into());
        }
        if self.ablation.steps.iter().any(|&s| s == 0 || s > self.diffusion.t_train) {
            return cfg("ablation.steps must lie in 1..=t_train".into());
        }
        if !(self.ablation.snr_bucket_db > 0.0) {
            return cfg("ablation.snr_bucket_db must be positive".into());
        }
        if self.sampling.init_from_noisy && !self.diffusion.noisy_latent_input {
            return cfg("sampling.init_from_noisy requires diffusion.noisy_latent_input".into());
        }
        Ok(())
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        let mut s = StftConfig::new(self.stft.n_fft, self.stft.hop)?;
        s.phase = self.stft.phase;
        Ok(s)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            num_train: c.num_train,
            num_valid: c.num_valid,
            num_test: c.num_test,
            snr: c.snr.clone(),
            clip_samples: c.clip_samples,
            noise_samples: c.noise_samples,
            noise_kinds: c.noise_kinds.clone(),
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        let o = &self.optimizer;
        AdamConfig {
            lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay: o.decay,
            decay_every: o.decay_every,
            clip_norm: o.clip_norm,
        }
    }

    pub fn cond_arch(&self) -> CondArch {
        let c = &self.conditioner;
        CondArch {
            stft: self.stft_config().unwrap_or_else(|_| StftConfig::full_scale()),
            n_mels: c.n_mels,
            dim: c.dim,
            kernel: c.kernel,
            pool: c.pool,
        }
    }

    pub fn cond_train(&self) -> CondTrainConfig {
        let c = &self.conditioner;
        CondTrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            crop_frames: c.crop_frames,
            mask_fraction: c.mask_fraction,
            span: c.span,
            adam: self.adam(c.lr),
        }
    }

    pub fn vae_arch(&self) -> VaeArch {
        let v = &self.vae;
        VaeArch {
            n_bins: self.stft.n_fft / 2 + 1,
            n_frames: v.target_frames,
            width: v.width,
            hidden: v.hidden,
            latent_channels: v.latent_channels,
            input_scale: 1.0,
        }
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        let v = &self.vae;
        VaeTrainConfig {
            epochs: v.epochs,
            batch_size: v.batch_size,
            beta: v.beta,
            warmup_frac: v.warmup_frac,
            crops_per_clip: v.crops_per_clip,
            adam: self.adam(v.lr),
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        let d = &self.diffusion;
        let latent = self.vae_arch().latent_shape();
        DenoiserArch {
            latent_shape: latent,
            aux_channels: if d.noisy_latent_input { latent[0] } else { 0 },
            cond_dim: self.conditioner.dim,
            width: d.width,
            time_dim: d.time_dim,
            blocks: d.blocks,
            schedule: d.schedule,
            t_train: d.t_train,
            latent_scale: 1.0,
        }
    }

    pub fn diff_train(&self) -> DiffTrainConfig {
        let d = &self.diffusion;
        DiffTrainConfig {
            steps: d.steps,
            batch_size: d.batch_size,
            p_uncond: d.p_uncond,
            adam: self.adam(d.lr),
        }
    }

    /// `section.key: default -> value` for every setting that differs
    /// from the full-scale defaults.
    pub fn deviations(&self) -> Vec<String> {
        let base = flatten(&RunConfig::full_scale());
        let mine = flatten(self);
        mine.iter()
            .filter(|(k, v)| base.get(*k) != Some(v))
            .map(|(k, v)| {
                let old = base.get(k).map(String::as_str).unwrap_or("(unset)");
                format!("{k}: {old} -> {v}")
            })
            .collect()
    }
}

fn flatten(cfg: &RunConfig) -> BTreeMap<String, String> {
    let value = toml::Value::try_from(cfg).expect("config serialises");
    let mut out = BTreeMap::new();
    if let toml::Value::Table(sections) = value {
        for (name, section) in sections {
            if let toml::Value::Table(keys) = section {
                for (k, v) in keys {
                    out.insert(format!("{name}.{k}"), v.to_string());
                }
            }
        }
    }
    out
}
