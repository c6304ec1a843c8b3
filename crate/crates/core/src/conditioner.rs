//! Frozen acoustic feature extractor supplying the guidance condition.
//!
//! The in-repo extractor is a small 1-D convolutional encoder over log-mel
//! frames, pretrained by masked-frame prediction on clean audio. Features
//! computed elsewhere can be ingested from raw f32 files instead.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{
    self, conv_specs, load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, Conv2dSpec, Graph,
    ParamSpec, ParamStore, Tensor, Var,
};

pub const CHECKPOINT_KIND: &str = "conditioner";

/// Log-compressed mel magnitudes, `[n_mels, frames]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    /// `[1, n_mels, 1, frames]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.n_mels, 1, self.n_frames], self.values.clone())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist, each
/// normalised to unit area (row sum 1). Filters too narrow to cover any
/// DFT bin fall back to their nearest bin. Returns `[n_mels][n_bins]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let m_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut row: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f > lo && f < hi {
                        if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                let k = ((c / bin_hz(1)).round() as usize).min(n_bins - 1);
                row[k] = 1.0;
            }
            row
        })
        .collect()
}

/// Hann STFT magnitudes (before any amplitude normalisation), mel
/// filterbank, then log(1 + x).
pub fn log_mel(audio: &AudioClip, n_mels: usize, stft_cfg: &StftConfig) -> Result<MelSpectrogram> {
    if audio.is_empty() {
        return Err(Error::invalid("log_mel: empty audio"));
    }
    if n_mels == 0 {
        return Err(Error::invalid("log_mel: n_mels must be positive"));
    }
    let spec = stft(audio, stft_cfg)?;
    let fb = mel_filterbank(n_mels, stft_cfg.n_fft, audio.sample_rate());
    let (t, scale) = (spec.n_frames(), spec.norm_scale());
    let mags: Vec<f64> = spec.bins().iter().map(|c| c.norm() * scale).collect();
    let mut values = vec![0.0; n_mels * t];
    for (m, row) in fb.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for f in 0..t {
                values[m * t + f] += w * mags[k * t + f];
            }
        }
    }
    values.iter_mut().for_each(|v| *v = v.ln_1p());
    Ok(MelSpectrogram {
        n_mels,
        n_frames: t,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Internal,
    External,
}

/// Feature sequence `[frames, dim]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
    pub source: FeatureSource,
}

impl Condition {
    pub fn new(frames: usize, dim: usize, values: Vec<f64>, source: FeatureSource) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(Error::invalid(format!(
                "condition of {frames}x{dim} needs {} values, got {}",
                frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("condition has non-finite values"));
        }
        Ok(Self {
            frames,
            dim,
            values,
            source,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Frames `start..start + len`, zero-padded past the end.
    pub fn slice_frames(&self, start: usize, len: usize) -> Condition {
        let mut values = vec![0.0; len * self.dim];
        for i in 0..len {
            if start + i < self.frames {
                values[i * self.dim..(i + 1) * self.dim].copy_from_slice(self.frame(start + i));
            }
        }
        Condition {
            frames: len,
            dim: self.dim,
            values,
            source: self.source,
        }
    }

    /// Mean squared difference over the common frames.
    pub fn distance(&self, other: &Condition) -> Result<f64> {
        if self.dim != other.dim {
            return Err(Error::invalid("conditions differ in dimension"));
        }
        let n = self.frames.min(other.frames) * self.dim;
        if n == 0 {
            return Err(Error::invalid("conditions have no common frames"));
        }
        let d: f64 = self.values[..n]
            .iter()
            .zip(&other.values[..n])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok(d / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondArch {
    pub stft: StftConfig,
    pub n_mels: usize,
    /// Output feature width D.
    pub dim: usize,
    pub kernel: usize,
    /// Average-pooling factor from STFT frames to feature frames.
    pub pool: usize,
}

impl CondArch {
    pub fn desk() -> Self {
        Self {
            stft: StftConfig::desk(),
            n_mels: 32,
            dim: 64,
            kernel: 5,
            pool: 4,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            stft: StftConfig::full_scale(),
            n_mels: 64,
            dim: 64,
            kernel: 5,
            pool: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.n_mels == 0 || self.dim == 0 || self.pool == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(
                "conditioner needs positive n_mels, dim, pool and an odd kernel".into(),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (m, d, k) = (self.n_mels, self.dim, self.kernel);
        [
            conv_specs("cond.in", m, d, 1, k),
            conv_specs("cond.res1", d, d, 1, k),
            conv_specs("cond.res2", d, d, 1, k),
            conv_specs("cond.out", d, d, 1, 1),
            // Pretext head, unused at extraction time.
            conv_specs("cond.head", d, m, 1, 1),
        ]
        .concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondParams {
    pub arch: CondArch,
    pub store: ParamStore,
}

impl CondParams {
    pub fn init(arch: CondArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&arch.param_specs(), &mut rng);
        Ok(Self { arch, store })
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn save(&self, dir: &Path, training_log: &[f64]) -> Result<()> {
        let config = serde_json::to_value(&self.arch).expect("arch serializes");
        save_checkpoint(
            dir,
            CHECKPOINT_KIND,
            config,
            &self.store,
            training_log,
            serde_json::Value::Null,
        )
    }

    pub fn load(dir: &Path) -> Result<(Self, Vec<f64>)> {
        let (meta, store) = load_checkpoint(dir, CHECKPOINT_KIND)?;
        let arch: CondArch = serde_json::from_value(meta.config).map_err(|e| {
            Error::Format(format!("{}: bad conditioner config: {e}", dir.display()))
        })?;
        arch.validate()?;
        store.validate(&arch.param_specs())?;
        Ok((Self { arch, store }, meta.training_log))
    }
}

/// Frame encoder on `[N, n_mels, 1, L]`, giving `[N, D, 1, L]`.
fn encoder_graph(g: &mut Graph, p: &Bound, arch: &CondArch, x: Var) -> Var {
    let spec = Conv2dSpec::same(1, arch.kernel);
    let h = nn::conv(g, p, "cond.in", x, spec);
    let mut h = g.silu(h);
    for name in ["cond.res1", "cond.res2"] {
        let y = nn::conv(g, p, name, h, spec);
        let y = g.silu(y);
        h = g.add(h, y);
    }
    nn::conv(g, p, "cond.out", h, Conv2dSpec::same(1, 1))
}

/// Masked-prediction loss: masked frames of `x` are zeroed at the input
/// and reconstructed by the head; the MSE is taken over masked frames only.
fn pretext_graph(g: &mut Graph, p: &Bound, arch: &CondArch, x: &Tensor, mask: &Tensor) -> Var {
    let xv = g.constant(x.clone());
    let m = g.constant(mask.clone());
    let keep = g.constant(mask.map(|v| 1.0 - v));
    let xin = g.mul(xv, keep);
    let h = encoder_graph(g, p, arch, xin);
    let h = g.silu(h);
    let pred = nn::conv(g, p, "cond.head", h, Conv2dSpec::same(1, 1));
    let diff = g.sub(pred, xv);
    let sq = g.square(diff);
    let masked = g.mul(sq, m);
    let total = g.sum(masked);
    let count = mask.sum() * x.dim(1) as f64;
    g.scale(total, 1.0 / count.max(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// STFT frames per training crop.
    pub crop_frames: usize,
    pub mask_fraction: f64,
    pub span: usize,
    pub adam: AdamConfig,
}

impl Default for CondTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            crop_frames: 128,
            mask_fraction: 0.3,
            span: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// `[1, 1, 1, len]` mask with spans of ones covering at least `fraction`.
fn span_mask<R: Rng>(len: usize, fraction: f64, span: usize, rng: &mut R) -> Vec<f64> {
    let mut m = vec![0.0; len];
    let target = ((len as f64 * fraction).round() as usize).clamp(1, len);
    let span = span.clamp(1, len);
    let mut covered = 0;
    while covered < target {
        let start = rng.random_range(0..=len - span);
        for v in &mut m[start..start + span] {
            if *v == 0.0 {
                *v = 1.0;
                covered += 1;
            }
        }
    }
    m
}

/// Pretrains by masked-frame prediction. Returns frozen parameters and the
/// mean masked-prediction loss per epoch.
pub fn pretrain_conditioner(
    clips: &[AudioClip],
    arch: &CondArch,
    cfg: &CondTrainConfig,
    seed: u64,
) -> Result<(CondParams, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::invalid("pretrain_conditioner: corpus is empty"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.crop_frames == 0 {
        return Err(Error::Config("conditioner epochs, batch and crop must be positive".into()));
    }
    let mels = clips
        .iter()
        .map(|c| log_mel(c, arch.n_mels, &arch.stft))
        .collect::<Result<Vec<_>>>()?;
    let mut params = CondParams::init(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let l = cfg.crop_frames;
    for epoch in 0..cfg.epochs {
        let lr = cfg.adam.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..mels.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut x = vec![0.0; n * arch.n_mels * l];
            let mut mask = Vec::with_capacity(n * l);
            for (s, &i) in batch.iter().enumerate() {
                let mel = &mels[i];
                let start = if mel.n_frames > l {
                    rng.random_range(0..=mel.n_frames - l)
                } else {
                    0
                };
                for m in 0..arch.n_mels {
                    for f in 0..l.min(mel.n_frames - start) {
                        x[(s * arch.n_mels + m) * l + f] = mel.get(m, start + f);
                    }
                }
                mask.extend(span_mask(l, cfg.mask_fraction, cfg.span, &mut rng));
            }
            let x = Tensor::from_vec(&[n, arch.n_mels, 1, l], x);
            let mask = Tensor::from_vec(&[n, 1, 1, l], mask);
            let mut g = Graph::new();
            let p = g.bind(&params.store);
            let loss = pretext_graph(&mut g, &p, arch, &x, &mask);
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "epoch",
                    index: epoch + 1,
                    message: format!("conditioner loss is {value}"),
                });
            }
            let grads = g.backward(loss).for_params(&p, &g);
            adam.step(&mut params.store, &grads, lr)?;
            total += value * n as f64;
        }
        let mean = total / mels.len() as f64;
        log::info!("conditioner epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        log.push(mean);
    }
    params.store.freeze();
    Ok((params, log))
}

/// Pooled features `[ceil(T / pool), D]` for a clip.
pub fn extract_features(params: &CondParams, audio: &AudioClip) -> Result<Condition> {
    if !params.is_frozen() {
        return Err(Error::State(
            "conditioner parameters must be frozen before extraction".into(),
        ));
    }
    let arch = &params.arch;
    let mel = log_mel(audio, arch.n_mels, &arch.stft)?;
    let mut g = Graph::new();
    let p = g.bind(&params.store);
    let x = g.constant(mel.to_tensor());
    let h = encoder_graph(&mut g, &p, arch, x);
    let h = g.value(h);
    let (d, t) = (arch.dim, mel.n_frames);
    let frames = t.div_ceil(arch.pool);
    let mut values = vec![0.0; frames * d];
    for i in 0..frames {
        let (a, b) = (i * arch.pool, ((i + 1) * arch.pool).min(t));
        for c in 0..d {
            let row = &h.data()[c * t..(c + 1) * t];
            values[i * d + c] = row[a..b].iter().sum::<f64>() / (b - a) as f64;
        }
    }
    Condition::new(frames, d, values, FeatureSource::Internal)
}

/// Sidecar describing an external feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    #[serde(rename = "L")]
    pub frames: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub extractor_name: String,
}

/// Reads a flat little-endian f32 `[L, D]` array described by `sidecar`.
pub fn load_external_features(path: &Path, sidecar: &Path) -> Result<Condition> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let meta: FeatureSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 4 * meta.frames * meta.dim;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, sidecar declares {}x{} ({expected} bytes)",
            path.display(),
            bytes.len(),
            meta.frames,
            meta.dim
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Condition::new(meta.frames, meta.dim, values, FeatureSource::External)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `cond` in the external format (values rounded to f32).
pub fn save_external_features(
    cond: &Condition,
    path: &Path,
    sidecar: &Path,
    extractor_name: &str,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * cond.values.len());
    for v in &cond.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = FeatureSidecar {
        frames: cond.frames,
        dim: cond.dim,
        extractor_name: extractor_name.to_string(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    fs::write(sidecar, json).map_err(|e| Error::io(sidecar, e))
}
