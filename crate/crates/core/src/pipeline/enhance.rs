use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::conditioner::{self, extract_features, CondParams, Condition};
use crate::data::{Dataset, LoadedRecord, Manifest, Split};
use crate::diffusion::{self, sample_batch, CondInput, DenoiserParams, DiffusionExample, SamplerPlan};
use crate::dsp::{istft, stft, write_wav, AudioClip, SpectrogramComplex, StftConfig};
use crate::error::{Error, Result};
use crate::metrics::enhanced_path;
use crate::nn::Tensor;
use crate::vae::{self, decode, encode, stack_images, VaeParams};

/// The three frozen networks used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub vae: VaeParams,
    pub cond: CondParams,
    pub diff: DenoiserParams,
}

impl Models {
    /// Checks that the checkpoints fit together.
    pub fn new(vae: VaeParams, cond: CondParams, diff: DenoiserParams) -> Result<Self> {
        check_upstream(&vae, &cond)?;
        let latent = vae.arch.latent_shape();
        if diff.arch.latent_shape != latent {
            return Err(Error::Config(format!(
                "latent shape mismatch: VAE produces {latent:?}, denoiser expects {:?}",
                diff.arch.latent_shape
            )));
        }
        if diff.arch.cond_dim != cond.arch.dim {
            return Err(Error::Config(format!(
                "condition dim mismatch: conditioner emits {}, denoiser expects {}",
                cond.arch.dim, diff.arch.cond_dim
            )));
        }
        if diff.arch.aux_channels != 0 && diff.arch.aux_channels != latent[0] {
            return Err(Error::Config(format!(
                "aux channels mismatch: denoiser expects {}, VAE latent has {}",
                diff.arch.aux_channels, latent[0]
            )));
        }
        if !diff.store.is_frozen() {
            return Err(Error::State("denoiser parameters are not frozen".into()));
        }
        Ok(Self { vae, cond, diff })
    }

    /// Loads `dir/{vae,conditioner,diffusion}`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (vae, _) = VaeParams::load(&dir.join(vae::CHECKPOINT_KIND))?;
        let (cond, _) = CondParams::load(&dir.join(conditioner::CHECKPOINT_KIND))?;
        let (diff, _) = DenoiserParams::load(&dir.join(diffusion::CHECKPOINT_KIND))?;
        Self::new(vae, cond, diff)
    }

    pub fn stft(&self) -> &StftConfig {
        &self.cond.arch.stft
    }
}

/// VAE / conditioner compatibility, needed before diffusion training.
fn check_upstream(vae: &VaeParams, cond: &CondParams) -> Result<()> {
    if !vae.store.is_frozen() || !cond.is_frozen() {
        return Err(Error::State("VAE and conditioner must be frozen".into()));
    }
    let bins = cond.arch.stft.n_bins();
    if vae.arch.n_bins != bins {
        return Err(Error::Config(format!(
            "frequency bins mismatch: STFT gives {bins}, VAE expects {}",
            vae.arch.n_bins
        )));
    }
    let latent_frames = vae.arch.latent_shape()[2];
    if vae.arch.n_frames != latent_frames * cond.arch.pool {
        return Err(Error::Config(format!(
            "time pooling mismatch: conditioner pools {} frames, VAE downsamples {}",
            cond.arch.pool,
            vae.arch.n_frames / latent_frames
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceOptions {
    pub steps: usize,
    pub mode: Mode,
    pub init_from_noisy: bool,
}

impl EnhanceOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            mode: Mode::Conditional,
            init_from_noisy: false,
        }
    }
}

/// Seed of chunk `k` of a clip enhanced with `seed`.
fn chunk_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.random()
}

/// Splits a spectrogram into `n`-frame chunks, zero-padding the last.
fn chunks(spec: &SpectrogramComplex, n: usize, stride: usize) -> Vec<(usize, SpectrogramComplex)> {
    (0..spec.n_frames().max(1))
        .step_by(stride)
        .map(|s| (s, spec.frames(s, n)))
        .collect()
}

/// Posterior means of a batch of spectrogram chunks, `[N, C, F', T']`.
fn encode_mu(vae: &VaeParams, parts: &[SpectrogramComplex]) -> Result<Tensor> {
    let images: Vec<Tensor> = parts.iter().map(SpectrogramComplex::to_image).collect();
    Ok(encode(vae, &stack_images(&images))?.mu)
}

/// Restores `noisy` chunk by chunk: each `n_frames` segment is sampled
/// from its own seed, decoded, and the segments are joined before a single
/// ISTFT at the noisy clip's scale and length.
pub fn enhance(noisy: &AudioClip, models: &Models, opts: &EnhanceOptions, seed: u64) -> Result<AudioClip> {
    if opts.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let (vae, diff) = (&models.vae, &models.diff);
    let sched = diff.arch.schedule()?;
    let plan = SamplerPlan::uniform_sqrt_alpha(opts.steps, &sched)?;
    let spec = stft(noisy, models.stft())?;
    let n = vae.arch.n_frames;
    let parts: Vec<SpectrogramComplex> = chunks(&spec, n, n).into_iter().map(|(_, c)| c).collect();
    let aux = if diff.arch.aux_channels > 0 {
        Some(encode_mu(vae, &parts)?)
    } else {
        None
    };
    let pool = models.cond.arch.pool;
    let cond_slices: Vec<Condition> = match opts.mode {
        Mode::Conditional => {
            let c = extract_features(&models.cond, noisy)?;
            (0..parts.len())
                .map(|k| c.slice_frames(k * n / pool, n / pool))
                .collect()
        }
        Mode::Unconditional => Vec::new(),
    };
    let conds: Vec<CondInput> = match opts.mode {
        Mode::Conditional => cond_slices.iter().map(CondInput::Features).collect(),
        Mode::Unconditional => vec![CondInput::Null; parts.len()],
    };
    let seeds: Vec<u64> = (0..parts.len()).map(|k| chunk_seed(seed, k)).collect();
    let z = sample_batch(diff, &conds, aux.as_ref(), &plan, &sched, &seeds, opts.init_from_noisy)?;
    let images = decode(vae, &z)?;
    let restored = parts
        .iter()
        .enumerate()
        .map(|(k, like)| {
            let img = images.narrow(0, k, 1);
            let img = img.reshape(&[2, like.n_bins(), n]);
            SpectrogramComplex::from_image(&img, like)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut joined = SpectrogramComplex::concat_frames(&restored)?.frames(0, spec.n_frames());
    joined.set_norm_scale(spec.norm_scale())?;
    joined.set_length(noisy.len());
    let out = istft(&joined)?;
    AudioClip::new(out.into_samples(), noisy.sample_rate())
}

/// Builds diffusion training pairs from loaded mixtures: `n_frames`
/// chunks every `stride` frames, clean and noisy encoded to posterior
/// means, the clean spectrogram expressed in the noisy clip's scale.
pub fn prepare_examples(
    records: &[LoadedRecord],
    vae: &VaeParams,
    cond: &CondParams,
    stride: usize,
) -> Result<Vec<DiffusionExample>> {
    check_upstream(vae, cond)?;
    if stride == 0 {
        return Err(Error::Config("chunk stride must be positive".into()));
    }
    let stft_cfg = &cond.arch.stft;
    let n = vae.arch.n_frames;
    let pool = cond.arch.pool;
    let mut out = Vec::new();
    for rec in records {
        let named = |e: Error| Error::Data(format!("clip {}: {e}", rec.record.id));
        let noisy = stft(&rec.noisy, stft_cfg).map_err(named)?;
        let mut clean = stft(&rec.clean, stft_cfg).map_err(named)?;
        clean.scale_bins(clean.norm_scale() / noisy.norm_scale());
        clean.set_norm_scale(noisy.norm_scale())?;
        let c = extract_features(cond, &rec.noisy).map_err(named)?;
        let (starts, clean_parts): (Vec<usize>, Vec<_>) = chunks(&clean, n, stride).into_iter().unzip();
        let noisy_parts: Vec<_> = chunks(&noisy, n, stride).into_iter().map(|(_, c)| c).collect();
        let zc = encode_mu(vae, &clean_parts)?;
        let zn = encode_mu(vae, &noisy_parts)?;
        let item = zc.len() / starts.len();
        let shape = vae.arch.latent_shape();
        for (k, &s) in starts.iter().enumerate() {
            if s % pool != 0 {
                return Err(Error::Config(format!(
                    "chunk stride must be a multiple of the conditioner pool {pool}"
                )));
            }
            let take = |t: &Tensor| Tensor::from_vec(&shape, t.data()[k * item..(k + 1) * item].to_vec());
            out.push(DiffusionExample {
                clean: take(&zc),
                noisy: take(&zn),
                cond: c.slice_frames(s / pool, n / pool),
            });
        }
    }
    Ok(out)
}

/// Seed of clip `index` in enhancement run `run`.
pub fn clip_seed(seed: u64, run: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0004);
    rng.set_stream(run as u64);
    rng.set_word_pos(index as u128 * 2);
    rng.random()
}

/// Enhances clips of `split` `runs` times, writing
/// `out_dir/run_<r>/<id>.wav`. Returns the written paths.
pub fn enhance_split(
    manifest: &Manifest,
    split: Split,
    models: &Models,
    opts: &EnhanceOptions,
    runs: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let data = Dataset::new(manifest.clone(), split, models.stft(), models.vae.arch.n_frames)?;
    let mut paths = Vec::new();
    for k in 0..data.len() {
        let rec = data.load(k)?;
        for run in 0..runs {
            let named = |e: Error| Error::Data(format!("clip {}: {e}", rec.record.id));
            let y = enhance(&rec.noisy, models, opts, clip_seed(seed, run, rec.index)).map_err(named)?;
            let path = enhanced_path(out_dir, run, &rec.record.id);
            if let Some(d) = path.parent() {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            write_wav(&path, &y)?;
            paths.push(path);
        }
        log::debug!("enhanced {} ({}/{})", rec.record.id, k + 1, data.len());
    }
    Ok(paths)
}
