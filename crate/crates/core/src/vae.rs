//! Convolutional VAE over two-channel (real, imaginary) spectrogram images.
//!
//! The encoder halves both axes twice and emits a diagonal Gaussian over a
//! `C × F/4 × T/4` latent; the decoder mirrors it with nearest-neighbour
//! upsampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{fit_frames, FitMode, SpectrogramComplex};
use crate::error::{Error, Result};
use crate::nn::{
    self, conv_specs, load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, Conv2dSpec, GradCheck,
    Graph, Init, ParamSpec, ParamStore, Tensor, Var,
};

pub const CHECKPOINT_KIND: &str = "vae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub n_bins: usize,
    pub n_frames: usize,
    /// Channels at full resolution.
    pub width: usize,
    /// Channels at the two downsampled resolutions.
    pub hidden: usize,
    pub latent_channels: usize,
    /// Gain applied to input images before the encoder and removed after
    /// the decoder. Set from training data.
    pub input_scale: f64,
}

impl VaeArch {
    pub fn desk() -> Self {
        Self {
            n_bins: 64,
            n_frames: 64,
            width: 16,
            hidden: 32,
            latent_channels: 8,
            input_scale: 1.0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            n_bins: 256,
            n_frames: 256,
            width: 32,
            hidden: 64,
            latent_channels: 4,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.n_frames == 0 || self.n_bins % 4 != 0 || self.n_frames % 4 != 0
        {
            return Err(Error::Config(format!(
                "VAE input {}x{} must be positive multiples of 4",
                self.n_bins, self.n_frames
            )));
        }
        if self.width == 0 || self.hidden == 0 || self.latent_channels == 0 {
            return Err(Error::Config("VAE widths must be positive".into()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config("VAE input_scale must be positive".into()));
        }
        Ok(())
    }

    /// `[C, F/4, T/4]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.n_bins / 4, self.n_frames / 4]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [2, self.n_bins, self.n_frames]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (w, h, c) = (self.width, self.hidden, self.latent_channels);
        [
            conv_specs("enc.in", 2, w, 3, 3),
            conv_specs("enc.down1", w, h, 3, 3),
            conv_specs("enc.res1", h, h, 3, 3),
            conv_specs("enc.down2", h, h, 3, 3),
            conv_specs("enc.res2", h, h, 3, 3),
            small_conv_specs("enc.mu", h, c, 0.0),
            small_conv_specs("enc.logsig", h, c, INIT_LOG_SIGMA),
            conv_specs("dec.in", c, h, 3, 3),
            conv_specs("dec.res1", h, h, 3, 3),
            conv_specs("dec.up1", h, h, 3, 3),
            conv_specs("dec.res2", h, h, 3, 3),
            conv_specs("dec.up2", h, w, 3, 3),
            conv_specs("dec.out", w, 2, 3, 3),
        ]
        .concat()
    }
}

/// Initial log σ of the posterior. Starting with a narrow posterior keeps
/// the latent informative early in training.
const INIT_LOG_SIGMA: f64 = -3.0;

/// 3×3 conv initialised at a tenth of the usual scale with a constant bias,
/// so the initial posterior does not depend on the input level.
fn small_conv_specs(prefix: &str, cin: usize, cout: usize, bias: f64) -> Vec<ParamSpec> {
    let mut specs = conv_specs(prefix, cin, cout, 3, 3);
    specs[0].init = Init::HeUniform {
        fan_in: cin * 9,
        gain: 0.1,
    };
    specs[1].init = Init::Constant(bias);
    specs
}

/// Encoder (φ) and decoder (θ) weights with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub arch: VaeArch,
    pub store: ParamStore,
}

impl VaeParams {
    pub fn init(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&arch.param_specs(), &mut rng);
        Ok(Self { arch, store })
    }

    pub fn from_store(arch: VaeArch, store: ParamStore) -> Result<Self> {
        arch.validate()?;
        store.validate(&arch.param_specs())?;
        Ok(Self { arch, store })
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

    /// Loads a frozen model and its training log.
    pub fn load(dir: &Path) -> Result<(Self, Vec<f64>)> {
        let (meta, store) = load_checkpoint(dir, CHECKPOINT_KIND)?;
        let arch: VaeArch = serde_json::from_value(meta.config)
            .map_err(|e| Error::Format(format!("{}: bad VAE config: {e}", dir.display())))?;
        Ok((Self::from_store(arch, store)?, meta.training_log))
    }
}

/// Diagonal Gaussian q(z|x), `[N, C, F', T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::invalid(format!(
                "posterior mu {:?} and sigma {:?} differ in shape",
                mu.shape(),
                sigma.shape()
            )));
        }
        if !mu.is_finite() {
            return Err(Error::invalid("posterior mean is not finite"));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("posterior sigma must be positive and finite"));
        }
        Ok(Self { mu, sigma })
    }
}

/// Real latent tensor, `[N, C, F', T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap(Tensor);

impl LatentMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::invalid(format!(
                "latent must be [N, C, F, T], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("latent has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

fn residual(g: &mut Graph, p: &Bound, name: &str, h: Var) -> Var {
    let y = nn::conv(g, p, name, h, Conv2dSpec::same(3, 3));
    let y = g.silu(y);
    g.add(h, y)
}

fn conv_act(g: &mut Graph, p: &Bound, name: &str, h: Var, spec: Conv2dSpec) -> Var {
    let y = nn::conv(g, p, name, h, spec);
    g.silu(y)
}

/// Encoder on an already scaled `[N, 2, F, T]` image. Returns (μ, log σ).
pub(crate) fn encoder_graph(g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
    let down = Conv2dSpec::strided(3, 3, 2, 2);
    let h = conv_act(g, p, "enc.in", x, Conv2dSpec::same(3, 3));
    let h = conv_act(g, p, "enc.down1", h, down);
    let h = residual(g, p, "enc.res1", h);
    let h = conv_act(g, p, "enc.down2", h, down);
    let h = residual(g, p, "enc.res2", h);
    let mu = nn::conv(g, p, "enc.mu", h, Conv2dSpec::same(3, 3));
    let log_sigma = nn::conv(g, p, "enc.logsig", h, Conv2dSpec::same(3, 3));
    (mu, log_sigma)
}

/// Decoder to a scaled `[N, 2, F, T]` image.
pub(crate) fn decoder_graph(g: &mut Graph, p: &Bound, z: Var) -> Var {
    let same = Conv2dSpec::same(3, 3);
    let h = conv_act(g, p, "dec.in", z, same);
    let h = residual(g, p, "dec.res1", h);
    let h = g.upsample2x(h);
    let h = conv_act(g, p, "dec.up1", h, same);
    let h = residual(g, p, "dec.res2", h);
    let h = g.upsample2x(h);
    let h = conv_act(g, p, "dec.up2", h, same);
    nn::conv(g, p, "dec.out", h, same)
}

/// Negative ELBO on a scaled image batch with explicit noise `eps`.
pub(crate) fn elbo_graph(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    eps: Var,
    beta: f64,
) -> Var {
    let (mu, log_sigma) = encoder_graph(g, p, x);
    let sigma = g.exp(log_sigma);
    let noise = g.mul(sigma, eps);
    let z = g.add(mu, noise);
    let x_hat = decoder_graph(g, p, z);
    let rec = g.mse(x_hat, x);
    if beta == 0.0 {
        return rec;
    }
    // ½(μ² + σ² − 2 ln σ − 1), averaged.
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let s2 = g.exp(two_ls);
    let a = g.add(mu2, s2);
    let b = g.sub(a, two_ls);
    let kl = g.mean(b);
    let kl = g.add_scalar(kl, -1.0);
    let kl = g.scale(kl, 0.5 * beta);
    g.add(rec, kl)
}

/// Central-difference check of the ELBO gradient with respect to every
/// parameter, for an unscaled image batch `x` and latent noise `eps`.
pub fn elbo_gradient_check(
    params: &VaeParams,
    x: &Tensor,
    eps: &Tensor,
    beta: f64,
    abs_floor: f64,
) -> Result<GradCheck> {
    let n = batch_shape(x, params.arch.image_shape(), "x")?;
    if batch_shape(eps, params.arch.latent_shape(), "eps")? != n {
        return Err(Error::invalid("eps batch size differs from x"));
    }
    let xs = as_batch(x, n, params.arch.image_shape()).map(|v| v * params.arch.input_scale);
    let eps = as_batch(eps, n, params.arch.latent_shape());
    Ok(nn::gradient_check(
        &params.store,
        |g, p| {
            let xv = g.constant(xs.clone());
            let ev = g.constant(eps.clone());
            elbo_graph(g, p, xv, ev, beta)
        },
        1e-5,
        abs_floor,
    ))
}

fn batch_shape(x: &Tensor, inner: [usize; 3], what: &str) -> Result<usize> {
    let s = x.shape();
    let ok = match s.len() {
        3 => s == inner,
        4 => s[1..] == inner,
        _ => false,
    };
    if !ok {
        return Err(Error::invalid(format!(
            "{what}: expected [N, {}, {}, {}], got {s:?}",
            inner[0], inner[1], inner[2]
        )));
    }
    Ok(if s.len() == 3 { 1 } else { s[0] })
}

fn as_batch(x: &Tensor, n: usize, inner: [usize; 3]) -> Tensor {
    x.clone().reshape(&[n, inner[0], inner[1], inner[2]])
}

/// q(z|x) for an image `[2, F, T]` or a batch `[N, 2, F, T]`.
pub fn encode(params: &VaeParams, x: &Tensor) -> Result<GaussianPosterior> {
    let inner = params.arch.image_shape();
    let n = batch_shape(x, inner, "encode")?;
    let mut g = Graph::new();
    let p = g.bind(&params.store);
    let mut xs = as_batch(x, n, inner);
    xs.scale_assign(params.arch.input_scale);
    let xv = g.constant(xs);
    let (mu, ls) = encoder_graph(&mut g, &p, xv);
    let sigma = g.value(ls).map(f64::exp);
    GaussianPosterior::new(g.value(mu).clone(), sigma)
}

/// z = μ + σ ⊙ ε.
pub fn reparameterize(post: &GaussianPosterior, eps: &Tensor) -> Result<LatentMap> {
    if eps.shape() != post.mu.shape() {
        return Err(Error::invalid(format!(
            "eps shape {:?} does not match posterior {:?}",
            eps.shape(),
            post.mu.shape()
        )));
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    LatentMap::new(Tensor::from_vec(post.mu.shape(), data))
}

/// Reconstructed image batch `[N, 2, F, T]`.
pub fn decode(params: &VaeParams, z: &LatentMap) -> Result<Tensor> {
    let inner = params.arch.latent_shape();
    let n = batch_shape(z.tensor(), inner, "decode")?;
    let mut g = Graph::new();
    let p = g.bind(&params.store);
    let zv = g.constant(as_batch(z.tensor(), n, inner));
    let y = decoder_graph(&mut g, &p, zv);
    let mut out = g.value(y).clone();
    out.scale_assign(1.0 / params.arch.input_scale);
    Ok(out)
}

/// Mean over elements of KL(q || N(0, I)).
pub fn kl_gaussian(post: &GaussianPosterior) -> Result<f64> {
    if post.sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let n = post.mu.len().max(1) as f64;
    let total: f64 = post
        .mu
        .data()
        .iter()
        .zip(post.sigma.data())
        .map(|(m, s)| 0.5 * (m * m + s * s - 2.0 * s.ln() - 1.0))
        .sum();
    Ok(total / n)
}

/// MSE(x, x̂) + β · KL.
pub fn elbo_loss(x: &Tensor, x_hat: &Tensor, post: &GaussianPosterior, beta: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::invalid(format!(
            "elbo_loss: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta must be non-negative"));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len().max(1) as f64;
    Ok(mse + beta * kl_gaussian(post)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    /// Fraction of all steps over which β ramps linearly from 0.
    pub warmup_frac: f64,
    /// Random crops drawn from every clip per epoch.
    #[serde(default = "one")]
    pub crops_per_clip: usize,
    pub adam: AdamConfig,
}

fn one() -> usize {
    1
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            beta: 1e-2,
            warmup_frac: 0.1,
            crops_per_clip: 1,
            adam: AdamConfig::default(),
        }
    }
}

/// 1 / RMS of all bins, so that network inputs have unit scale.
pub fn input_scale_for(spectrograms: &[SpectrogramComplex]) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for s in spectrograms {
        acc += s.bins().iter().map(|c| c.norm_sqr()).sum::<f64>();
        n += 2 * s.bins().len();
    }
    if acc > 0.0 {
        (n as f64 / acc).sqrt()
    } else {
        1.0
    }
}

/// Stacks images into `[N, 2, F, T]`.
pub fn stack_images(images: &[Tensor]) -> Tensor {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        })
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Trains on clean spectrograms, `crops_per_clip` random `n_frames` crops
/// per clip per epoch. Returns frozen parameters and the mean loss of every epoch.
pub fn train_vae(
    spectrograms: &[SpectrogramComplex],
    arch: &VaeArch,
    cfg: &VaeTrainConfig,
    seed: u64,
) -> Result<(VaeParams, Vec<f64>)> {
    if spectrograms.is_empty() {
        return Err(Error::invalid("train_vae: dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.crops_per_clip == 0 {
        return Err(Error::Config(
            "epochs, batch_size and crops_per_clip must be positive".into(),
        ));
    }
    if let Some(s) = spectrograms.iter().find(|s| s.n_bins() != arch.n_bins) {
        return Err(Error::Config(format!(
            "spectrogram has {} bins, VAE expects {}",
            s.n_bins(),
            arch.n_bins
        )));
    }
    let mut arch = arch.clone();
    arch.input_scale = input_scale_for(spectrograms);
    let mut params = VaeParams::init(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut adam = Adam::new(cfg.adam.clone());
    let per_epoch = spectrograms.len() * cfg.crops_per_clip;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let warm = ((cfg.epochs * steps_per_epoch) as f64 * cfg.warmup_frac).ceil() as usize;
    let latent = arch.latent_shape();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.adam.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..per_epoch).map(|i| i % spectrograms.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            for &i in batch {
                let crop = fit_frames(&spectrograms[i], arch.n_frames, FitMode::Training(&mut rng))?;
                images.push(crop.to_image());
            }
            let mut x = stack_images(&images);
            x.scale_assign(arch.input_scale);
            let eps = Tensor::randn(&[batch.len(), latent[0], latent[1], latent[2]], &mut rng);
            let beta = if warm == 0 {
                cfg.beta
            } else {
                cfg.beta * ((step + 1) as f64 / warm as f64).min(1.0)
            };
            let mut g = Graph::new();
            let p = g.bind(&params.store);
            let xv = g.constant(x);
            let ev = g.constant(eps);
            let loss = elbo_graph(&mut g, &p, xv, ev, beta);
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "epoch",
                    index: epoch + 1,
                    message: format!("VAE loss is {value}"),
                });
            }
            let grads = g.backward(loss).for_params(&p, &g);
            adam.step(&mut params.store, &grads, lr)?;
            total += value * batch.len() as f64;
            step += 1;
        }
        let mean = total / per_epoch as f64;
        log::info!("vae epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        log.push(mean);
    }
    params.store.freeze();
    Ok((params, log))
}
