use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ddim_sample, make_schedule, q_sample_tensor, NoiseSchedule, SamplerPlan, ScheduleKind};
use crate::conditioner::Condition;
use crate::error::{Error, Result};
use crate::nn::{
    self, conv_specs, linear_specs, load_checkpoint, save_checkpoint, zero_conv_specs, Adam,
    AdamConfig, Bound, Conv2dSpec, GradCheck, Graph, Init, ParamSpec, ParamStore, Tensor, Var,
};
use crate::vae::LatentMap;

pub const CHECKPOINT_KIND: &str = "diffusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    /// `[C, F', T']` of one latent.
    pub latent_shape: [usize; 3],
    /// Channels of the noisy-mixture latent concatenated to the input
    /// (0 disables it).
    pub aux_channels: usize,
    /// Condition feature width D.
    pub cond_dim: usize,
    pub width: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub schedule: ScheduleKind,
    pub t_train: usize,
    /// Multiplier from VAE latent units to unit-variance diffusion space.
    pub latent_scale: f64,
}

impl DenoiserArch {
    pub fn desk(latent_shape: [usize; 3], cond_dim: usize) -> Self {
        Self {
            latent_shape,
            aux_channels: latent_shape[0],
            cond_dim,
            width: 32,
            time_dim: 32,
            blocks: 4,
            schedule: ScheduleKind::LinearBeta,
            t_train: 1000,
            latent_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, f, t] = self.latent_shape;
        if c == 0 || f == 0 || t == 0 || self.cond_dim == 0 || self.width == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be positive and even".into()));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::Config("latent_scale must be positive".into()));
        }
        if self.t_train < 2 {
            return Err(Error::Config("t_train must be at least 2".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.schedule)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, w, d) = (self.latent_shape[0], self.width, self.cond_dim);
        let mut specs = conv_specs("den.in", c + self.aux_channels, w, 3, 3);
        specs.extend(linear_specs("den.t1", self.time_dim, w));
        specs.extend(linear_specs("den.t2", w, w));
        specs.push(ParamSpec::new("den.null", &[1, d, 1, 1], Init::Zeros));
        for i in 0..self.blocks {
            let b = format!("den.b{i}");
            specs.extend(conv_specs(&format!("{b}.conv1"), w, w, 3, 3));
            specs.extend(linear_specs(&format!("{b}.temb"), w, w));
            specs.extend(zero_conv_specs(&format!("{b}.film"), d, 2 * w, 1, 1));
            specs.extend(conv_specs(&format!("{b}.conv2"), w, w, 3, 3));
        }
        specs.extend(zero_conv_specs("den.out", w, c, 3, 3));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub store: ParamStore,
}

impl DenoiserParams {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&arch.param_specs(), &mut rng);
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

    pub fn load(dir: &Path) -> Result<(Self, Vec<f64>)> {
        let (meta, store) = load_checkpoint(dir, CHECKPOINT_KIND)?;
        let arch: DenoiserArch = serde_json::from_value(meta.config).map_err(|e| {
            Error::Format(format!("{}: bad denoiser config: {e}", dir.display()))
        })?;
        arch.validate()?;
        store.validate(&arch.param_specs())?;
        Ok((Self { arch, store }, meta.training_log))
    }
}

/// Guidance for one latent: real features or the learned null token.
#[derive(Clone, Copy, Debug)]
pub enum CondInput<'a> {
    Features(&'a Condition),
    Null,
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| (t as f64 * f).sin_cos()).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Stacks conditions into `[N, D, 1, T']` plus the null mask `[N, 1, 1, 1]`.
fn cond_batch(arch: &DenoiserArch, conds: &[CondInput]) -> Result<(Tensor, Tensor)> {
    let (d, t) = (arch.cond_dim, arch.latent_shape[2]);
    let mut data = vec![0.0; conds.len() * d * t];
    let mut mask = vec![0.0; conds.len()];
    for (i, c) in conds.iter().enumerate() {
        match c {
            CondInput::Null => mask[i] = 1.0,
            CondInput::Features(c) => {
                if c.dim() != d || c.frames() != t {
                    return Err(Error::invalid(format!(
                        "condition is {}x{}, denoiser expects {t}x{d}",
                        c.frames(),
                        c.dim()
                    )));
                }
                for f in 0..t {
                    for (k, v) in c.frame(f).iter().enumerate() {
                        data[(i * d + k) * t + f] = *v;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[conds.len(), d, 1, t], data),
        Tensor::from_vec(&[conds.len(), 1, 1, 1], mask),
    ))
}

fn check_latent(arch: &DenoiserArch, x: &Tensor, channels: usize, what: &str) -> Result<()> {
    let [_, f, t] = arch.latent_shape;
    let s = x.shape();
    if s.len() != 4 || s[1] != channels || s[2] != f || s[3] != t {
        return Err(Error::invalid(format!(
            "{what} has shape {s:?}, expected [N, {channels}, {f}, {t}]"
        )));
    }
    Ok(())
}

/// Inputs of one batched denoiser evaluation, already in diffusion units.
struct Inputs {
    z_t: Tensor,
    aux: Option<Tensor>,
    temb: Tensor,
    cond: Tensor,
    null_mask: Tensor,
    /// Skip weight √(1−ᾱ_t) and network weight √ᾱ_t, broadcast to z_t.
    skip: Tensor,
    gain: Tensor,
}

fn prepare(
    arch: &DenoiserArch,
    z_t: Tensor,
    ts: &[usize],
    conds: &[CondInput],
    aux_vae: Option<&Tensor>,
) -> Result<Inputs> {
    let n = z_t.dim(0);
    check_latent(arch, &z_t, arch.latent_shape[0], "z_t")?;
    if ts.len() != n || conds.len() != n {
        return Err(Error::invalid("batch sizes of z_t, t and c differ"));
    }
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > arch.t_train) {
        return Err(Error::invalid(format!("timestep {t} outside 1..={}", arch.t_train)));
    }
    let aux = match (arch.aux_channels, aux_vae) {
        (0, None) => None,
        (0, Some(_)) => return Err(Error::invalid("denoiser takes no auxiliary latent")),
        (_, None) => return Err(Error::invalid("denoiser needs the noisy-mixture latent")),
        (k, Some(a)) => {
            check_latent(arch, a, k, "auxiliary latent")?;
            if a.dim(0) != n {
                return Err(Error::invalid("auxiliary latent batch size differs"));
            }
            Some(a.map(|v| v * arch.latent_scale))
        }
    };
    let (cond, null_mask) = cond_batch(arch, conds)?;
    let mut inp = Inputs {
        skip: Tensor::zeros(z_t.shape()),
        gain: Tensor::zeros(z_t.shape()),
        temb: Tensor::zeros(&[n, arch.time_dim]),
        z_t,
        aux,
        cond,
        null_mask,
    };
    inp.set_timesteps(arch, &arch.schedule()?, ts);
    Ok(inp)
}

impl Inputs {
    /// Refreshes every timestep-dependent input.
    fn set_timesteps(&mut self, arch: &DenoiserArch, sched: &NoiseSchedule, ts: &[usize]) {
        let per = self.z_t.len() / ts.len().max(1);
        let mut skip = Vec::with_capacity(self.z_t.len());
        let mut gain = Vec::with_capacity(self.z_t.len());
        for &t in ts {
            let ab = sched.alpha_bar(t);
            skip.extend(std::iter::repeat_n((1.0 - ab).sqrt(), per));
            gain.extend(std::iter::repeat_n(ab.sqrt(), per));
        }
        self.skip = Tensor::from_vec(self.z_t.shape(), skip);
        self.gain = Tensor::from_vec(self.z_t.shape(), gain);
        self.temb = time_embedding(ts, arch.time_dim);
    }
}

fn forward(g: &mut Graph, p: &Bound, arch: &DenoiserArch, inp: &Inputs) -> Var {
    let n = inp.z_t.dim(0);
    let w = arch.width;
    let same = Conv2dSpec::same(3, 3);
    let z = g.constant(inp.z_t.clone());
    let x = match &inp.aux {
        Some(a) => {
            let a = g.constant(a.clone());
            g.concat(&[z, a], 1)
        }
        None => z,
    };
    let mut h = nn::conv(g, p, "den.in", x, same);

    let te = g.constant(inp.temb.clone());
    let te = nn::linear(g, p, "den.t1", te);
    let te = g.silu(te);
    let te = nn::linear(g, p, "den.t2", te);
    let te = g.silu(te);

    let keep = g.constant(inp.null_mask.map(|u| 1.0 - u));
    let use_null = g.constant(inp.null_mask.clone());
    let c = g.constant(inp.cond.clone());
    let c = g.mul(c, keep);
    let null = g.mul(p.get("den.null"), use_null);
    let c = g.add(c, null);

    for i in 0..arch.blocks {
        let b = format!("den.b{i}");
        let y = g.silu(h);
        let y = nn::conv(g, p, &format!("{b}.conv1"), y, same);
        let tb = nn::linear(g, p, &format!("{b}.temb"), te);
        let tb = g.reshape(tb, &[n, w, 1, 1]);
        let y = g.add(y, tb);
        let film = nn::conv(g, p, &format!("{b}.film"), c, Conv2dSpec::same(1, 1));
        let gamma = g.narrow(film, 1, 0, w);
        let beta = g.narrow(film, 1, w, w);
        let gain = g.add_scalar(gamma, 1.0);
        let y = g.mul(y, gain);
        let y = g.add(y, beta);
        let y = g.silu(y);
        let y = nn::conv(g, p, &format!("{b}.conv2"), y, same);
        h = g.add(h, y);
    }
    let h = g.silu(h);
    let f = nn::conv(g, p, "den.out", h, same);
    // ε̂ = √(1−ᾱ)·z_t + √ᾱ·F. The implied x̂0 = √ᾱ·z_t − √(1−ᾱ)·F stays
    // bounded at large t, where a raw ε output would be amplified by
    // √((1−ᾱ)/ᾱ) in the DDIM update.
    let skip = g.constant(inp.skip.clone());
    let gain = g.constant(inp.gain.clone());
    let zs = g.mul(z, skip);
    let fs = g.mul(f, gain);
    g.add(zs, fs)
}

fn predict(params: &DenoiserParams, inp: &Inputs) -> Tensor {
    let mut g = Graph::new();
    let p = g.bind(&params.store);
    let out = forward(&mut g, &p, &params.arch, inp);
    g.value(out).clone()
}

/// ε̂(z_t, t, c) for a batch sharing one timestep. `aux` is the
/// noisy-mixture latent in VAE units, required when the architecture has
/// auxiliary channels.
pub fn denoiser_apply(
    params: &DenoiserParams,
    z_t: &LatentMap,
    t: usize,
    conds: &[CondInput],
    aux: Option<&LatentMap>,
) -> Result<Tensor> {
    let n = z_t.shape()[0];
    let inp = prepare(
        &params.arch,
        z_t.tensor().clone(),
        &vec![t; n],
        conds,
        aux.map(LatentMap::tensor),
    )?;
    Ok(predict(params, &inp))
}

/// Mean squared error of the noise prediction at a shared timestep.
pub fn diffusion_loss(
    params: &DenoiserParams,
    z0: &LatentMap,
    conds: &[CondInput],
    t: usize,
    eps: &Tensor,
    aux: Option<&LatentMap>,
) -> Result<f64> {
    if eps.shape() != z0.shape() {
        return Err(Error::invalid("eps and z0 differ in shape"));
    }
    let sched = params.arch.schedule()?;
    sched.check_t(t)?;
    let z0s = z0.tensor().map(|v| v * params.arch.latent_scale);
    let z_t = q_sample_tensor(&z0s, sched.alpha_bar(t), eps);
    let n = z0.shape()[0];
    let inp = prepare(&params.arch, z_t, &vec![t; n], conds, aux.map(LatentMap::tensor))?;
    let pred = predict(params, &inp);
    Ok(pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / eps.len().max(1) as f64)
}

/// Central-difference check of the noise-prediction loss gradient with
/// respect to every parameter. Each sample is noised to its own timestep.
pub fn diffusion_gradient_check(
    params: &DenoiserParams,
    z0: &LatentMap,
    ts: &[usize],
    conds: &[CondInput],
    eps: &Tensor,
    aux: Option<&LatentMap>,
    abs_floor: f64,
) -> Result<GradCheck> {
    if eps.shape() != z0.shape() {
        return Err(Error::invalid("eps and z0 differ in shape"));
    }
    let arch = &params.arch;
    let sched = arch.schedule()?;
    let n = z0.shape()[0];
    if ts.len() != n {
        return Err(Error::invalid("one timestep per sample required"));
    }
    let per = z0.tensor().len() / n.max(1);
    let mut z_t = Vec::with_capacity(z0.tensor().len());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let span = i * per..(i + 1) * per;
        for (z, e) in z0.tensor().data()[span.clone()].iter().zip(&eps.data()[span]) {
            z_t.push(ab.sqrt() * z * arch.latent_scale + (1.0 - ab).sqrt() * e);
        }
    }
    let z_t = Tensor::from_vec(z0.shape(), z_t);
    let inp = prepare(arch, z_t, ts, conds, aux.map(LatentMap::tensor))?;
    Ok(nn::gradient_check(
        &params.store,
        |g, b| loss_graph(g, b, arch, &inp, eps),
        1e-5,
        abs_floor,
    ))
}

fn loss_graph(g: &mut Graph, p: &Bound, arch: &DenoiserArch, inp: &Inputs, eps: &Tensor) -> Var {
    let pred = forward(g, p, arch, inp);
    let target = g.constant(eps.clone());
    g.mse(pred, target)
}

/// One training pair: the clean latent, the noisy-mixture latent (both in
/// VAE units, `[C, F', T']`) and the condition of the noisy audio.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionExample {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub cond: Condition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing c with the null token.
    pub p_uncond: f64,
    pub adam: AdamConfig,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            p_uncond: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

/// 1 / RMS of the clean latents.
fn latent_scale_for(examples: &[DiffusionExample]) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for e in examples {
        acc += e.clean.sq_norm();
        n += e.clean.len();
    }
    if acc > 0.0 {
        (n as f64 / acc).sqrt()
    } else {
        1.0
    }
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
    for t in parts {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Tensor::from_vec(&shape, data)
}

/// Noise-regression training with uniform timesteps and condition dropout.
/// `arch.latent_scale` is recomputed from the data. Returns the parameters
/// and the loss of every step.
pub fn train_diffusion(
    examples: &[DiffusionExample],
    arch: &DenoiserArch,
    cfg: &DiffTrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::invalid("train_diffusion: no training examples"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("diffusion steps and batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::Config("p_uncond must lie in [0, 1]".into()));
    }
    let mut arch = arch.clone();
    arch.latent_scale = latent_scale_for(examples);
    let sched = arch.schedule()?;
    let mut params = DenoiserParams::init(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let mut adam = Adam::new(cfg.adam.clone());
    let bs = cfg.batch_size.min(examples.len());
    let steps_per_epoch = examples.len().div_ceil(bs);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..examples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..bs).collect();
        let clean: Vec<&Tensor> = batch.iter().map(|&i| &examples[i].clean).collect();
        let noisy: Vec<&Tensor> = batch.iter().map(|&i| &examples[i].noisy).collect();
        let z0 = stack(&clean).map(|v| v * arch.latent_scale);
        let ts: Vec<usize> = (0..bs).map(|_| rng.random_range(1..=arch.t_train)).collect();
        let eps = Tensor::randn(z0.shape(), &mut rng);
        let per = z0.len() / bs;
        let mut z_t = Tensor::zeros(z0.shape());
        for (i, &t) in ts.iter().enumerate() {
            let r = i * per..(i + 1) * per;
            let a = sched.alpha_bar(t);
            let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
            let dst = &mut z_t.data_mut()[r.clone()];
            for ((d, z), e) in dst.iter_mut().zip(&z0.data()[r.clone()]).zip(&eps.data()[r]) {
                *d = sa * z + sb * e;
            }
        }
        let conds: Vec<CondInput> = batch
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < cfg.p_uncond {
                    CondInput::Null
                } else {
                    CondInput::Features(&examples[i].cond)
                }
            })
            .collect();
        let aux = (arch.aux_channels > 0).then(|| stack(&noisy));
        let inp = prepare(&arch, z_t, &ts, &conds, aux.as_ref())?;
        let mut g = Graph::new();
        let p = g.bind(&params.store);
        let loss = loss_graph(&mut g, &p, &arch, &inp, &eps);
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Training {
                stage: "step",
                index: step + 1,
                message: format!("diffusion loss is {value}"),
            });
        }
        let grads = g.backward(loss).for_params(&p, &g);
        adam.step(&mut params.store, &grads, cfg.adam.lr_at_epoch(step / steps_per_epoch))?;
        if (step + 1) % 100 == 0 {
            log::info!("diffusion step {}/{}: loss {value:.6}", step + 1, cfg.steps);
        }
        log.push(value);
    }
    params.store.freeze();
    Ok((params, log))
}

/// Samples one latent per entry of `conds`, each from its own seed.
/// `aux` is the noisy-mixture latent batch in VAE units; with
/// `init_from_noisy` the chain starts from its forward-noised version
/// instead of pure noise. Returns latents in VAE units.
pub fn sample_batch(
    params: &DenoiserParams,
    conds: &[CondInput],
    aux: Option<&Tensor>,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    seeds: &[u64],
    init_from_noisy: bool,
) -> Result<LatentMap> {
    let arch = &params.arch;
    if seeds.len() != conds.len() {
        return Err(Error::invalid("one seed per sampled latent is required"));
    }
    if sched.t_train() != arch.t_train {
        return Err(Error::Config(format!(
            "schedule has {} steps, denoiser was trained with {}",
            sched.t_train(),
            arch.t_train
        )));
    }
    let [c, f, t] = arch.latent_shape;
    let n = conds.len();
    let mut start = Vec::with_capacity(n * c * f * t);
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        start.extend(Tensor::randn(&[c, f, t], &mut rng).into_data());
    }
    let mut z = Tensor::from_vec(&[n, c, f, t], start);
    if init_from_noisy {
        let a = aux.ok_or_else(|| Error::invalid("init_from_noisy needs the noisy latent"))?;
        if a.shape() != z.shape() {
            return Err(Error::invalid("noisy latent does not match the sampled shape"));
        }
        let a_t = sched.alpha_bar(plan.timesteps()[0]);
        z = q_sample_tensor(&a.map(|v| v * arch.latent_scale), a_t, &z);
    }
    // Condition and auxiliary inputs are fixed along the chain.
    let mut inp = prepare(arch, z.clone(), &vec![1; n], conds, aux)?;
    let out = ddim_sample(
        |z_t, step_t| {
            inp.z_t = z_t.clone();
            inp.set_timesteps(arch, sched, &vec![step_t; n]);
            Ok(predict(params, &inp))
        },
        z,
        plan,
        sched,
    )?;
    LatentMap::new(out.map(|v| v / arch.latent_scale))
}

/// Single-latent form of [`sample_batch`].
pub fn sample(
    params: &DenoiserParams,
    c: CondInput,
    aux: Option<&LatentMap>,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LatentMap> {
    sample_batch(params, &[c], aux.map(LatentMap::tensor), plan, sched, &[seed], false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::FeatureSource;

    fn tiny() -> DenoiserArch {
        DenoiserArch {
            latent_shape: [1, 4, 3],
            aux_channels: 1,
            cond_dim: 2,
            width: 4,
            time_dim: 4,
            blocks: 1,
            schedule: ScheduleKind::LinearBeta,
            t_train: 50,
            latent_scale: 1.3,
        }
    }

    fn randomized(arch: DenoiserArch, seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let names: Vec<String> = p.store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let t = p.store.tensor_mut(&n).unwrap();
            for v in t.data_mut() {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    fn cond(frames: usize, dim: usize, seed: u64) -> Condition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::randn(&[frames * dim], &mut rng).into_data();
        Condition::new(frames, dim, v, FeatureSource::Internal).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let arch = tiny();
        let p = randomized(arch.clone(), 1);
        assert!(p.store.num_scalars() <= 1000, "{}", p.store.num_scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z_t = Tensor::randn(&[2, 1, 4, 3], &mut rng);
        let eps = Tensor::randn(&[2, 1, 4, 3], &mut rng);
        let aux = Tensor::randn(&[2, 1, 4, 3], &mut rng);
        let c = cond(3, 2, 3);
        let conds = [CondInput::Features(&c), CondInput::Null];
        let inp = prepare(&arch, z_t, &[7, 31], &conds, Some(&aux)).unwrap();
        let r = nn::gradient_check(&p.store, |g, b| loss_graph(g, b, &arch, &inp, &eps), 1e-5, 1e-6);
        assert!(r.checked > 100);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn apply_is_deterministic_and_checks_shapes() {
        let p = randomized(tiny(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentMap::new(Tensor::randn(&[1, 1, 4, 3], &mut rng)).unwrap();
        let aux = LatentMap::new(Tensor::randn(&[1, 1, 4, 3], &mut rng)).unwrap();
        let c = cond(3, 2, 6);
        let a = denoiser_apply(&p, &z, 10, &[CondInput::Features(&c)], Some(&aux)).unwrap();
        assert_eq!(a, denoiser_apply(&p, &z, 10, &[CondInput::Features(&c)], Some(&aux)).unwrap());
        assert!(a.is_finite());
        let null = denoiser_apply(&p, &z, 10, &[CondInput::Null], Some(&aux)).unwrap();
        assert_ne!(a, null);
        assert!(denoiser_apply(&p, &z, 10, &[CondInput::Features(&cond(4, 2, 1))], Some(&aux)).is_err());
        assert!(denoiser_apply(&p, &z, 10, &[CondInput::Null], None).is_err());
        assert!(denoiser_apply(&p, &z, 0, &[CondInput::Null], Some(&aux)).is_err());
        let bad = LatentMap::new(Tensor::zeros(&[1, 2, 4, 3])).unwrap();
        assert!(denoiser_apply(&p, &bad, 10, &[CondInput::Null], Some(&aux)).is_err());
    }

    #[test]
    fn fresh_model_predicts_the_prior_noise() {
        // With a zero output layer ε̂ = √(1−ᾱ)·z_t, the optimum for z0 ~ N(0, 1).
        let p = DenoiserParams::init(tiny(), 0).unwrap();
        let z0 = LatentMap::new(Tensor::full(&[1, 1, 4, 3], 0.5)).unwrap();
        let eps = Tensor::full(&[1, 1, 4, 3], 2.0);
        let l = diffusion_loss(&p, &z0, &[CondInput::Null], 20, &eps, Some(&z0)).unwrap();
        let ab = p.arch.schedule().unwrap().alpha_bar(20);
        let z_t = ab.sqrt() * 0.5 * 1.3 + (1.0 - ab).sqrt() * 2.0;
        let want = ((1.0 - ab).sqrt() * z_t - 2.0).powi(2);
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!(diffusion_loss(&p, &z0, &[CondInput::Null], 20, &Tensor::zeros(&[1]), Some(&z0)).is_err());
    }

    fn examples(n: usize) -> Vec<DiffusionExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| DiffusionExample {
                clean: Tensor::randn(&[1, 4, 3], &mut rng),
                noisy: Tensor::randn(&[1, 4, 3], &mut rng),
                cond: cond(3, 2, i as u64),
            })
            .collect()
    }

    #[test]
    fn training_smoke_and_determinism() {
        let cfg = DiffTrainConfig {
            steps: 10,
            batch_size: 3,
            ..DiffTrainConfig::default()
        };
        let ex = examples(4);
        let (a, la) = train_diffusion(&ex, &tiny(), &cfg, 1).unwrap();
        let (b, lb) = train_diffusion(&ex, &tiny(), &cfg, 1).unwrap();
        assert_eq!(la.len(), 10);
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(a.store.is_frozen());
        let (_, lc) = train_diffusion(&ex, &tiny(), &cfg, 2).unwrap();
        assert_ne!(la, lc);
        assert!(train_diffusion(&[], &tiny(), &cfg, 1).is_err());
    }

    #[test]
    fn training_reports_the_diverging_step() {
        let mut ex = examples(2);
        ex[1].noisy.data_mut()[0] = f64::NAN;
        let cfg = DiffTrainConfig {
            steps: 3,
            batch_size: 1,
            ..DiffTrainConfig::default()
        };
        match train_diffusion(&ex, &tiny(), &cfg, 0) {
            Err(Error::Training { stage: "step", index, .. }) => assert!(index >= 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn sampling_is_a_pure_function_of_its_inputs() {
        let p = randomized(tiny(), 7);
        let sched = p.arch.schedule().unwrap();
        let plan = SamplerPlan::uniform_sqrt_alpha(6, &sched).unwrap();
        let c = cond(3, 2, 8);
        let aux = LatentMap::new(Tensor::full(&[1, 1, 4, 3], 0.2)).unwrap();
        let a = sample(&p, CondInput::Features(&c), Some(&aux), &plan, &sched, 3).unwrap();
        let b = sample(&p, CondInput::Features(&c), Some(&aux), &plan, &sched, 3).unwrap();
        assert_eq!(a, b);
        let other = sample(&p, CondInput::Features(&c), Some(&aux), &plan, &sched, 4).unwrap();
        assert_ne!(a, other);
        let wrong = make_schedule(60, ScheduleKind::LinearBeta).unwrap();
        assert!(sample(&p, CondInput::Null, Some(&aux), &plan, &wrong, 3).is_err());
    }

    #[test]
    fn sampler_chain_matches_stepwise_application() {
        let p = randomized(tiny(), 9);
        let sched = p.arch.schedule().unwrap();
        let plan = SamplerPlan::uniform_sqrt_alpha(4, &sched).unwrap();
        let c = cond(3, 2, 10);
        let aux = LatentMap::new(Tensor::full(&[1, 1, 4, 3], -0.4)).unwrap();
        let got = sample(&p, CondInput::Features(&c), Some(&aux), &plan, &sched, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut z = LatentMap::new(Tensor::randn(&[1, 1, 4, 3], &mut rng)).unwrap();
        for (t, t_prev) in plan.transitions() {
            let eps = denoiser_apply(&p, &z, t, &[CondInput::Features(&c)], Some(&aux)).unwrap();
            z = super::super::ddim_step(&z, &eps, t, t_prev, &sched).unwrap();
        }
        let want = z.tensor().map(|v| v / p.arch.latent_scale);
        let gap = got.tensor().zip_map(&want, |a, b| (a - b).abs()).data().iter().fold(0.0f64, |m, &v| m.max(v));
        assert!(gap < 1e-12, "{gap}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = DiffTrainConfig {
            steps: 2,
            batch_size: 2,
            ..DiffTrainConfig::default()
        };
        let (p, log) = train_diffusion(&examples(3), &tiny(), &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), &log).unwrap();
        let (q, log2) = DenoiserParams::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(log, log2);
    }
}
