//! Variance-preserving diffusion over VAE latents with deterministic DDIM
//! sampling.

mod denoiser;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::vae::LatentMap;

pub use denoiser::{
    denoiser_apply, diffusion_gradient_check, diffusion_loss, sample, sample_batch, train_diffusion, CondInput,
    DenoiserArch, DenoiserParams, DiffTrainConfig, DiffusionExample, CHECKPOINT_KIND,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearBeta => "linear-beta",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// ᾱ_1..ᾱ_T, strictly decreasing in (0, 1). ᾱ_0 is taken as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub fn make_schedule(t_train: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_train < 2 {
        return Err(Error::invalid("schedule needs at least 2 steps"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..t_train)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t_train - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                ((t / t_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=t_train)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(0.0, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_train);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let sched = NoiseSchedule { kind, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        let a = &self.alpha_bar;
        if a.iter().any(|&v| !(v > 0.0 && v < 1.0)) || a.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("schedule must be strictly decreasing in (0, 1)"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_train(&self) -> usize {
        self.alpha_bar.len()
    }

    /// ᾱ_t for 0 ≤ t ≤ T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.t_train()
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε.
pub fn q_sample(z0: &LatentMap, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentMap> {
    sched.check_t(t)?;
    same_shape(z0.tensor(), eps, "q_sample")?;
    LatentMap::new(q_sample_tensor(z0.tensor(), sched.alpha_bar(t), eps))
}

pub(crate) fn q_sample_tensor(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// One deterministic DDIM move from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &LatentMap,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentMap> {
    if t <= t_prev {
        return Err(Error::invalid(format!(
            "ddim_step needs t > t_prev, got {t} -> {t_prev}"
        )));
    }
    sched.check_t(t)?;
    same_shape(z_t.tensor(), eps_hat, "ddim_step")?;
    LatentMap::new(ddim_tensor(z_t.tensor(), eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev)))
}

fn ddim_tensor(z_t: &Tensor, eps_hat: &Tensor, a_t: f64, a_prev: f64) -> Tensor {
    let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - sb * e) / sa;
        pa * z0 + pb * e
    })
}

/// Reverse-time timesteps, strictly decreasing and ending at 1 (a
/// single-step plan is just `[T]`). Sampling evaluates the denoiser once
/// per entry and finishes at t = 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerPlan {
    timesteps: Vec<usize>,
}

impl SamplerPlan {
    pub fn new(timesteps: Vec<usize>, t_train: usize) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::invalid("plan needs at least one step"));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("plan timesteps must strictly decrease"));
        }
        let last = *timesteps.last().unwrap();
        if (timesteps.len() > 1 && last != 1) || last == 0 || timesteps[0] > t_train {
            return Err(Error::invalid(format!(
                "plan must lie in 1..={t_train} and end at 1"
            )));
        }
        Ok(Self { timesteps })
    }

    /// `steps` timesteps from T down to 1, evenly spaced in √ᾱ.
    pub fn uniform_sqrt_alpha(steps: usize, sched: &NoiseSchedule) -> Result<Self> {
        let t_max = sched.t_train();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(format!("steps must be in 1..={t_max}")));
        }
        if steps == 1 {
            return Self::new(vec![t_max], t_max);
        }
        let (lo, hi) = (sched.alpha_bar(t_max).sqrt(), sched.alpha_bar(1).sqrt());
        let sqrt: Vec<f64> = sched.values().iter().map(|a| a.sqrt()).collect();
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let target = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            // Nearest timestep by √ᾱ, which decreases with t.
            let mut t = match sqrt.binary_search_by(|v| target.total_cmp(v)) {
                Ok(k) => k + 1,
                Err(k) => {
                    if k == 0 {
                        1
                    } else if k >= t_max {
                        t_max
                    } else if (sqrt[k - 1] - target).abs() <= (target - sqrt[k]).abs() {
                        k
                    } else {
                        k + 1
                    }
                }
            };
            // Keep strictly decreasing while leaving room for later entries.
            if let Some(&prev) = out.last() {
                t = t.min(prev - 1);
            }
            t = t.max(steps - i);
            out.push(t);
        }
        Self::new(out, t_max)
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// (t, t_prev) pairs, the last one ending at 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Runs DDIM along `plan` from `z_start` using any noise predictor
/// `predict(z_t, t)`.
pub fn ddim_sample(
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    z_start: Tensor,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if plan.timesteps[0] > sched.t_train() {
        return Err(Error::invalid("plan exceeds the schedule length"));
    }
    let mut z = z_start;
    for (t, t_prev) in plan.transitions() {
        let eps = predict(&z, t)?;
        same_shape(&z, &eps, "noise prediction")?;
        z = ddim_tensor(&z, &eps, sched.alpha_bar(t), sched.alpha_bar(t_prev));
    }
    Ok(z)
}
