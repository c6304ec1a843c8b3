//! Signal generators for the synthetic corpus.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples between harmonic-amplitude updates.
const CONTROL_BLOCK: usize = 64;

struct Syllable {
    start: usize,
    end: usize,
    formants_from: [f64; 3],
    formants_to: [f64; 3],
}

fn draw_formants<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(300.0..850.0),
        rng.random_range(900.0..2300.0),
        rng.random_range(2400.0..3400.0),
    ]
}

fn plan_syllables<R: Rng>(len: usize, sr: f64, rng: &mut R) -> Vec<Syllable> {
    let mut out = Vec::new();
    let mut pos = (rng.random_range(0.02..0.15) * sr) as usize;
    while pos < len {
        let dur = (rng.random_range(0.12..0.32) * sr) as usize;
        out.push(Syllable {
            start: pos,
            end: (pos + dur).min(len),
            formants_from: draw_formants(rng),
            formants_to: draw_formants(rng),
        });
        pos += dur + (rng.random_range(0.03..0.15) * sr) as usize;
    }
    out
}

/// Voiced-speech surrogate: a harmonic complex on a gliding fundamental
/// (100-220 Hz), shaped by three drifting formant resonances and gated into
/// syllables with short pauses, plus a little aspiration noise.
pub fn synth_speech<R: Rng>(len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let sr = sample_rate as f64;
    let syllables = plan_syllables(len, sr, rng);
    let f0_base = rng.random_range(100.0..220.0);
    let vib_rate = rng.random_range(0.5..2.0);
    let vib_depth = rng.random_range(0.03..0.12);
    let vib_phase = rng.random_range(0.0..TAU);
    let glide = rng.random_range(-0.15..0.15);
    let bandwidths = [90.0, 130.0, 180.0];
    let gains = [1.0, 0.6, 0.3];
    let duration = len as f64 / sr;
    let f0_at = |n: usize| {
        let t = n as f64 / sr;
        f0_base
            * (1.0 + vib_depth * (TAU * vib_rate * t + vib_phase).sin() + glide * (t / duration - 0.5))
    };
    let max_harm = (0.45 * sr / (f0_base * 0.7)) as usize + 1;

    // Per-sample gate and formant targets.
    let mut gate = vec![0.0; len];
    let mut syl_of = vec![usize::MAX; len];
    for (k, s) in syllables.iter().enumerate() {
        let span = (s.end - s.start).max(1) as f64;
        for n in s.start..s.end {
            gate[n] = (PI * (n - s.start) as f64 / span).sin();
            syl_of[n] = k;
        }
    }
    let amps_at = |n: usize, out: &mut [f64]| {
        out.iter_mut().for_each(|a| *a = 0.0);
        let k = syl_of[n.min(len - 1)];
        if k == usize::MAX {
            return;
        }
        let s = &syllables[k];
        let u = (n - s.start) as f64 / (s.end - s.start).max(1) as f64;
        let f0 = f0_at(n);
        for (h, a) in out.iter_mut().enumerate() {
            let f = (h + 1) as f64 * f0;
            if f > 0.45 * sr {
                break;
            }
            let mut v = 0.0;
            for i in 0..3 {
                let fc = s.formants_from[i] + u * (s.formants_to[i] - s.formants_from[i]);
                let d = (f - fc) / bandwidths[i];
                v += gains[i] * (-0.5 * d * d).exp();
            }
            *a = (v + 0.02) / (1.0 + f / 1000.0);
        }
    };

    let mut out = vec![0.0; len];
    let mut a0 = vec![0.0; max_harm];
    let mut a1 = vec![0.0; max_harm];
    amps_at(0, &mut a0);
    let mut phase = 0.0f64;
    for block in (0..len).step_by(CONTROL_BLOCK) {
        let next = (block + CONTROL_BLOCK).min(len);
        amps_at(next.min(len - 1), &mut a1);
        for n in block..next {
            let frac = (n - block) as f64 / CONTROL_BLOCK as f64;
            phase = (phase + TAU * f0_at(n) / sr) % TAU;
            // sin(h·φ) by the Chebyshev recurrence.
            let (s1, c1) = phase.sin_cos();
            let two_c = 2.0 * c1;
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for h in 0..max_harm {
                let a = a0[h] + frac * (a1[h] - a0[h]);
                if a == 0.0 && a0[h] == 0.0 && a1[h] == 0.0 {
                    break;
                }
                acc += a * cur;
                let nxt = two_c * cur - prev;
                prev = cur;
                cur = nxt;
            }
            let breath: f64 = StandardNormal.sample(rng);
            out[n] = gate[n] * (acc + 0.02 * breath);
        }
        std::mem::swap(&mut a0, &mut a1);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

fn white<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// 1/f noise from Kellet's filter bank, after a warm-up.
fn pink<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let warm = 4096;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(len);
    for i in 0..len + warm {
        let w: f64 = StandardNormal.sample(rng);
        b[0] = 0.99886 * b[0] + w * 0.055_517_9;
        b[1] = 0.99332 * b[1] + w * 0.075_075_9;
        b[2] = 0.96900 * b[2] + w * 0.153_852;
        b[3] = 0.86650 * b[3] + w * 0.310_485_6;
        b[4] = 0.55000 * b[4] + w * 0.532_952_2;
        b[5] = -0.7616 * b[5] - w * 0.016_898;
        let p = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115_926;
        if i >= warm {
            out.push(p);
        }
    }
    out
}

/// Several overlapping talkers, band-limited to roughly 150-3500 Hz.
fn babble<R: Rng>(len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let talkers = rng.random_range(4..=6);
    let mut mix = vec![0.0; len];
    for _ in 0..talkers {
        let v = synth_speech(len, sample_rate, rng);
        let p = (v.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt().max(1e-12);
        for (m, x) in mix.iter_mut().zip(&v) {
            *m += x / p;
        }
    }
    let sr = sample_rate as f64;
    let lp = (-TAU * 3500.0 / sr).exp();
    let hp = (-TAU * 150.0 / sr).exp();
    let (mut l, mut h_in, mut h_out) = (0.0, 0.0, 0.0);
    for v in mix.iter_mut() {
        l = (1.0 - lp) * *v + lp * l;
        let y = hp * (h_out + l - h_in);
        h_in = l;
        h_out = y;
        *v = y;
    }
    mix
}

pub fn synth_noise<R: Rng>(kind: NoiseKind, len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    match kind {
        NoiseKind::White => white(len, rng),
        NoiseKind::Pink => pink(len, rng),
        NoiseKind::Babble => babble(len, sample_rate, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
        use rustfft::{num_complex::Complex64, FftPlanner};
        let n = x.len();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        (0..n / 2)
            .filter(|&k| {
                let f = k as f64 * 16_000.0 / n as f64;
                f >= lo && f < hi
            })
            .map(|k| buf[k].norm_sqr())
            .sum()
    }

    #[test]
    fn speech_is_finite_gated_and_deterministic() {
        let a = synth_speech(16_000, 16_000, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synth_speech(16_000, 16_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        let frames: Vec<f64> = a.chunks(320).map(rms).collect();
        let max = frames.iter().cloned().fold(0.0, f64::max);
        let min = frames.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max > 0.0 && min < 0.05 * max, "no pauses: {min} / {max}");
        // Energy sits below 4 kHz.
        assert!(band_power(&a, 80.0, 4000.0) > 10.0 * band_power(&a, 4000.0, 8000.0));
    }

    #[test]
    fn noise_spectra_have_expected_tilt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = synth_noise(NoiseKind::White, 32_768, 16_000, &mut rng);
        let p = synth_noise(NoiseKind::Pink, 32_768, 16_000, &mut rng);
        let b = synth_noise(NoiseKind::Babble, 32_768, 16_000, &mut rng);
        let ratio = |x: &[f64]| band_power(x, 250.0, 500.0) / band_power(x, 4000.0, 8000.0);
        // White: power proportional to bandwidth (250 Hz vs 4 kHz).
        assert!((ratio(&w) / (250.0 / 4000.0) - 1.0).abs() < 0.2);
        // Pink: equal power per octave, so 1 octave vs 1 octave.
        assert!((ratio(&p) - 1.0).abs() < 0.3, "pink ratio {}", ratio(&p));
        assert!(ratio(&b) > 20.0);
        assert_eq!("babble".parse::<NoiseKind>().unwrap(), NoiseKind::Babble);
        assert!("brown".parse::<NoiseKind>().is_err());
    }
}
