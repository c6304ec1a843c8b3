//! Extended short-time objective intelligibility.
//!
//! Follows the reference formulation: resample to 10 kHz, drop frames more
//! than 40 dB below the loudest clean frame, one-third-octave band envelopes
//! from a 512-point DFT of 256-sample Hann frames, 30-frame segments
//! normalised over time and then over bands, and the mean inner product.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

const FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const DYN_RANGE: f64 = 40.0;

/// Minimum input duration (30 frames at the internal rate).
pub const MIN_DURATION_SECS: f64 = (SEGMENT * HOP) as f64 / FS as f64;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc low-pass for rational resampling by `up / down`,
/// normalised to unit DC gain and then scaled by `up`.
fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let cutoff = 1.0 / (2 * up.max(down)) as f64;
    let roll_off = cutoff / 10.0;
    let rejection_db: f64 = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * half + 1) as f64;
    let i0b = bessel_i0(beta);
    let mut h: Vec<f64> = (-half..=half)
        .enumerate()
        .map(|(n, t)| {
            let r = 2.0 * n as f64 / (m - 1.0) - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            w * 2.0 * up as f64 * cutoff * sinc(2.0 * cutoff * t as f64)
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v *= up as f64 / sum;
    }
    h
}

/// Polyphase rational resampling with a centred filter.
fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from as usize, to as usize);
    let (up, down) = (to as usize / g, from as usize / g);
    let h = resample_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    let up_len = x.len() * up;
    (0..n_out)
        .map(|m| {
            // y[m] = sum_k h[k] * x_up[m*down + half - k], keeping only k where
            // the upsampled index lands on an original sample.
            let centre = m * down + half;
            let k_first = centre % up;
            let mut acc = 0.0;
            let mut k = k_first;
            while k < h.len() {
                let n = centre - k;
                if n < up_len {
                    acc += h[k] * x[n / up];
                }
                if k + up > centre {
                    break;
                }
                k += up;
            }
            acc
        })
        .collect()
}

/// Symmetric Hann of length `n` without the zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energy = |s: usize| {
        let e: f64 = (0..FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
        20.0 * (e.sqrt() + f64::EPSILON).log10()
    };
    let energies: Vec<f64> = starts.iter().map(|&s| energy(s)).collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let out_len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * HOP + FRAME
    };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            xs[j * HOP + i] += w[i] * x[s + i];
            ys[j * HOP + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// Band-index ranges [lo, hi) over the `NFFT/2 + 1` DFT bins.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let n_bins = NFFT / 2 + 1;
    let nearest = |f: f64| {
        (0..n_bins)
            .min_by(|&a, &b| {
                let fa = a as f64 * FS as f64 / NFFT as f64;
                let fb = b as f64 * FS as f64 / NFFT as f64;
                (fa - f).abs().total_cmp(&(fb - f).abs())
            })
            .unwrap()
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes, `[frame][band]`.
fn band_envelopes(x: &[f64], w: &[f64], bands: &[(usize, usize)]) -> Vec<[f64; BANDS]> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    frame_starts(x.len())
        .map(|s| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < FRAME {
                    Complex64::new(w[i] * x[s + i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            let mut env = [0.0; BANDS];
            for (e, &(lo, hi)) in env.iter_mut().zip(bands) {
                *e = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            }
            env
        })
        .collect()
}

/// Centres and scales `v` to unit norm; constant vectors become zero.
fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 1e-300 {
        v.iter_mut().for_each(|a| *a /= norm);
    } else {
        v.iter_mut().for_each(|a| *a = 0.0);
    }
}

/// Row (time) then column (band) normalisation of one segment, `[band][frame]`.
fn normalize_segment(seg: &mut [[f64; SEGMENT]; BANDS]) {
    for row in seg.iter_mut() {
        normalize(row);
    }
    for f in 0..SEGMENT {
        let mut col: [f64; BANDS] = std::array::from_fn(|b| seg[b][f]);
        normalize(&mut col);
        for b in 0..BANDS {
            seg[b][f] = col[b];
        }
    }
}

/// ESTOI of `estimate` against the clean `reference`.
pub fn estoi(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "estoi: length mismatch ({} vs {})",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::invalid("estoi: sample rates differ"));
    }
    if reference.duration_secs() < MIN_DURATION_SECS {
        return Err(Error::invalid(format!(
            "estoi: input shorter than {:.0} ms",
            MIN_DURATION_SECS * 1000.0
        )));
    }
    let x = resample(reference.samples(), reference.sample_rate(), FS);
    let y = resample(estimate.samples(), estimate.sample_rate(), FS);
    let w = hann_inner(FRAME);
    let (x, y) = remove_silent_frames(&x, &y, &w);
    let bands = third_octave_bands();
    let xe = band_envelopes(&x, &w, &bands);
    let ye = band_envelopes(&y, &w, &bands);
    if xe.len() < SEGMENT {
        return Err(Error::invalid(format!(
            "estoi: only {} non-silent frames, need {SEGMENT}",
            xe.len()
        )));
    }
    let n_seg = xe.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..n_seg {
        let take = |e: &[[f64; BANDS]]| {
            let mut seg = [[0.0; SEGMENT]; BANDS];
            for (f, frame) in e[m..m + SEGMENT].iter().enumerate() {
                for b in 0..BANDS {
                    seg[b][f] = frame[b];
                }
            }
            normalize_segment(&mut seg);
            seg
        };
        let (xs, ys) = (take(&xe), take(&ye));
        let mut acc = 0.0;
        for b in 0..BANDS {
            for f in 0..SEGMENT {
                acc += xs[b][f] * ys[b][f];
            }
        }
        total += acc / SEGMENT as f64;
    }
    Ok(total / n_seg as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Gliding harmonic tone whose partials are modulated out of step.
    fn voiced(len: usize, skew: f64) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let t = n as f64 / 16_000.0;
                let phase = 130.0 * t - 30.0 * (2.0 * PI * 0.7 * t).cos() / (2.0 * PI * 0.7);
                0.2 * (1..25)
                    .map(|h| {
                        let env = (0.5 + 0.5 * (2.0 * PI * 3.0 * t + skew * h as f64).sin()).powi(2);
                        env * (2.0 * PI * h as f64 * phase).sin() / h as f64
                    })
                    .sum::<f64>()
            })
            .collect()
    }

    fn white(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::mono16k(v).unwrap()
    }

    #[test]
    fn resampler_preserves_a_low_tone() {
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 440.0 * n as f64 / 16_000.0).sin())
            .collect();
        let y = resample(&x, 16_000, 10_000);
        assert_eq!(y.len(), 10_000);
        for (m, v) in y.iter().enumerate().skip(500).take(9000) {
            let expect = (2.0 * PI * 440.0 * m as f64 / 10_000.0).sin();
            assert!((v - expect).abs() < 2e-3, "sample {m}: {v} vs {expect}");
        }
    }

    #[test]
    fn resampler_rejects_above_new_nyquist() {
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 6_500.0 * n as f64 / 16_000.0).sin())
            .collect();
        let y = resample(&x, 16_000, 10_000);
        let rms = (y[1000..9000].iter().map(|v| v * v).sum::<f64>() / 8000.0).sqrt();
        assert!(rms < 2e-3, "leakage rms {rms}");
    }

    #[test]
    fn band_edges_match_reference_bins() {
        // Edges computed with the reference nearest-bin rule at 10 kHz / 512.
        let bands = third_octave_bands();
        assert_eq!(bands[0], (7, 9));
        assert_eq!(bands[7], (34, 43));
        assert_eq!(bands[14], (174, 219));
        assert!(bands.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn matches_reference_implementation() {
        // Value produced by the reference Python implementation on the same
        // deterministic pair.
        let x = voiced(24_000, 0.7);
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(n, v)| {
                let t = n as f64 / 16_000.0;
                let n = n as f64;
                v + 0.02 * (0.0007 * n * n).sin()
                    + 0.01 * (2.0 * PI * 1000.0 * t + 3.0 * (2.0 * PI * 2.0 * t).sin()).cos()
            })
            .collect();
        let d = estoi(&clip(x), &clip(y)).unwrap();
        assert!((d - 0.902_716_655_573_259_2).abs() < 1e-6, "{d}");
    }

    #[test]
    fn identical_inputs_score_one() {
        let x = clip(voiced(32_000, 0.3));
        assert!((estoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn white_noise_scores_near_zero() {
        let x = clip(voiced(32_000, 0.4));
        let n = clip(white(32_000, 5));
        let d = estoi(&x, &n).unwrap();
        assert!(d.abs() < 0.1, "estoi vs noise {d}");
    }

    #[test]
    fn degrades_with_snr() {
        let x = voiced(32_000, 0.6);
        let n = white(32_000, 7);
        let px = x.iter().map(|v| v * v).sum::<f64>();
        let pn = n.iter().map(|v| v * v).sum::<f64>();
        let score = |snr: f64| {
            let g = (px / (pn * 10f64.powf(snr / 10.0))).sqrt();
            let y: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            estoi(&clip(x.clone()), &clip(y)).unwrap()
        };
        let (a, b, c) = (score(20.0), score(10.0), score(0.0));
        assert!(a >= b && b >= c, "{a} {b} {c}");
    }

    #[test]
    fn short_input_is_rejected() {
        let x = clip(vec![0.1; 6000]);
        assert!(matches!(estoi(&x, &x), Err(Error::InvalidInput(_))));
        let y = clip(vec![0.1; 7000]);
        assert!(estoi(&y, &clip(vec![0.1; 7001])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn global_scaling_is_irrelevant(seed in any::<u64>(), skew in 0.1f64..2.0, a in 0.05f64..20.0, b in 0.05f64..20.0) {
            let x = voiced(12_000, skew);
            let n = white(12_000, seed ^ 9);
            let y: Vec<f64> = x.iter().zip(&n).map(|(p, q)| p + 0.05 * q).collect();
            let base = estoi(&clip(x.clone()), &clip(y.clone())).unwrap();
            let scaled = estoi(
                &clip(x.iter().map(|v| v * a).collect()),
                &clip(y.iter().map(|v| v * b).collect()),
            )
            .unwrap();
            prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
        }
    }
}
