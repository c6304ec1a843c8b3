use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

/// Time origin used for bin phases.
///
/// `Absolute` measures phase against the global sample clock, so a
/// stationary sinusoid at a bin centre keeps a constant phase across frames
/// and the phase pattern around a partial does not depend on its absolute
/// frequency. `FrameLocal` is the textbook per-frame DFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseReference {
    #[default]
    Absolute,
    FrameLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: WindowKind,
    #[serde(default)]
    pub phase: PhaseReference,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop,
            window: WindowKind::Hann,
            phase: PhaseReference::Absolute,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 510-point FFT (256 bins), hop 128.
    pub fn full_scale() -> Self {
        Self::new(510, 128).expect("valid")
    }

    /// 126-point FFT (64 bins), hop 32: same overlap ratio at a quarter size.
    pub fn desk() -> Self {
        Self::new(126, 32).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::invalid(format!(
                "n_fft must be even and >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::invalid(format!(
                "hop must be in 1..={}, got {}",
                self.n_fft, self.hop
            )));
        }
        // Overlap-add needs every output sample covered by some nonzero window
        // value; the periodic Hann window vanishes only at n = 0.
        if self.hop >= self.n_fft {
            return Err(Error::invalid(
                "Hann window leaves gaps in the overlap-add sum at this hop",
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Frames produced for `len` samples under centred framing.
    pub fn frames_for(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.n_fft) / self.hop + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    fn phase_shift(&self, bin: usize, frame: usize) -> Complex64 {
        match self.phase {
            PhaseReference::FrameLocal => Complex64::new(1.0, 0.0),
            PhaseReference::Absolute => {
                let t0 = frame as f64 * self.hop as f64 - self.pad() as f64;
                Complex64::from_polar(1.0, -2.0 * PI * bin as f64 * t0 / self.n_fft as f64)
            }
        }
    }
}

/// Complex F×T spectrogram, stored bin-major (`bins[f * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramComplex {
    bins: Vec<Complex64>,
    n_frames: usize,
    config: StftConfig,
    norm_scale: f64,
    /// Samples of the analysed signal; ISTFT returns this many.
    length: usize,
    /// Frame count before any [`fit_frames`] call.
    original_frames: usize,
}

impl SpectrogramComplex {
    pub fn from_parts(
        bins: Vec<Complex64>,
        n_frames: usize,
        config: StftConfig,
        norm_scale: f64,
        length: usize,
    ) -> Result<Self> {
        config.validate()?;
        if bins.len() != config.n_bins() * n_frames {
            return Err(Error::invalid(format!(
                "{} bins do not match {}x{}",
                bins.len(),
                config.n_bins(),
                n_frames
            )));
        }
        if !(norm_scale > 0.0 && norm_scale.is_finite()) {
            return Err(Error::invalid("norm_scale must be positive"));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("spectrogram has non-finite entries"));
        }
        Ok(Self {
            bins,
            n_frames,
            config,
            norm_scale,
            length,
            original_frames: n_frames,
        })
    }

    pub fn zeros(config: StftConfig, n_frames: usize, length: usize) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); config.n_bins() * n_frames],
            n_frames,
            config,
            norm_scale: 1.0,
            length,
            original_frames: n_frames,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn set_norm_scale(&mut self, s: f64) -> Result<()> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("norm_scale must be positive"));
        }
        self.norm_scale = s;
        Ok(())
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn set_length(&mut self, length: usize) {
        self.length = length;
    }

    pub fn original_frames(&self) -> usize {
        self.original_frames
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[bin * self.n_frames + frame]
    }

    /// Bins multiplied back by `norm_scale`.
    pub fn unnormalized(&self) -> Vec<Complex64> {
        self.bins.iter().map(|c| c * self.norm_scale).collect()
    }

    pub fn scale_bins(&mut self, s: f64) {
        for c in &mut self.bins {
            *c *= s;
        }
    }

    /// Frames `start..start + len` (zero beyond the end).
    pub fn frames(&self, start: usize, len: usize) -> Self {
        let f = self.n_bins();
        let mut bins = vec![Complex64::new(0.0, 0.0); f * len];
        for b in 0..f {
            for t in 0..len {
                if start + t < self.n_frames {
                    bins[b * len + t] = self.bins[b * self.n_frames + start + t];
                }
            }
        }
        Self {
            bins,
            n_frames: len,
            config: self.config,
            norm_scale: self.norm_scale,
            length: len * self.config.hop,
            original_frames: len,
        }
    }

    /// Concatenates spectrograms along time.
    pub fn concat_frames(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let f = first.n_bins();
        let total: usize = parts.iter().map(|p| p.n_frames).sum();
        let mut bins = vec![Complex64::new(0.0, 0.0); f * total];
        let mut offset = 0;
        for p in parts {
            if p.config != first.config {
                return Err(Error::invalid("spectrogram configs differ"));
            }
            for b in 0..f {
                for t in 0..p.n_frames {
                    bins[b * total + offset + t] = p.bins[b * p.n_frames + t] * p.norm_scale
                        / first.norm_scale;
                }
            }
            offset += p.n_frames;
        }
        Ok(Self {
            bins,
            n_frames: total,
            config: first.config,
            norm_scale: first.norm_scale,
            length: total * first.config.hop,
            original_frames: total,
        })
    }

    /// Real/imaginary parts as a [2, F, T] tensor.
    pub fn to_image(&self) -> Tensor {
        let n = self.bins.len();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(self.bins.iter().map(|c| c.re));
        data.extend(self.bins.iter().map(|c| c.im));
        Tensor::from_vec(&[2, self.n_bins(), self.n_frames], data)
    }

    /// Inverse of [`Self::to_image`]; framing metadata comes from `like`.
    pub fn from_image(image: &Tensor, like: &Self) -> Result<Self> {
        if image.shape() != [2, like.n_bins(), like.n_frames] {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match [2, {}, {}]",
                image.shape(),
                like.n_bins(),
                like.n_frames
            )));
        }
        let n = like.bins.len();
        let d = image.data();
        let bins = (0..n).map(|i| Complex64::new(d[i], d[n + i])).collect();
        let mut out = Self::from_parts(bins, like.n_frames, like.config, like.norm_scale, like.length)?;
        out.original_frames = like.original_frames;
        Ok(out)
    }
}

/// Index into a signal of length `n` padded by reflection on both sides.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub fn stft(audio: &AudioClip, cfg: &StftConfig) -> Result<SpectrogramComplex> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(Error::invalid("cannot analyse an empty clip"));
    }
    let x = audio.samples();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("clip contains non-finite samples"));
    }
    let peak = audio.peak();
    let norm_scale = if peak > 0.0 { peak } else { 1.0 };
    let (n_fft, hop, pad) = (cfg.n_fft, cfg.hop, cfg.pad() as isize);
    let n_frames = cfg.frames_for(x.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut bins = vec![Complex64::new(0.0, 0.0); n_bins * n_frames];
    for t in 0..n_frames {
        let start = (t * hop) as isize - pad;
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = x[reflect_index(start + n as isize, x.len())];
            *slot = Complex64::new(v * window[n] / norm_scale, 0.0);
        }
        fft.process(&mut buf);
        for (b, &value) in buf.iter().take(n_bins).enumerate() {
            bins[b * n_frames + t] = value * cfg.phase_shift(b, t);
        }
    }
    Ok(SpectrogramComplex {
        bins,
        n_frames,
        config: *cfg,
        norm_scale,
        length: x.len(),
        original_frames: n_frames,
    })
}

/// Overlap-add inverse with squared-window normalisation.
pub fn istft(spec: &SpectrogramComplex) -> Result<AudioClip> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.bins.len() != cfg.n_bins() * spec.n_frames {
        return Err(Error::invalid(
            "spectrogram bin count does not match its STFT config",
        ));
    }
    let (n_fft, hop, pad) = (cfg.n_fft, cfg.hop, cfg.pad());
    let n_bins = cfg.n_bins();
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let total = (spec.n_frames.max(1) - 1) * hop + n_fft;
    let mut out = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..spec.n_frames {
        for b in 0..n_bins {
            let v = spec.bins[b * spec.n_frames + t] * cfg.phase_shift(b, t).conj();
            buf[b] = v;
            if b > 0 && b < n_fft - b {
                buf[n_fft - b] = v.conj();
            }
        }
        // Hermitian symmetry forces DC and Nyquist to be real.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..n_fft {
            out[start + n] += buf[n].re / n_fft as f64 * window[n];
            wsum[start + n] += window[n] * window[n];
        }
    }
    let samples = (0..spec.length)
        .map(|i| {
            let j = i + pad;
            if j < total && wsum[j] > 1e-10 {
                out[j] / wsum[j] * spec.norm_scale
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::new(samples, crate::dsp::DEFAULT_SAMPLE_RATE)
}

pub enum FitMode<'a, R: Rng> {
    /// Left-aligned crop.
    Inference,
    /// Uniformly random crop offset.
    Training(&'a mut R),
}

/// Crops or right-pads to `target_frames`, remembering the original count.
pub fn fit_frames<R: Rng>(
    spec: &SpectrogramComplex,
    target_frames: usize,
    mode: FitMode<'_, R>,
) -> Result<SpectrogramComplex> {
    if target_frames == 0 {
        return Err(Error::invalid("target_frames must be positive"));
    }
    let t = spec.n_frames;
    if t == target_frames {
        return Ok(spec.clone());
    }
    let start = match mode {
        _ if t < target_frames => 0,
        FitMode::Inference => 0,
        FitMode::Training(rng) => rng.random_range(0..=t - target_frames),
    };
    let mut out = spec.frames(start, target_frames);
    out.original_frames = t;
    out.length = if t < target_frames {
        spec.length
    } else {
        target_frames * spec.config.hop
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::mono16k((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    /// Direct O(N²) DFT of explicitly padded frames, frame-local phase.
    fn reference_frames(x: &[f64], cfg: &StftConfig) -> Vec<Vec<Complex64>> {
        let pad = cfg.n_fft / 2;
        let mut padded = Vec::new();
        for i in (1..=pad).rev() {
            padded.push(x[i]);
        }
        padded.extend_from_slice(x);
        for i in 0..pad {
            padded.push(x[x.len() - 2 - i]);
        }
        let w = cfg.window();
        let mut frames = Vec::new();
        let mut start = 0;
        while start + cfg.n_fft <= padded.len() {
            let frame: Vec<Complex64> = (0..cfg.n_bins())
                .map(|k| {
                    (0..cfg.n_fft)
                        .map(|n| {
                            let ang = -2.0 * PI * (k * n) as f64 / cfg.n_fft as f64;
                            Complex64::from_polar(padded[start + n] * w[n], ang)
                        })
                        .sum()
                })
                .collect();
            frames.push(frame);
            start += cfg.hop;
        }
        frames
    }

    #[test]
    fn frame_count_for_full_scale_clip() {
        let cfg = StftConfig::full_scale();
        assert_eq!(cfg.frames_for(32640), 256);
        let x = random_clip(32640, 1);
        let spec = stft(&x, &cfg).unwrap();
        assert_eq!(spec.n_frames(), 256);
        assert_eq!(spec.n_bins(), 256);
    }

    #[test]
    fn matches_reference_frame_by_frame_dft() {
        let mut cfg = StftConfig::new(16, 4).unwrap();
        cfg.phase = PhaseReference::FrameLocal;
        let x = random_clip(50, 2);
        let spec = stft(&x, &cfg).unwrap();
        let reference = reference_frames(x.samples(), &cfg);
        assert_eq!(reference.len(), spec.n_frames());
        for (t, frame) in reference.iter().enumerate() {
            for (b, v) in frame.iter().enumerate() {
                let got = spec.get(b, t) * spec.norm_scale();
                assert!((got - v).norm() < 1e-9, "bin {b} frame {t}");
            }
        }
    }

    #[test]
    fn absolute_phase_is_frame_local_times_unit_rotation() {
        let x = random_clip(300, 3);
        let cfg = StftConfig::new(32, 8).unwrap();
        let local = StftConfig {
            phase: PhaseReference::FrameLocal,
            ..cfg
        };
        let a = stft(&x, &cfg).unwrap();
        let l = stft(&x, &local).unwrap();
        for (p, q) in a.bins().iter().zip(l.bins()) {
            assert!((p.norm() - q.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn silent_clip_gives_zero_spectrogram() {
        let x = AudioClip::zeros(16000, 16000);
        let spec = stft(&x, &StftConfig::desk()).unwrap();
        assert_eq!(spec.norm_scale(), 1.0);
        assert!(spec.bins().iter().all(|c| c.norm() == 0.0));
        let y = istft(&spec).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let cfg = StftConfig::desk();
        assert!(matches!(
            stft(&AudioClip::zeros(0, 16000), &cfg),
            Err(Error::InvalidInput(_))
        ));
        assert!(AudioClip::mono16k(vec![0.0, f64::NAN]).is_err());
        assert!(StftConfig::new(126, 128).is_err());
        assert!(StftConfig::new(0, 1).is_err());
    }

    #[test]
    fn roundtrip_both_scales() {
        for (cfg, len) in [(StftConfig::desk(), 33600), (StftConfig::full_scale(), 32640)] {
            let x = random_clip(len, 4);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(rel_l2(y.samples(), x.samples()) < 1e-10);
        }
    }

    #[test]
    fn frame_local_roundtrip() {
        let mut cfg = StftConfig::desk();
        cfg.phase = PhaseReference::FrameLocal;
        let x = random_clip(5000, 5);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert!(rel_l2(y.samples(), x.samples()) < 1e-10);
    }

    #[test]
    fn doubling_bins_doubles_output() {
        let x = random_clip(4000, 6);
        let mut spec = stft(&x, &StftConfig::desk()).unwrap();
        spec.scale_bins(2.0);
        let y = istft(&spec).unwrap();
        for (a, b) in y.samples().iter().zip(x.samples()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn unnormalized_bins_are_linear() {
        let x = random_clip(3000, 7);
        let cfg = StftConfig::desk();
        let a = stft(&x, &cfg).unwrap().unnormalized();
        let b = stft(&x.scaled(0.3), &cfg).unwrap().unnormalized();
        for (p, q) in a.iter().zip(&b) {
            assert!((p * 0.3 - q).norm() < 1e-12);
        }
    }

    /// For a bin-centred sinusoid a periodic Hann window puts 1/4 of the
    /// amplitude into each neighbour, i.e. the peak bin holds exactly 2/3 of
    /// the frame energy and the three-bin main lobe holds all of it.
    #[test]
    fn bin_centred_sinusoid_energy_concentration() {
        let oracle = {
            // DFT of the periodic Hann window alone.
            let cfg = StftConfig::desk();
            let w = cfg.window();
            let n = cfg.n_fft;
            let mag = |k: usize| -> f64 {
                let c: Complex64 = (0..n)
                    .map(|i| Complex64::from_polar(w[i], -2.0 * PI * (k * i) as f64 / n as f64))
                    .sum();
                c.norm_sqr()
            };
            mag(0) / (mag(0) + 2.0 * mag(1))
        };
        assert!((oracle - 2.0 / 3.0).abs() < 1e-12);

        let cfg = StftConfig::desk();
        let k0 = 10;
        let f = k0 as f64 * 16000.0 / cfg.n_fft as f64;
        let x = AudioClip::mono16k(
            (0..8000)
                .map(|n| (2.0 * PI * f * n as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap();
        let spec = stft(&x, &cfg).unwrap();
        for t in 5..spec.n_frames() - 5 {
            let e: Vec<f64> = (0..spec.n_bins()).map(|b| spec.get(b, t).norm_sqr()).collect();
            let total: f64 = e.iter().sum();
            let peak = (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
            assert_eq!(peak, k0);
            assert!((e[k0] / total - oracle).abs() < 1e-9);
            assert!((e[k0 - 1] + e[k0] + e[k0 + 1]) / total > 0.999_999);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::desk();
        let x = random_clip(2000, 8);
        let spec = stft(&x, &cfg).unwrap();
        let w = cfg.window();
        let pad = cfg.pad() as isize;
        for t in 0..spec.n_frames() {
            let start = (t * cfg.hop) as isize - pad;
            let time_energy: f64 = (0..cfg.n_fft)
                .map(|n| {
                    let v = x.samples()[reflect_index(start + n as isize, x.len())] * w[n];
                    v * v
                })
                .sum::<f64>()
                / (spec.norm_scale() * spec.norm_scale());
            let mut freq = 0.0;
            for b in 0..spec.n_bins() {
                let e = spec.get(b, t).norm_sqr();
                freq += if b == 0 || b == cfg.n_fft / 2 { e } else { 2.0 * e };
            }
            freq /= cfg.n_fft as f64;
            assert!((freq - time_energy).abs() <= 1e-6 * time_energy.max(1e-300));
        }
    }

    #[test]
    fn fit_frames_crop_pad_identity() {
        let cfg = StftConfig::desk();
        let spec = SpectrogramComplex::from_parts(
            (0..64 * 300).map(|i| Complex64::new(i as f64, 0.0)).collect(),
            300,
            cfg,
            1.0,
            300 * 32,
        )
        .unwrap();
        let cropped = fit_frames::<ChaCha8Rng>(&spec, 256, FitMode::Inference).unwrap();
        assert_eq!(cropped.n_frames(), 256);
        assert_eq!(cropped.original_frames(), 300);
        for b in 0..64 {
            for t in 0..256 {
                assert_eq!(cropped.get(b, t), spec.get(b, t));
            }
        }

        let short = spec.frames(0, 200);
        let padded = fit_frames::<ChaCha8Rng>(&short, 256, FitMode::Inference).unwrap();
        assert_eq!(padded.n_frames(), 256);
        assert_eq!(padded.original_frames(), 200);
        for b in 0..64 {
            for t in 200..256 {
                assert_eq!(padded.get(b, t).norm(), 0.0);
            }
        }

        let same = spec.frames(0, 256);
        assert_eq!(
            fit_frames::<ChaCha8Rng>(&same, 256, FitMode::Inference).unwrap(),
            same
        );
        assert!(fit_frames::<ChaCha8Rng>(&same, 0, FitMode::Inference).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random = fit_frames(&spec, 256, FitMode::Training(&mut rng)).unwrap();
        assert_eq!(random.n_frames(), 256);
    }

    #[test]
    fn image_roundtrip_and_shape_check() {
        let x = random_clip(3000, 9);
        let spec = stft(&x, &StftConfig::desk()).unwrap();
        let img = spec.to_image();
        assert_eq!(img.shape(), &[2, 64, spec.n_frames()]);
        assert_eq!(SpectrogramComplex::from_image(&img, &spec).unwrap(), spec);
        let bad = Tensor::zeros(&[2, 63, spec.n_frames()]);
        assert!(SpectrogramComplex::from_image(&bad, &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_random_lengths(len in 200usize..6000, seed in any::<u64>(), gain in 0.01f64..10.0) {
            let x = random_clip(len, seed).scaled(gain);
            let y = istft(&stft(&x, &StftConfig::desk()).unwrap()).unwrap();
            prop_assert_eq!(y.len(), x.len());
            prop_assert!(rel_l2(y.samples(), x.samples()) < 1e-6);
        }
    }
}
