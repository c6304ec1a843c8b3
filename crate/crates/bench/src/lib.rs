//! Shared inputs for the benchmarks: desk-sized models with random
//! weights and a synthetic noisy clip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specdiff_core::conditioner::{CondArch, CondParams};
use specdiff_core::data::{mix_at_snr, synth_noise, synth_speech, NoiseKind};
use specdiff_core::diffusion::{DenoiserArch, DenoiserParams};
use specdiff_core::dsp::AudioClip;
use specdiff_core::pipeline::Models;
use specdiff_core::vae::{VaeArch, VaeParams};

pub const SAMPLE_RATE: u32 = 16_000;

/// Two seconds of synthetic speech in pink noise at 5 dB.
pub fn noisy_clip(seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 2 * SAMPLE_RATE as usize;
    let clean = AudioClip::mono16k(synth_speech(len, SAMPLE_RATE, &mut rng)).unwrap();
    let noise = AudioClip::mono16k(synth_noise(NoiseKind::Pink, len, SAMPLE_RATE, &mut rng)).unwrap();
    mix_at_snr(&clean, &noise, 5.0).unwrap().noisy
}

/// Frozen desk-architecture models. Weights are untrained, which does not
/// change the cost of a forward pass.
pub fn desk_models(seed: u64) -> Models {
    let mut vae = VaeParams::init(VaeArch::desk(), seed).unwrap();
    vae.store.freeze();
    let cond_arch = CondArch::desk();
    let dim = cond_arch.dim;
    let mut cond = CondParams::init(cond_arch, seed + 1).unwrap();
    cond.store.freeze();
    let arch = DenoiserArch::desk(VaeArch::desk().latent_shape(), dim);
    let mut diff = DenoiserParams::init(arch, seed + 2).unwrap();
    diff.store.freeze();
    Models::new(vae, cond, diff).unwrap()
}
