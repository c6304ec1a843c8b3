use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specdiff_core::conditioner::{CondArch, CondParams};
use specdiff_core::data::{synth_corpus, CorpusConfig, Manifest, SnrSpec, Split};
use specdiff_core::diffusion::{DenoiserArch, DenoiserParams, ScheduleKind};
use specdiff_core::dsp::{read_wav, AudioClip, StftConfig};
use specdiff_core::nn::Tensor;
use specdiff_core::pipeline::{
    ablate, enhance, enhance_split, AblationSpec, EnhanceOptions, Experiment, Mode, Models, RunConfig,
};
use specdiff_core::vae::{VaeArch, VaeParams};
use specdiff_core::Error;

fn tiny_vae() -> VaeArch {
    VaeArch {
        n_bins: 8,
        n_frames: 8,
        width: 2,
        hidden: 3,
        latent_channels: 1,
        input_scale: 1.0,
    }
}

fn tiny_cond() -> CondArch {
    CondArch {
        stft: StftConfig::new(14, 4).unwrap(),
        n_mels: 4,
        dim: 3,
        kernel: 3,
        pool: 4,
    }
}

fn tiny_denoiser() -> DenoiserArch {
    DenoiserArch {
        latent_shape: [1, 2, 2],
        aux_channels: 1,
        cond_dim: 3,
        width: 4,
        time_dim: 4,
        blocks: 1,
        schedule: ScheduleKind::LinearBeta,
        t_train: 50,
        latent_scale: 1.0,
    }
}

/// Randomly initialised, frozen models. The zero-initialised denoiser
/// layers get random weights so every input path reaches the output.
fn tiny_models(seed: u64) -> Models {
    let mut vae = VaeParams::init(tiny_vae(), seed).unwrap();
    vae.store.freeze();
    let mut cond = CondParams::init(tiny_cond(), seed + 1).unwrap();
    cond.store.freeze();
    let mut diff = DenoiserParams::init(tiny_denoiser(), seed + 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let names: Vec<String> = diff.store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = diff.store.tensor_mut(&n).unwrap();
        let r = Tensor::randn(t.shape(), &mut rng);
        for (v, e) in t.data_mut().iter_mut().zip(r.data()) {
            *v += 0.3 * e;
        }
    }
    diff.store.freeze();
    Models::new(vae, cond, diff).unwrap()
}

fn noisy_clip(len: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(&[len], &mut rng);
    let v = (0..len)
        .map(|n| 0.5 * (0.07 * n as f64).sin() + 0.05 * noise.data()[n])
        .collect();
    AudioClip::mono16k(v).unwrap()
}

#[test]
fn enhance_is_deterministic_and_keeps_length() {
    let models = tiny_models(1);
    let opts = EnhanceOptions::new(3);
    for len in [100, 257, 400] {
        let x = noisy_clip(len, len as u64);
        let a = enhance(&x, &models, &opts, 7).unwrap();
        let b = enhance(&x, &models, &opts, 7).unwrap();
        assert_eq!(a.len(), len);
        assert_eq!(a.samples(), b.samples());
        assert!(a.samples().iter().all(|v| v.is_finite()));
        let c = enhance(&x, &models, &opts, 8).unwrap();
        assert_ne!(a.samples(), c.samples());
    }
}

#[test]
fn modes_and_steps_change_the_output() {
    let models = tiny_models(2);
    let x = noisy_clip(300, 3);
    let cond = enhance(&x, &models, &EnhanceOptions::new(2), 1).unwrap();
    let uncond = enhance(
        &x,
        &models,
        &EnhanceOptions {
            mode: Mode::Unconditional,
            ..EnhanceOptions::new(2)
        },
        1,
    )
    .unwrap();
    assert_ne!(cond.samples(), uncond.samples());
    let more = enhance(&x, &models, &EnhanceOptions::new(5), 1).unwrap();
    assert_ne!(cond.samples(), more.samples());
    assert!(matches!(enhance(&x, &models, &EnhanceOptions::new(0), 1), Err(Error::Config(_))));
}

#[test]
fn incompatible_checkpoints_name_the_dimension() {
    let m = tiny_models(3);
    let mut arch = tiny_denoiser();
    arch.cond_dim = 5;
    let mut diff = DenoiserParams::init(arch, 0).unwrap();
    diff.store.freeze();
    match Models::new(m.vae.clone(), m.cond.clone(), diff) {
        Err(Error::Config(msg)) => assert!(msg.contains("condition dim"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    let mut arch = tiny_denoiser();
    arch.latent_shape = [2, 2, 2];
    let mut diff = DenoiserParams::init(arch, 0).unwrap();
    diff.store.freeze();
    match Models::new(m.vae.clone(), m.cond.clone(), diff) {
        Err(Error::Config(msg)) => assert!(msg.contains("latent shape"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    let mut cond = CondParams::init(
        CondArch {
            stft: StftConfig::new(30, 4).unwrap(),
            ..tiny_cond()
        },
        0,
    )
    .unwrap();
    cond.store.freeze();
    match Models::new(m.vae.clone(), cond, m.diff.clone()) {
        Err(Error::Config(msg)) => assert!(msg.contains("frequency bins"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    let unfrozen = VaeParams::init(tiny_vae(), 0).unwrap();
    assert!(matches!(
        Models::new(unfrozen, m.cond.clone(), m.diff.clone()),
        Err(Error::State(_))
    ));
}

#[test]
fn checkpoints_roundtrip_through_models_load() {
    let m = tiny_models(4);
    let dir = tempfile::tempdir().unwrap();
    m.vae.save(&dir.path().join("vae"), &[]).unwrap();
    m.cond.save(&dir.path().join("conditioner"), &[]).unwrap();
    m.diff.save(&dir.path().join("diffusion"), &[]).unwrap();
    let loaded = Models::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    assert!(Models::load(&dir.path().join("nowhere")).is_err());
}

fn tiny_corpus(dir: &Path) -> Manifest {
    let cfg = CorpusConfig {
        num_train: 1,
        num_valid: 0,
        num_test: 3,
        clip_samples: 16000,
        noise_samples: 4000,
        snr: SnrSpec::Set(vec![0.0, 10.0]),
        ..CorpusConfig::default()
    };
    synth_corpus(dir, &cfg, 5).unwrap()
}

#[test]
fn ablation_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(dir.path());
    let models = tiny_models(5);
    let spec = AblationSpec {
        steps: vec![6],
        modes: vec![Mode::Conditional, Mode::Unconditional],
        runs: 1,
        seed: 0,
        snr_bucket_db: 5.0,
        init_from_noisy: false,
    };
    let rep = ablate(&manifest, &models, &spec).unwrap();
    let grid = rep.grid_csv();
    assert_eq!(grid.lines().count(), 3);
    assert!(grid.lines().nth(1).unwrap().starts_with("6,conditional,3,"));
    assert!(grid.lines().nth(2).unwrap().starts_with("6,unconditional,3,"));
    for cell in &rep.cells {
        let n: usize = cell.buckets.iter().map(|b| b.clips).sum();
        assert_eq!(n, 3);
        assert!(cell.buckets.iter().all(|b| b.lo == 0.0 || b.lo == 10.0));
    }
    rep.write(&dir.path().join("reports")).unwrap();
    assert!(dir.path().join("reports/ablation_snr.csv").is_file());
}

#[test]
fn enhance_split_writes_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(&dir.path().join("corpus"));
    let models = tiny_models(6);
    let out = dir.path().join("enhanced");
    let paths = enhance_split(&manifest, Split::Test, &models, &EnhanceOptions::new(2), 2, 9, &out).unwrap();
    assert_eq!(paths.len(), 6);
    let a = read_wav(&out.join("run_0/test_0000.wav")).unwrap();
    let b = read_wav(&out.join("run_1/test_0000.wav")).unwrap();
    assert_eq!(a.len(), 16000);
    assert_ne!(a.samples(), b.samples());
}

#[test]
fn missing_corpus_is_a_config_error_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.corpus.path = dir.path().join("absent");
    cfg.corpus.synthesize = false;
    let exp_dir = dir.path().join("exp");
    match Experiment::at(&exp_dir, cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("manifest"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!exp_dir.exists());
}

#[test]
fn experiment_dir_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.corpus.path = dir.path().join("corpus");
    let exp_dir = dir.path().join("exp");
    Experiment::at(&exp_dir, cfg.clone()).unwrap();
    for sub in ["config.snapshot", "checkpoints", "enhanced", "reports", "logs/deviations.txt"] {
        assert!(exp_dir.join(sub).exists(), "{sub}");
    }
    let dev = fs::read_to_string(exp_dir.join("logs/deviations.txt")).unwrap();
    assert!(dev.contains("stft.n_fft: 510 -> 126"), "{dev}");
    assert!(Experiment::at(&exp_dir, cfg.clone()).is_ok());
    cfg.sampling.steps = 12;
    assert!(matches!(Experiment::at(&exp_dir, cfg), Err(Error::Config(_))));
}

#[test]
fn shipped_desk_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut file = RunConfig::load(&path).unwrap();
    let preset = RunConfig::desk();
    assert!(file.corpus.path.ends_with("data/desk-corpus"));
    assert!(file.experiment.output_dir.ends_with("runs"));
    file.corpus.path = preset.corpus.path.clone();
    file.experiment.output_dir = preset.experiment.output_dir.clone();
    assert_eq!(file, preset);
}
