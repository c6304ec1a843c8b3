//! End-to-end acceptance checks. Every test prints one `PASS`/`FAIL` line
//! and then asserts the same verdict.
//!
//! The desk-scale recipe behind criteria 6, 7 and 9 trains in an
//! experiment directory under the cargo target dir and is reused by later
//! runs. `SPECDIFF_DESK_RUN` points the suite at another finished
//! experiment directory, for example one made by `specdiff run`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdiff_core::conditioner::{Condition, FeatureSource};
use specdiff_core::data::{synth_noise, synth_speech, NoiseKind, SnrSpec};
use specdiff_core::diffusion::{
    ddim_sample, diffusion_gradient_check, make_schedule, CondInput, DenoiserArch, DenoiserParams,
    NoiseSchedule, SamplerPlan, ScheduleKind,
};
use specdiff_core::dsp::{istft, read_wav, stft, AudioClip, StftConfig};
use specdiff_core::metrics::{decompose, estoi, si_sdr};
use specdiff_core::nn::Tensor;
use specdiff_core::pipeline::{Experiment, ExperimentSummary, Mode, RunConfig};
use specdiff_core::vae::{elbo_gradient_check, kl_gaussian, GaussianPosterior, VaeArch, VaeParams};
use specdiff_core::LatentMap;

// Written to the stderr handle directly so the line shows up without
// `--nocapture`; the test harness only captures the print macros.
fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {id} {}: {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn c1_stft_roundtrip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let x: Vec<f64> = (0..32_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::mono16k(x).unwrap();
        let cfg = if i % 2 == 0 { StftConfig::full_scale() } else { StftConfig::desk() };
        let y = istft(&stft(&clip, &cfg).unwrap()).unwrap();
        worst = worst.max(rel_l2(y.samples(), clip.samples()));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "stft roundtrip",
        worst < 1e-6 && secs < 30.0,
        &format!("worst rel-L2 {worst:.2e} over 100 clips of 2 s (< 1e-6), {secs:.2} s (< 30 s)"),
    );
}

/// Closed-form ε-prediction for z0 ~ N(m, s²) under the VP forward map.
fn gaussian_denoiser(m: f64, s: f64, sched: &NoiseSchedule) -> impl FnMut(&Tensor, usize) -> specdiff_core::Result<Tensor> + '_ {
    move |z, t| {
        let a = sched.alpha_bar(t);
        let var = a * s * s + 1.0 - a;
        Ok(z.map(|v| (1.0 - a).sqrt() * (v - a.sqrt() * m) / var))
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn c2_analytic_oracle_sampler() {
    let sched = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
    let (m, s) = (1.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Tensor::randn(&[10_000, 1, 1, 1], &mut rng);
    let mut ok = true;
    let mut detail = Vec::new();
    for (steps, mean_tol, std_tol) in [(50, 0.05, 0.10), (6, 0.1, 0.20)] {
        let plan = SamplerPlan::uniform_sqrt_alpha(steps, &sched).unwrap();
        let out = ddim_sample(gaussian_denoiser(m, s, &sched), start.clone(), &plan, &sched).unwrap();
        let (mean, std) = moments(out.data());
        let (dm, ds) = ((mean - m).abs(), (std / s - 1.0).abs());
        ok &= dm <= mean_tol && ds <= std_tol;
        detail.push(format!(
            "{steps} steps |mean-m| {dm:.4} (<= {mean_tol}), |std/s-1| {ds:.4} (<= {std_tol})"
        ));
    }
    let target = -0.37;
    let plan = SamplerPlan::uniform_sqrt_alpha(1, &sched).unwrap();
    let out = ddim_sample(gaussian_denoiser(target, 0.0, &sched), start, &plan, &sched).unwrap();
    let err = out.data().iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
    ok &= err <= 1e-10;
    detail.push(format!("point mass max error {err:.1e} (<= 1e-10)"));
    verdict(2, "analytic-oracle sampler", ok, &detail.join("; "));
}

#[test]
fn c3_gradient_checks() {
    let vae = VaeParams::init(
        VaeArch {
            n_bins: 8,
            n_frames: 8,
            width: 2,
            hidden: 3,
            latent_channels: 1,
            input_scale: 1.7,
        },
        3,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[2, 2, 8, 8], &mut rng);
    let eps = Tensor::randn(&[2, 1, 2, 2], &mut rng);
    let v = elbo_gradient_check(&vae, &x, &eps, 0.5, 1e-6).unwrap();

    let arch = DenoiserArch {
        latent_shape: [1, 4, 3],
        aux_channels: 1,
        cond_dim: 2,
        width: 4,
        time_dim: 4,
        blocks: 1,
        schedule: ScheduleKind::LinearBeta,
        t_train: 50,
        latent_scale: 1.3,
    };
    let mut den = DenoiserParams::init(arch, 4).unwrap();
    // Zero-initialised layers would hide whole gradient paths.
    let names: Vec<String> = den.store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        for p in den.store.tensor_mut(&n).unwrap().data_mut() {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let z0 = LatentMap::new(Tensor::randn(&[2, 1, 4, 3], &mut rng)).unwrap();
    let aux = LatentMap::new(Tensor::randn(&[2, 1, 4, 3], &mut rng)).unwrap();
    let noise = Tensor::randn(&[2, 1, 4, 3], &mut rng);
    let c = Condition::new(3, 2, Tensor::randn(&[6], &mut rng).into_data(), FeatureSource::Internal).unwrap();
    let d = diffusion_gradient_check(
        &den,
        &z0,
        &[7, 31],
        &[CondInput::Features(&c), CondInput::Null],
        &noise,
        Some(&aux),
        1e-6,
    )
    .unwrap();
    let sizes = (vae.store.num_scalars(), den.store.num_scalars());
    verdict(
        3,
        "gradient checks",
        v.passes(1e-4) && d.passes(1e-4) && sizes.0 <= 1000 && sizes.1 <= 1000,
        &format!(
            "elbo max rel {:.2e} (max abs {:.1e}) over {} params, diffusion max rel {:.2e} (max abs {:.1e}) over {} params (<= 1e-4 above a 1e-6 floor)",
            v.max_rel_error, v.max_abs_error, sizes.0, d.max_rel_error, d.max_abs_error, sizes.1
        ),
    );
}

#[test]
fn c4_kl_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [1, 1, 2, 4];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..8).map(|_| rng.random_range(0.3..2.0)).collect();
        let post = GaussianPosterior::new(Tensor::from_vec(&shape, mu.clone()), Tensor::from_vec(&shape, sigma.clone())).unwrap();
        let exact = kl_gaussian(&post).unwrap();
        // E_q[log q − log p] with antithetic pairs, 10⁵ draws per element.
        let mut acc = 0.0;
        for _ in 0..50_000 {
            for (m, s) in mu.iter().zip(&sigma) {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                for e in [e, -e] {
                    let z = m + s * e;
                    acc += -0.5 * e * e - s.ln() + 0.5 * z * z;
                }
            }
        }
        let mc = acc / (100_000.0 * 8.0);
        worst = worst.max((exact - mc).abs() / exact);
    }
    verdict(4, "kl oracle", worst <= 0.01, &format!("worst relative gap {worst:.4} over 20 posteriors (<= 0.01)"));
}

#[test]
fn c5_metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let speech = AudioClip::mono16k(synth_speech(32_000, 16_000, &mut rng)).unwrap();
    let noise = AudioClip::mono16k(synth_noise(NoiseKind::Pink, 32_000, 16_000, &mut rng)).unwrap();
    let mixed: Vec<f64> = speech.samples().iter().zip(noise.samples()).map(|(s, n)| s + 0.3 * n).collect();
    let mixed = AudioClip::mono16k(mixed).unwrap();

    let base = si_sdr(&speech, &mixed).unwrap();
    let scaled = si_sdr(&speech, &mixed.scaled(-3.7)).unwrap();
    let scale_gap = (base - scaled).abs();

    // Remove the reference direction from the noise, then compare with
    // the plain power ratio.
    let r = speech.samples();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj: f64 = noise.samples().iter().zip(r).map(|(n, s)| n * s).sum::<f64>() / rr;
    let orth: Vec<f64> = noise.samples().iter().zip(r).map(|(n, s)| 0.3 * (n - proj * s)).collect();
    let est = AudioClip::mono16k(r.iter().zip(&orth).map(|(s, n)| s + n).collect()).unwrap();
    let pn: f64 = orth.iter().map(|v| v * v).sum();
    let orth_gap = (si_sdr(&speech, &est).unwrap() - 10.0 * (rr / pn).log10()).abs();

    let self_estoi = estoi(&speech, &speech).unwrap();

    let orth_noise = AudioClip::mono16k(orth).unwrap();
    let arbitrary = AudioClip::mono16k((0..32_000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let d = decompose(&speech, &orth_noise, &arbitrary).unwrap();
    let (t, i, a) = d.energies();
    let total: f64 = arbitrary.samples().iter().map(|v| v * v).sum();
    let energy_gap = ((t + i + a) - total).abs() / total;
    let sum_gap = (0..32_000)
        .map(|k| (d.target[k] + d.interference[k] + d.artifacts[k] - arbitrary.samples()[k]).abs())
        .fold(0.0, f64::max)
        / arbitrary.peak();

    verdict(
        5,
        "metric properties",
        scale_gap <= 1e-9 && orth_gap <= 1e-9 && (self_estoi - 1.0).abs() <= 1e-6 && energy_gap <= 1e-9 && sum_gap <= 1e-9,
        &format!(
            "scale gap {scale_gap:.1e} dB, orthogonal-noise gap {orth_gap:.1e} dB, estoi(x,x) {self_estoi:.9}, \
             energy gap {energy_gap:.1e}, component sum gap {sum_gap:.1e}"
        ),
    );
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct DeskRun {
    summary: ExperimentSummary,
    /// Seconds spent by the run that trained the models.
    train_secs: Option<f64>,
}

fn recorded_secs(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join("logs/timings.txt")).ok()?;
    text.lines()
        .map(|l| l.rsplit_once(": ")?.1.trim_end_matches(" s").parse::<f64>().ok())
        .sum()
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let exp = match std::env::var_os("SPECDIFF_DESK_RUN") {
            Some(dir) => Experiment::open(Path::new(&dir)).unwrap(),
            None => {
                let mut cfg = RunConfig::load(&workspace().join("configs/desk.toml")).unwrap();
                let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
                cfg.corpus.path = root.join("desk-corpus");
                cfg.experiment.output_dir = root.clone();
                Experiment::at(&root.join("desk-run"), cfg).unwrap()
            }
        };
        let summary = exp.run_all(true).unwrap();
        DeskRun {
            train_secs: recorded_secs(&exp.dir),
            summary,
        }
    })
}

#[test]
fn c6_end_to_end_enhancement() {
    let run = desk_run();
    let a = &run.summary.report.aggregate;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let gain = a.si_sdr.mean - a.input_si_sdr.mean;
    let estoi_gain = a.estoi.mean - a.input_estoi.mean;
    let mut ok = gain >= 3.0 && estoi_gain > 0.0;
    let time = match run.train_secs {
        Some(s) if cores >= 4 => {
            ok &= s < 1800.0;
            format!("recipe {s:.0} s on {cores} cores (< 1800 s)")
        }
        Some(s) => format!("recipe {s:.0} s on {cores} core(s); the 30 min budget is stated for 4 cores"),
        None => "recipe time not recorded".into(),
    };
    verdict(
        6,
        "end-to-end enhancement",
        ok,
        &format!(
            "si-sdr {:.2} dB vs noisy {:.2} dB (gain {gain:.2} >= 3), estoi {:.4} vs noisy {:.4}; {time}",
            a.si_sdr.mean, a.input_si_sdr.mean, a.estoi.mean, a.input_estoi.mean
        ),
    );
}

#[test]
fn c7_step_and_condition_ordering() {
    let run = desk_run();
    let ab = run.summary.ablation.as_ref().expect("desk recipe runs the ablation");
    let score = |steps, mode| ab.cell(steps, mode).expect("ablation cell").report.aggregate.si_sdr.mean;
    let (c6, u6) = (score(6, Mode::Conditional), score(6, Mode::Unconditional));
    let (u50, u2) = (score(50, Mode::Unconditional), score(2, Mode::Unconditional));
    let c50 = score(50, Mode::Conditional);
    verdict(
        7,
        "step and condition ordering",
        c6 >= u6 && u50 > u2 && (c6 - c50).abs() <= 1.5,
        &format!(
            "cond@6 {c6:.2} >= uncond@6 {u6:.2}; uncond@50 {u50:.2} > uncond@2 {u2:.2}; |cond@6 - cond@50| {:.2} <= 1.5 dB",
            (c6 - c50).abs()
        ),
    );
}

/// A complete recipe small enough to run twice in a few seconds.
fn mini_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.experiment.name = "mini".into();
    c.experiment.output_dir = root.to_path_buf();
    c.experiment.eval_runs = 2;
    c.stft.n_fft = 14;
    c.stft.hop = 4;
    c.corpus.path = root.join("corpus");
    c.corpus.num_train = 4;
    c.corpus.num_valid = 0;
    c.corpus.num_test = 2;
    c.corpus.clip_samples = 16000;
    c.corpus.noise_samples = 12000;
    c.corpus.snr = SnrSpec::Set(vec![0.0, 10.0]);
    c.conditioner.n_mels = 4;
    c.conditioner.dim = 3;
    c.conditioner.pretrain_clips = 4;
    c.conditioner.epochs = 2;
    c.conditioner.batch_size = 2;
    c.conditioner.crop_frames = 16;
    c.vae.target_frames = 8;
    c.vae.width = 2;
    c.vae.hidden = 3;
    c.vae.latent_channels = 1;
    c.vae.epochs = 2;
    c.vae.batch_size = 2;
    c.vae.crops_per_clip = 1;
    c.diffusion.width = 4;
    c.diffusion.time_dim = 4;
    c.diffusion.blocks = 1;
    c.diffusion.chunk_stride = 8;
    c.diffusion.steps = 6;
    c.diffusion.batch_size = 2;
    c.ablation.steps = vec![2];
    c
}

#[test]
fn c8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |k: &str| {
        let root = tmp.path().join(k);
        let exp = Experiment::at(&root.join("exp"), mini_config(&root)).unwrap();
        let s = exp.run_all(false).unwrap();
        (exp, s)
    };
    let (ea, a) = run("a");
    let (eb, b) = run("b");
    let max_gap = |x: &[f64], y: &[f64]| -> f64 {
        if x.len() != y.len() {
            return f64::INFINITY;
        }
        x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let loss_gap = [
        max_gap(&a.logs.conditioner, &b.logs.conditioner),
        max_gap(&a.logs.vae, &b.logs.vae),
        max_gap(&a.logs.diffusion, &b.logs.diffusion),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let agg = |s: &ExperimentSummary| {
        let g = &s.report.aggregate;
        let mut v = vec![g.si_sdr.mean, g.si_sir.mean, g.si_sar.mean, g.estoi.mean];
        for cell in &s.ablation.as_ref().unwrap().cells {
            v.push(cell.report.aggregate.si_sdr.mean);
        }
        v
    };
    let metric_gap = max_gap(&agg(&a), &agg(&b));
    let mut wav_gap: f64 = 0.0;
    let mut files = 0;
    for run in 0..2 {
        for entry in fs::read_dir(ea.enhanced().join(format!("run_{run}"))).unwrap() {
            let p = entry.unwrap().path();
            let other = eb.enhanced().join(format!("run_{run}")).join(p.file_name().unwrap());
            let (x, y) = (read_wav(&p).unwrap(), read_wav(&other).unwrap());
            wav_gap = wav_gap.max(max_gap(x.samples(), y.samples()));
            files += 1;
        }
    }
    verdict(
        8,
        "determinism",
        loss_gap <= 1e-6 && metric_gap <= 1e-6 && wav_gap <= 1e-7 && files == 4,
        &format!("loss gap {loss_gap:.1e}, metric gap {metric_gap:.1e}, waveform gap {wav_gap:.1e} over {files} files"),
    );
}

#[test]
fn c9_frozen_upstream_modules() {
    let run = desk_run();
    let f = &run.summary.frozen;
    verdict(
        9,
        "frozen upstream modules",
        f.unchanged(),
        &format!(
            "vae {} -> {}, conditioner {} -> {}",
            &f.vae_before[..12],
            &f.vae_after[..12],
            &f.cond_before[..12],
            &f.cond_after[..12]
        ),
    );
}
