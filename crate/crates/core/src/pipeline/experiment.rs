use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ablate, enhance_split, prepare_examples, AblationReport, AblationSpec, CorpusSection, EnhanceOptions, Models, RunConfig};
use crate::conditioner::{self, pretrain_conditioner, CondParams};
use crate::data::{synth_clean_clips, synth_corpus, Dataset, Manifest, Split, MANIFEST_FILE};
use crate::diffusion::{self, train_diffusion, DenoiserParams};
use crate::dsp::stft;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, MetricsReport};
use crate::vae::{self, train_vae, VaeParams};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
const CORPUS_STAMP: &str = "corpus.toml";

/// Stage names, in recipe order.
pub const STAGES: [&str; 7] = [
    "synth-data",
    "pretrain-cond",
    "train-vae",
    "train-diff",
    "enhance",
    "evaluate",
    "ablate",
];

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn stage_seed(master: u64, name: &str) -> u64 {
    let k = STAGES.iter().position(|s| *s == name).expect("known stage") as u64;
    master ^ ((k + 1) << 40)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log(path: &Path, values: &[f64]) -> Result<()> {
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    write(path, text)
}

/// Parameter fingerprints of the frozen upstream networks around diffusion
/// training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenCheck {
    pub vae_before: String,
    pub vae_after: String,
    pub cond_before: String,
    pub cond_after: String,
}

impl FrozenCheck {
    pub fn unchanged(&self) -> bool {
        self.vae_before == self.vae_after && self.cond_before == self.cond_after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogs {
    pub conditioner: Vec<f64>,
    pub vae: Vec<f64>,
    pub diffusion: Vec<f64>,
}

/// Everything a finished run produced, besides the files on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSummary {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub ablation: Option<AblationReport>,
    pub frozen: FrozenCheck,
    pub logs: TrainingLogs,
}

/// An experiment directory:
/// `config.snapshot`, `checkpoints/`, `enhanced/`, `reports/`, `logs/`.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Experiment {
    /// Creates `output_dir/<name>-<UTC timestamp>` after validating the
    /// config and checking the corpus is reachable.
    pub fn create(config: RunConfig) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string();
        let base = config.experiment.output_dir.join(format!("{}-{stamp}", config.experiment.name));
        let mut dir = base.clone();
        let mut k = 1;
        while dir.exists() {
            dir = PathBuf::from(format!("{}-{k}", base.display()));
            k += 1;
        }
        Self::at(&dir, config)
    }

    /// Uses `dir`, which must be new or hold a snapshot of the same config.
    pub fn at(dir: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        check_corpus(&config.corpus)?;
        let snap = dir.join(SNAPSHOT_FILE);
        if snap.is_file() {
            let old = Self::open(dir)?;
            if old.config != config {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration",
                    dir.display()
                )));
            }
            return Ok(old);
        }
        for sub in ["checkpoints", "enhanced", "reports", "logs"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write(&snap, config.to_toml())?;
        let dev = config.deviations();
        for d in &dev {
            log::info!("deviation from full-scale defaults: {d}");
        }
        let text: String = dev.iter().map(|d| format!("{d}\n")).collect();
        write(&dir.join("logs").join("deviations.txt"), text)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
        })
    }

    /// Reopens a directory from its config snapshot.
    pub fn open(dir: &Path) -> Result<Self> {
        let snap = dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config: RunConfig::from_toml(&text)?,
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, kind: &str) -> PathBuf {
        self.checkpoints().join(kind)
    }

    pub fn enhanced(&self) -> PathBuf {
        self.dir.join("enhanced")
    }

    pub fn reports(&self) -> PathBuf {
        self.dir.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.dir.join("logs")
    }

    fn seed(&self, name: &str) -> u64 {
        stage_seed(self.config.experiment.seed, name)
    }

    /// Loads the corpus manifest, synthesising the corpus first if the
    /// config asks for it and it is absent.
    pub fn synth_data(&self) -> Result<Manifest> {
        let c = &self.config.corpus;
        let manifest = c.path.join(MANIFEST_FILE);
        if manifest.is_file() {
            return Manifest::load(&manifest);
        }
        let m = synth_corpus(&c.path, &self.config.corpus_config(), c.seed)?;
        write(&c.path.join(CORPUS_STAMP), toml::to_string(c).expect("corpus section serialises"))?;
        Ok(m)
    }

    pub fn pretrain_cond(&self) -> Result<(CondParams, Vec<f64>)> {
        let c = &self.config;
        let clips = synth_clean_clips(c.conditioner.pretrain_clips, c.corpus.clip_samples, self.seed("pretrain-cond"))?;
        let (params, log) = pretrain_conditioner(&clips, &c.cond_arch(), &c.cond_train(), self.seed("pretrain-cond"))?;
        params.save(&self.checkpoint(conditioner::CHECKPOINT_KIND), &log)?;
        write_log(&self.logs().join("pretrain-cond.loss"), &log)?;
        Ok((params, log))
    }

    pub fn train_vae(&self, manifest: &Manifest) -> Result<(VaeParams, Vec<f64>)> {
        let c = &self.config;
        let stft_cfg = c.stft_config()?;
        let data = Dataset::new(manifest.clone(), Split::Train, &stft_cfg, c.vae.target_frames)?;
        let specs = (0..data.len())
            .map(|k| stft(&data.load(k)?.clean, &stft_cfg))
            .collect::<Result<Vec<_>>>()?;
        let (params, log) = train_vae(&specs, &c.vae_arch(), &c.vae_train(), self.seed("train-vae"))?;
        params.save(&self.checkpoint(vae::CHECKPOINT_KIND), &log)?;
        write_log(&self.logs().join("train-vae.loss"), &log)?;
        Ok((params, log))
    }

    /// Trains the denoiser against frozen upstream networks and checks
    /// that their parameters did not move.
    pub fn train_diff(
        &self,
        manifest: &Manifest,
        vae: &VaeParams,
        cond: &CondParams,
    ) -> Result<(DenoiserParams, Vec<f64>, FrozenCheck)> {
        let c = &self.config;
        let vae_before = vae.store.fingerprint();
        let cond_before = cond.store.fingerprint();
        let data = Dataset::new(manifest.clone(), Split::Train, &c.stft_config()?, c.vae.target_frames)?;
        let records = data.load_all()?;
        let examples = prepare_examples(&records, vae, cond, c.diffusion.chunk_stride)?;
        log::info!("diffusion training on {} latent chunks", examples.len());
        let (params, log) = train_diffusion(&examples, &c.denoiser_arch(), &c.diff_train(), self.seed("train-diff"))?;
        params.save(&self.checkpoint(diffusion::CHECKPOINT_KIND), &log)?;
        write_log(&self.logs().join("train-diff.loss"), &log)?;
        // Reload from disk so the check also covers what later stages read.
        let (vae_disk, _) = VaeParams::load(&self.checkpoint(vae::CHECKPOINT_KIND))?;
        let (cond_disk, _) = CondParams::load(&self.checkpoint(conditioner::CHECKPOINT_KIND))?;
        let check = FrozenCheck {
            vae_before,
            vae_after: vae_disk.store.fingerprint(),
            cond_before,
            cond_after: cond_disk.store.fingerprint(),
        };
        write(
            &self.logs().join("fingerprints.json"),
            serde_json::to_string_pretty(&check).expect("serialises"),
        )?;
        if !check.unchanged() || vae.store.fingerprint() != vae_disk.store.fingerprint() {
            return Err(Error::State("upstream parameters changed during diffusion training".into()));
        }
        Ok((params, log, check))
    }

    /// The fingerprints written by [`Experiment::train_diff`].
    pub fn recorded_fingerprints(&self) -> Result<FrozenCheck> {
        let path = self.logs().join("fingerprints.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn models(&self) -> Result<Models> {
        Models::load(&self.checkpoints())
    }

    pub fn enhance_options(&self) -> EnhanceOptions {
        EnhanceOptions {
            steps: self.config.sampling.steps,
            mode: super::Mode::Conditional,
            init_from_noisy: self.config.sampling.init_from_noisy,
        }
    }

    pub fn enhance_test(&self, manifest: &Manifest, models: &Models) -> Result<()> {
        let c = &self.config;
        enhance_split(
            manifest,
            Split::Test,
            models,
            &self.enhance_options(),
            c.experiment.eval_runs,
            self.seed("enhance"),
            &self.enhanced(),
        )?;
        Ok(())
    }

    pub fn evaluate(&self, manifest: &Manifest) -> Result<MetricsReport> {
        let report = evaluate_corpus(manifest, &self.enhanced(), self.config.experiment.eval_runs)?;
        report.write_csv(&self.reports().join("metrics.csv"))?;
        Ok(report)
    }

    pub fn ablation_spec(&self) -> AblationSpec {
        let c = &self.config;
        AblationSpec {
            steps: c.ablation.steps.clone(),
            modes: c.ablation.modes.clone(),
            runs: c.experiment.eval_runs,
            seed: self.seed("enhance"),
            snr_bucket_db: c.ablation.snr_bucket_db,
            init_from_noisy: c.sampling.init_from_noisy,
        }
    }

    pub fn ablate(&self, manifest: &Manifest, models: &Models) -> Result<AblationReport> {
        let report = ablate(manifest, models, &self.ablation_spec())?;
        report.write(&self.reports())?;
        Ok(report)
    }

    /// Runs every stage in order. With `resume`, stages whose checkpoint
    /// already exists are loaded instead of retrained.
    pub fn run_all(&self, resume: bool) -> Result<ExperimentSummary> {
        let mut timings = String::new();
        let mut loaded = false;
        let mut timed = |name: &str, t: Instant| {
            let line = format!("{name}: {:.1} s\n", t.elapsed().as_secs_f64());
            log::info!("stage {}", line.trim_end());
            timings.push_str(&line);
        };
        let t = Instant::now();
        let manifest = stage("synth-data", self.synth_data())?;
        timed("synth-data", t);

        let t = Instant::now();
        let cond_dir = self.checkpoint(conditioner::CHECKPOINT_KIND);
        let (cond, cond_log) = if resume && cond_dir.is_dir() {
            loaded = true;
            stage("pretrain-cond", CondParams::load(&cond_dir))?
        } else {
            stage("pretrain-cond", self.pretrain_cond())?
        };
        timed("pretrain-cond", t);

        let t = Instant::now();
        let vae_dir = self.checkpoint(vae::CHECKPOINT_KIND);
        let (vae, vae_log) = if resume && vae_dir.is_dir() {
            loaded = true;
            stage("train-vae", VaeParams::load(&vae_dir))?
        } else {
            stage("train-vae", self.train_vae(&manifest))?
        };
        timed("train-vae", t);

        let t = Instant::now();
        let diff_dir = self.checkpoint(diffusion::CHECKPOINT_KIND);
        let (diff, diff_log, frozen) = if resume && diff_dir.is_dir() {
            loaded = true;
            let (d, log) = stage("train-diff", DenoiserParams::load(&diff_dir))?;
            // Compare what is loaded now with what diffusion training saw.
            let recorded = stage("train-diff", self.recorded_fingerprints())?;
            let frozen = FrozenCheck {
                vae_after: vae.store.fingerprint(),
                cond_after: cond.store.fingerprint(),
                ..recorded
            };
            (d, log, frozen)
        } else {
            stage("train-diff", self.train_diff(&manifest, &vae, &cond))?
        };
        timed("train-diff", t);

        let models = stage("enhance", Models::new(vae, cond, diff))?;
        let t = Instant::now();
        stage("enhance", self.enhance_test(&manifest, &models))?;
        timed("enhance", t);

        let t = Instant::now();
        let report = stage("evaluate", self.evaluate(&manifest))?;
        timed("evaluate", t);
        log::info!(
            "test split: si_sdr {:.3} dB (input {:.3} dB), estoi {:.4}",
            report.aggregate.si_sdr.mean,
            report.aggregate.input_si_sdr.mean,
            report.aggregate.estoi.mean
        );

        let ablation = if self.config.ablation.enabled {
            let t = Instant::now();
            let a = stage("ablate", self.ablate(&manifest, &models))?;
            timed("ablate", t);
            Some(a)
        } else {
            None
        };
        // A resumed run keeps the timings of the run that trained the models.
        let name = if loaded { "timings-resume.txt" } else { "timings.txt" };
        write(&self.logs().join(name), timings)?;
        Ok(ExperimentSummary {
            dir: self.dir.clone(),
            report,
            ablation,
            frozen,
            logs: TrainingLogs {
                conditioner: cond_log,
                vae: vae_log,
                diffusion: diff_log,
            },
        })
    }
}

/// A corpus must either exist or be synthesisable; a synthesised corpus
/// must match the config that made it.
fn check_corpus(c: &CorpusSection) -> Result<()> {
    let manifest = c.path.join(MANIFEST_FILE);
    if !manifest.is_file() {
        if c.synthesize {
            return Ok(());
        }
        return Err(Error::Config(format!(
            "corpus manifest {} does not exist and corpus.synthesize is off",
            manifest.display()
        )));
    }
    let stamp = c.path.join(CORPUS_STAMP);
    if c.synthesize && stamp.is_file() {
        let text = fs::read_to_string(&stamp).map_err(|e| Error::io(&stamp, e))?;
        let old: CorpusSection = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut mine = c.clone();
        mine.path = old.path.clone();
        if old != mine {
            return Err(Error::Config(format!(
                "corpus at {} was synthesised with different settings",
                c.path.display()
            )));
        }
    }
    Ok(())
}

/// Loads a config file and runs the whole recipe in a fresh timestamped
/// directory.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentSummary> {
    let cfg = RunConfig::load(config_path)?;
    let exp = Experiment::create(cfg)?;
    log::info!("experiment directory {}", exp.dir.display());
    exp.run_all(false)
}
