use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use specdiff_core::data::{synth_corpus, Manifest, MANIFEST_FILE};
use specdiff_core::dsp::{read_wav, write_wav};
use specdiff_core::metrics::evaluate_corpus;
use specdiff_core::pipeline::{ablate, enhance, AblationSpec, EnhanceOptions, Experiment, Mode, Models, RunConfig};

#[derive(Parser)]
#[command(name = "specdiff", version, about = "Latent diffusion speech enhancement")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExpArgs {
    /// Run configuration; the full-scale defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment directory, created on first use.
    #[arg(long)]
    exp: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic mixture corpus and its manifest.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to corpus.path of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the conditioner on clean synthetic speech.
    PretrainCond(ExpArgs),
    /// Train the spectrogram VAE on clean training clips.
    TrainVae(ExpArgs),
    /// Train the denoiser against the frozen VAE and conditioner.
    TrainDiff(ExpArgs),
    /// Enhance one WAV file.
    Enhance {
        /// Directory holding the vae, conditioner and diffusion checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cond")]
        mode: Mode,
        #[arg(long)]
        init_from_noisy: bool,
    },
    /// Score enhanced clips of the test split against the references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        enhanced_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Number of `run_<r>` subdirectories to score.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Sweep reverse-step counts and conditioning modes on the test split.
    Ablate {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,6,12,25,50")]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "cond,uncond")]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value_t = 5.0)]
        snr_bucket_db: f64,
        /// Directory for ablation.csv and ablation_snr.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole recipe in a fresh timestamped directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue in an existing experiment directory, reusing checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn open_exp(args: &ExpArgs) -> Result<Experiment> {
    if args.config.is_none() && args.exp.join(specdiff_core::pipeline::SNAPSHOT_FILE).is_file() {
        return Ok(Experiment::open(&args.exp)?);
    }
    let cfg = load_config(args.config.as_deref())?;
    Ok(Experiment::at(&args.exp, cfg)?)
}

fn manifest_of(exp: &Experiment) -> Result<Manifest> {
    let path = exp.config.corpus.path.join(MANIFEST_FILE);
    Manifest::load(&path).with_context(|| format!("reading manifest {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out.unwrap_or(cfg.corpus.path.clone());
            let m = synth_corpus(&dir, &cfg.corpus_config(), cfg.corpus.seed).context("synth-data")?;
            println!("{} records in {}", m.records.len(), dir.display());
        }
        Command::PretrainCond(args) => {
            let exp = open_exp(&args)?;
            let (_, log) = exp.pretrain_cond().context("pretrain-cond")?;
            println!("conditioner final loss {:.6}", log.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainVae(args) => {
            let exp = open_exp(&args)?;
            let m = manifest_of(&exp).context("train-vae")?;
            let (_, log) = exp.train_vae(&m).context("train-vae")?;
            println!("vae final loss {:.6}", log.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainDiff(args) => {
            let exp = open_exp(&args)?;
            let m = manifest_of(&exp).context("train-diff")?;
            let load = || -> specdiff_core::Result<_> {
                let (vae, _) = specdiff_core::VaeParams::load(&exp.checkpoint("vae"))?;
                let (cond, _) = specdiff_core::CondParams::load(&exp.checkpoint("conditioner"))?;
                Ok((vae, cond))
            };
            let (vae, cond) = load().context("train-diff: loading upstream checkpoints")?;
            let (_, log, frozen) = exp.train_diff(&m, &vae, &cond).context("train-diff")?;
            println!(
                "denoiser final loss {:.6}; upstream unchanged: {}",
                log.last().copied().unwrap_or(f64::NAN),
                frozen.unchanged()
            );
        }
        Command::Enhance {
            checkpoints,
            input,
            out,
            steps,
            seed,
            mode,
            init_from_noisy,
        } => {
            let models = Models::load(&checkpoints).context("enhance: loading checkpoints")?;
            let noisy = read_wav(&input).with_context(|| format!("enhance: reading {}", input.display()))?;
            let opts = EnhanceOptions {
                steps,
                mode,
                init_from_noisy,
            };
            let y = enhance(&noisy, &models, &opts, seed).context("enhance")?;
            write_wav(&out, &y).with_context(|| format!("enhance: writing {}", out.display()))?;
        }
        Command::Evaluate {
            manifest,
            enhanced_dir,
            report,
            runs,
        } => {
            let m = Manifest::load(&manifest).context("evaluate: reading manifest")?;
            let rep = evaluate_corpus(&m, &enhanced_dir, runs).context("evaluate")?;
            rep.write_csv(&report).context("evaluate: writing report")?;
            let a = &rep.aggregate;
            println!(
                "si_sdr {:.3} dB (input {:.3} dB), estoi {:.4} (input {:.4})",
                a.si_sdr.mean, a.input_si_sdr.mean, a.estoi.mean, a.input_estoi.mean
            );
        }
        Command::Ablate {
            checkpoints,
            manifest,
            steps,
            modes,
            seed,
            runs,
            snr_bucket_db,
            out,
        } => {
            let models = Models::load(&checkpoints).context("ablate: loading checkpoints")?;
            let m = Manifest::load(&manifest).context("ablate: reading manifest")?;
            let spec = AblationSpec {
                steps,
                modes,
                runs,
                seed,
                snr_bucket_db,
                init_from_noisy: false,
            };
            let rep = ablate(&m, &models, &spec).context("ablate")?;
            rep.write(&out).context("ablate: writing reports")?;
            print!("{}", rep.grid_csv());
        }
        Command::Run { config, resume } => {
            let cfg = load_config(Some(&config))?;
            let exp = match resume {
                Some(dir) => Experiment::at(&dir, cfg)?,
                None => Experiment::create(cfg)?,
            };
            log::info!("experiment directory {}", exp.dir.display());
            let summary = exp.run_all(true)?;
            let a = &summary.report.aggregate;
            println!("{}", summary.dir.display());
            println!(
                "si_sdr {:.3} dB (input {:.3} dB), estoi {:.4} (input {:.4})",
                a.si_sdr.mean, a.input_si_sdr.mean, a.estoi.mean, a.input_estoi.mean
            );
            if !summary.frozen.unchanged() {
                bail!("upstream parameters changed during diffusion training");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
