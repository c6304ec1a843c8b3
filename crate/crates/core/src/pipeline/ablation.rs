use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{clip_seed, enhance, EnhanceOptions, Mode, Models};
use crate::data::{Dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{score_clip, Aggregate, ClipScores, MetricsReport};

pub const GRID_HEADER: &str = "steps,mode,clips,input_si_sdr,si_sdr,si_sdr_std,si_sir,si_sar,input_estoi,estoi,estoi_std";
pub const BUCKET_HEADER: &str = "steps,mode,snr_lo,snr_hi,clips,input_si_sdr,si_sdr,si_sir,si_sar,estoi";

/// Aggregate scores of the clips whose SNR falls in `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrBucket {
    pub lo: f64,
    pub hi: f64,
    pub clips: usize,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub steps: usize,
    pub mode: Mode,
    pub report: MetricsReport,
    pub buckets: Vec<SnrBucket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, steps: usize, mode: Mode) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.steps == steps && c.mode == mode)
    }

    /// One row of aggregate means per (steps, mode) cell.
    pub fn grid_csv(&self) -> String {
        let mut out = format!("{GRID_HEADER}\n");
        for c in &self.cells {
            let a = &c.report.aggregate;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.steps,
                c.mode,
                c.report.rows.len(),
                a.input_si_sdr.mean,
                a.si_sdr.mean,
                a.si_sdr.std,
                a.si_sir.mean,
                a.si_sar.mean,
                a.input_estoi.mean,
                a.estoi.mean,
                a.estoi.std
            )
            .unwrap();
        }
        out
    }

    pub fn bucket_csv(&self) -> String {
        let mut out = format!("{BUCKET_HEADER}\n");
        for c in &self.cells {
            for b in &c.buckets {
                let a = &b.aggregate;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    c.steps,
                    c.mode,
                    b.lo,
                    b.hi,
                    b.clips,
                    a.input_si_sdr.mean,
                    a.si_sdr.mean,
                    a.si_sir.mean,
                    a.si_sar.mean,
                    a.estoi.mean
                )
                .unwrap();
            }
        }
        out
    }

    /// Writes `ablation.csv` and `ablation_snr.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("ablation.csv", self.grid_csv()), ("ablation_snr.csv", self.bucket_csv())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn buckets(rows: &[ClipScores], width: f64) -> Vec<SnrBucket> {
    let key = |snr: f64| (snr / width).floor() as i64;
    let mut keys: Vec<i64> = rows.iter().map(|r| key(r.snr_db)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let members: Vec<ClipScores> = rows.iter().filter(|r| key(r.snr_db) == k).cloned().collect();
            SnrBucket {
                lo: k as f64 * width,
                hi: (k + 1) as f64 * width,
                clips: members.len(),
                aggregate: MetricsReport::from_rows(members).aggregate,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub steps: Vec<usize>,
    pub modes: Vec<Mode>,
    /// Enhancement runs per clip and cell.
    pub runs: usize,
    pub seed: u64,
    pub snr_bucket_db: f64,
    pub init_from_noisy: bool,
}

/// Enhances the test split for every (steps, mode) cell and scores the
/// results in memory. Cells share clip seeds, so they differ only in the
/// sampler setting.
pub fn ablate(manifest: &Manifest, models: &Models, spec: &AblationSpec) -> Result<AblationReport> {
    if spec.steps.is_empty() || spec.modes.is_empty() || spec.runs == 0 {
        return Err(Error::Config("ablation needs steps, modes and at least one run".into()));
    }
    let data = Dataset::new(manifest.clone(), Split::Test, models.stft(), models.vae.arch.n_frames)?;
    let records = data.load_all()?;
    let mut cells = Vec::new();
    for &steps in &spec.steps {
        for &mode in &spec.modes {
            let opts = EnhanceOptions {
                steps,
                mode,
                init_from_noisy: spec.init_from_noisy,
            };
            let mut rows = Vec::new();
            for rec in &records {
                let named = |e: Error| Error::Data(format!("clip {}: {e}", rec.record.id));
                for run in 0..spec.runs {
                    let y = enhance(&rec.noisy, models, &opts, clip_seed(spec.seed, run, rec.index)).map_err(named)?;
                    rows.push(
                        score_clip(&rec.record.id, rec.record.snr_db, &rec.clean, &rec.noise, &rec.noisy, &y)
                            .map_err(named)?,
                    );
                }
            }
            let report = MetricsReport::from_rows(rows);
            log::info!(
                "ablation steps={steps} mode={mode}: si_sdr {:.3} dB, estoi {:.4}",
                report.aggregate.si_sdr.mean,
                report.aggregate.estoi.mean
            );
            cells.push(AblationCell {
                steps,
                mode,
                buckets: buckets(&report.rows, spec.snr_bucket_db),
                report,
            });
        }
    }
    Ok(AblationReport { cells })
}
