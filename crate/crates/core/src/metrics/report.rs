use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{estoi, si_sdr, si_sir_sar};
use crate::data::{Manifest, Split};
use crate::dsp::{read_wav, AudioClip};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "id,snr_db,input_si_sdr,si_sdr,si_sir,si_sar,input_estoi,estoi";

/// Scores of one enhanced clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub id: String,
    pub snr_db: f64,
    pub input_si_sdr: f64,
    pub si_sdr: f64,
    pub si_sir: f64,
    pub si_sar: f64,
    pub input_estoi: f64,
    pub estoi: f64,
}

impl ClipScores {
    fn values(&self) -> [f64; 7] {
        [
            self.snr_db,
            self.input_si_sdr,
            self.si_sdr,
            self.si_sir,
            self.si_sar,
            self.input_estoi,
            self.estoi,
        ]
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub snr_db: MeanStd,
    pub input_si_sdr: MeanStd,
    pub si_sdr: MeanStd,
    pub si_sir: MeanStd,
    pub si_sar: MeanStd,
    pub input_estoi: MeanStd,
    pub estoi: MeanStd,
}

impl Aggregate {
    fn columns(&self) -> [MeanStd; 7] {
        [
            self.snr_db,
            self.input_si_sdr,
            self.si_sdr,
            self.si_sir,
            self.si_sar,
            self.input_estoi,
            self.estoi,
        ]
    }
}

/// Per-clip rows (one per clip per run) and their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ClipScores>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ClipScores>) -> Self {
        let col = |i: usize| MeanStd::of(&rows.iter().map(|r| r.values()[i]).collect::<Vec<_>>());
        let aggregate = Aggregate {
            snr_db: col(0),
            input_si_sdr: col(1),
            si_sdr: col(2),
            si_sir: col(3),
            si_sar: col(4),
            input_estoi: col(5),
            estoi: col(6),
        };
        Self { rows, aggregate }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            write!(out, "{}", r.id).unwrap();
            for v in r.values() {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        let cols = self.aggregate.columns();
        out.push_str("MEAN");
        for c in &cols {
            write!(out, ",{}", c.mean).unwrap();
        }
        out.push_str("\nSTD");
        for c in &cols {
            write!(out, ",{}", c.std).unwrap();
        }
        out.push('\n');
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `enhanced` against the clean reference, using the known noise
/// component as the interference reference.
pub fn score_clip(
    id: &str,
    snr_db: f64,
    clean: &AudioClip,
    noise: &AudioClip,
    noisy: &AudioClip,
    enhanced: &AudioClip,
) -> Result<ClipScores> {
    let (si_sir, si_sar) = si_sir_sar(clean, noise, enhanced)?;
    Ok(ClipScores {
        id: id.to_string(),
        snr_db,
        input_si_sdr: si_sdr(clean, noisy)?,
        si_sdr: si_sdr(clean, enhanced)?,
        si_sir,
        si_sar,
        input_estoi: estoi(clean, noisy)?,
        estoi: estoi(clean, enhanced)?,
    })
}

/// `dir/run_<r>/<id>.wav`.
pub fn enhanced_path(dir: &Path, run: usize, id: &str) -> PathBuf {
    dir.join(format!("run_{run}")).join(format!("{id}.wav"))
}

/// Scores every test record of `manifest` for each of `runs` enhanced
/// copies under `enhanced_dir`.
pub fn evaluate_corpus(manifest: &Manifest, enhanced_dir: &Path, runs: usize) -> Result<MetricsReport> {
    if runs == 0 {
        return Err(Error::invalid("evaluate_corpus: runs must be positive"));
    }
    let records = manifest.split(Split::Test);
    // Check every file first so a missing clip fails before any scoring.
    for run in 0..runs {
        for (_, rec) in &records {
            let path = enhanced_path(enhanced_dir, run, &rec.id);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "clip {}: enhanced file {} is missing",
                    rec.id,
                    path.display()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(runs * records.len());
    for (_, rec) in &records {
        let named = |e: Error| Error::Data(format!("clip {}: {e}", rec.id));
        let clean = read_wav(&manifest.resolve(&rec.clean_path)).map_err(named)?;
        let noise = read_wav(&manifest.resolve(&rec.noise_path)).map_err(named)?;
        let noisy = read_wav(&manifest.resolve(&rec.noisy_path)).map_err(named)?;
        for run in 0..runs {
            let enhanced = read_wav(&enhanced_path(enhanced_dir, run, &rec.id)).map_err(named)?;
            rows.push(score_clip(&rec.id, rec.snr_db, &clean, &noise, &noisy, &enhanced).map_err(named)?);
        }
    }
    Ok(MetricsReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, CorpusConfig};
    use crate::dsp::write_wav;

    fn corpus(dir: &Path) -> Manifest {
        let cfg = CorpusConfig {
            num_train: 0,
            num_valid: 0,
            num_test: 2,
            clip_samples: 12_000,
            noise_samples: 6000,
            ..CorpusConfig::default()
        };
        synth_corpus(dir, &cfg, 3).unwrap()
    }

    fn copy_as_enhanced(m: &Manifest, out: &Path, pick: impl Fn(&crate::data::MixtureRecord) -> PathBuf) {
        for (_, rec) in m.split(Split::Test) {
            let clip = read_wav(&m.resolve(&pick(rec))).unwrap();
            let path = enhanced_path(out, 0, &rec.id);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            write_wav(&path, &clip).unwrap();
        }
    }

    #[test]
    fn clean_copies_hit_the_ceiling() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(&dir.path().join("corpus"));
        let enh = dir.path().join("enhanced");
        copy_as_enhanced(&m, &enh, |r| r.clean_path.clone());
        let rep = evaluate_corpus(&m, &enh, 1).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.aggregate.si_sdr.mean, 100.0);
        assert!((rep.aggregate.estoi.mean - 1.0).abs() < 1e-9);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("MEAN,") && lines[4].starts_with("STD,"));
    }

    #[test]
    fn noisy_copies_reproduce_the_input_column() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(&dir.path().join("corpus"));
        let enh = dir.path().join("enhanced");
        copy_as_enhanced(&m, &enh, |r| r.noisy_path.clone());
        let rep = evaluate_corpus(&m, &enh, 1).unwrap();
        for r in &rep.rows {
            assert_eq!(r.si_sdr, r.input_si_sdr);
            assert_eq!(r.estoi, r.input_estoi);
        }
        assert_eq!(rep.aggregate.si_sdr, rep.aggregate.input_si_sdr);
        // Population std over the two clips.
        let v: Vec<f64> = rep.rows.iter().map(|r| r.si_sdr).collect();
        assert!((rep.aggregate.si_sdr.std - (v[0] - v[1]).abs() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_file_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(&dir.path().join("corpus"));
        let enh = dir.path().join("enhanced");
        copy_as_enhanced(&m, &enh, |r| r.noisy_path.clone());
        fs::remove_file(enhanced_path(&enh, 0, "test_0001")).unwrap();
        match evaluate_corpus(&m, &enh, 1) {
            Err(Error::Data(msg)) => assert!(msg.contains("test_0001"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(evaluate_corpus(&m, &enh, 2), Err(Error::Data(_))));
    }

    #[test]
    fn mean_std_is_population() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
