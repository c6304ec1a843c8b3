//! Scale-invariant distortion, interference and artifact ratios.

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Ratios are reported in [-CAP_DB, CAP_DB].
pub const CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 10·log10(num / den), capped to ±[`CAP_DB`].
pub(crate) fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -CAP_DB;
    }
    if den <= 0.0 {
        return CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

fn check_lengths(a: &AudioClip, b: &AudioClip, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{what}: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// SI-SDR of `estimate` against `reference`, in dB.
pub fn si_sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    check_lengths(reference, estimate, "si_sdr")?;
    let r = reference.samples();
    let e = estimate.samples();
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::invalid("si_sdr: reference is silent"));
    }
    let alpha = dot(e, r) / rr;
    let target: f64 = alpha * alpha * rr;
    let err: f64 = r
        .iter()
        .zip(e)
        .map(|(ri, ei)| (ei - alpha * ri).powi(2))
        .sum();
    Ok(ratio_db(target, err))
}

/// Orthogonal decomposition of an estimate onto {reference, interference}.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifacts: Vec<f64>,
}

impl Decomposition {
    pub fn energies(&self) -> (f64, f64, f64) {
        let e = |v: &[f64]| dot(v, v);
        (e(&self.target), e(&self.interference), e(&self.artifacts))
    }
}

pub fn decompose(
    reference: &AudioClip,
    interference: &AudioClip,
    estimate: &AudioClip,
) -> Result<Decomposition> {
    check_lengths(reference, estimate, "si_sir_sar")?;
    check_lengths(reference, interference, "si_sir_sar")?;
    let (r, n, e) = (
        reference.samples(),
        interference.samples(),
        estimate.samples(),
    );
    let (rr, nn, rn) = (dot(r, r), dot(n, n), dot(r, n));
    let det = rr * nn - rn * rn;
    if rr == 0.0 || nn == 0.0 || det <= 1e-12 * rr * nn {
        return Err(Error::invalid(
            "si_sir_sar: reference and interference are collinear",
        ));
    }
    let (er, en) = (dot(e, r), dot(e, n));
    // Projection onto span{r, n}: solve the 2x2 Gram system.
    let a = (er * nn - en * rn) / det;
    let b = (en * rr - er * rn) / det;
    let alpha = er / rr;
    let mut target = Vec::with_capacity(r.len());
    let mut interf = Vec::with_capacity(r.len());
    let mut artif = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let s = alpha * r[i];
        let p = a * r[i] + b * n[i];
        target.push(s);
        interf.push(p - s);
        artif.push(e[i] - p);
    }
    Ok(Decomposition {
        target,
        interference: interf,
        artifacts: artif,
    })
}

/// (SI-SIR, SI-SAR) in dB.
pub fn si_sir_sar(
    reference: &AudioClip,
    interference: &AudioClip,
    estimate: &AudioClip,
) -> Result<(f64, f64)> {
    let d = decompose(reference, interference, estimate)?;
    let (st, ei, ea) = d.energies();
    let signal: f64 = d
        .target
        .iter()
        .zip(&d.interference)
        .map(|(a, b)| (a + b).powi(2))
        .sum();
    Ok((ratio_db(st, ei), ratio_db(signal, ea)))
}
