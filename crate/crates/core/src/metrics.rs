//! Reconstruction metrics, a Gaussian Fréchet distance over pluggable
//! features, and codebook utilization reports.
//!
//! The Fréchet distance here is computed on whatever features the caller
//! supplies (pooled pixels or latents). It is not Inception-FID and its
//! values are not comparable to published FID numbers.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codebook::usage_stats;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_pair(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(op, &[x.len()], &[y.len()]));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn l1_metric(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("l1_metric", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Mean squared error over all elements.
pub fn l2_metric(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("l2_metric", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// PSNR in dB from a mean squared error; `+inf` when `mse` is 0.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(l2_metric(x, y)?, peak))
}

/// Input elements per latent token: `256·256·3 / (16·16) = 768`.
pub fn compression_ratio(height: usize, width: usize, channels: usize, latent_h: usize, latent_w: usize) -> f64 {
    (height * width * channels) as f64 / (latent_h * latent_w) as f64
}

/// Mean and unbiased covariance of `rows` feature vectors of width `dim`.
pub fn gaussian_stats(features: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || features.len() % dim != 0 || features.len() / dim < 2 {
        return Err(Error::invalid(
            "gaussian_stats",
            format!("need at least two rows of width {dim}, got {} values", features.len()),
        ));
    }
    let n = features.len() / dim;
    let m = DMatrix::from_row_slice(n, dim, features);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^½)`, with the trace of the root taken
/// from the eigenvalues of `Σ1^½ Σ2 Σ1^½` (floored at 0).
pub fn frechet_gaussian(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    for (name, shape) in [("mu2", (mu2.len(), 1)), ("sigma1", s1.shape()), ("sigma2", s2.shape())] {
        let want = if name == "mu2" { (d, 1) } else { (d, d) };
        if shape != want {
            return Err(Error::shape("frechet_gaussian", &[want.0, want.1], &[shape.0, shape.1]));
        }
    }
    let (s1, s2) = (symmetrize(s1), symmetrize(s2));
    let root1 = psd_sqrt(&s1);
    let inner = symmetrize(&(&root1 * &s2 * &root1));
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root)
}

/// Fréchet distance between the Gaussians fitted to two feature sets.
pub fn frechet_features(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let (m1, s1) = gaussian_stats(a, dim)?;
    let (m2, s2) = gaussian_stats(b, dim)?;
    frechet_gaussian(&m1, &s1, &m2, &s2)
}

/// `+inf` and `-inf` become the strings `"inf"` / `"-inf"`; JSON has no
/// literal for them.
pub mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub name: String,
    pub k: usize,
    pub counts: Vec<u64>,
    pub cumulative_assignments: u64,
    pub perplexity: f64,
    pub active_fraction: f64,
}

impl CodebookUsage {
    pub fn from_counts(name: impl Into<String>, counts: Vec<u64>) -> Self {
        let stats = usage_stats(&counts);
        Self {
            name: name.into(),
            k: counts.len(),
            cumulative_assignments: counts.iter().sum(),
            counts,
            perplexity: stats.perplexity,
            active_fraction: stats.active_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub codebooks: Vec<CodebookUsage>,
}

impl UtilizationReport {
    pub fn new(config_hash: impl Into<String>, step: u64, codebooks: Vec<CodebookUsage>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: config_hash.into(),
            step,
            codebooks,
        }
    }

    /// Active entries over all codebooks divided by total entries.
    pub fn total_active_fraction(&self) -> f64 {
        let k: usize = self.codebooks.iter().map(|c| c.k).sum();
        let active: usize = self
            .codebooks
            .iter()
            .map(|c| c.counts.iter().filter(|&&n| n > 0).count())
            .sum();
        active as f64 / k.max(1) as f64
    }
}

#[derive(Serialize, Deserialize)]
struct UsageRow {
    codebook: String,
    entry: usize,
    count: u64,
}

/// Writes `<stem>.json` and `<stem>.csv` (columns `codebook,entry,count`).
pub fn emit_utilization(report: &UtilizationReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    write_atomic(json_path, |w| Ok(serde_json::to_writer_pretty(w, report)?))?;
    write_atomic(csv_path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for cb in &report.codebooks {
            for (entry, &count) in cb.counts.iter().enumerate() {
                csv.serialize(UsageRow {
                    codebook: cb.name.clone(),
                    entry,
                    count,
                })?;
            }
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn read_utilization(json_path: &Path) -> Result<UtilizationReport> {
    Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(json_path)?))?)
}
