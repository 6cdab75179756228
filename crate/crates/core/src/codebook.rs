//! Single-codebook quantization: nearest-entry assignment, the
//! straight-through estimator, the two stop-gradient loss terms, and usage
//! accounting.
//!
//! Codebook dump layout (little-endian):
//!
//! ```text
//! magic "DVQC"    4 bytes
//! K     u64
//! d     u64
//! entries         tensor dump of shape [K, d]
//! counts u64 × K  cumulative usage
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_u64, Tensor};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DVQC";

/// Default commitment weight.
pub const DEFAULT_BETA: f64 = 0.25;

/// Assignment counts per entry. `total` always equals the sum of `counts`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageCounter {
    counts: Vec<u64>,
    total: u64,
}

impl UsageCounter {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![0; k],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.counts[i] += 1;
        }
        self.total += indices.len() as u64;
    }

    /// Adds another counter of the same size (shard merge).
    pub fn merge(&mut self, other: &UsageCounter) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn stats(&self) -> UsageStats {
        usage_stats(&self.counts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UsageStats {
    pub perplexity: f64,
    pub active_fraction: f64,
}

/// Perplexity `exp(-sum p ln p)` of the assignment distribution (0 when
/// nothing was assigned) and the fraction of entries used at least once.
pub fn usage_stats(counts: &[u64]) -> UsageStats {
    let total: u64 = counts.iter().sum();
    let k = counts.len().max(1) as f64;
    let active = counts.iter().filter(|&&c| c > 0).count() as f64 / k;
    if total == 0 {
        return UsageStats {
            perplexity: 0.0,
            active_fraction: active,
        };
    }
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    UsageStats {
        perplexity: entropy.exp(),
        active_fraction: active,
    }
}

/// Learnable code vectors plus their cumulative usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: UsageCounter,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.ndim() != 2 {
            return Err(Error::invalid(
                "codebook",
                format!("entries must be [K, d], got {:?}", entries.shape()),
            ));
        }
        let k = entries.shape()[0];
        Ok(Self {
            entries,
            usage: UsageCounter::new(k),
        })
    }

    pub fn with_usage(entries: Tensor, usage: UsageCounter) -> Result<Self> {
        let mut cb = Self::new(entries)?;
        if usage.counts().len() != cb.len() {
            return Err(Error::invalid(
                "codebook",
                format!("{} usage counts for {} entries", usage.counts().len(), cb.len()),
            ));
        }
        cb.usage = usage;
        Ok(cb)
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn usage(&self) -> &UsageCounter {
        &self.usage
    }

    pub fn nearest_indices(&self, features: &Tensor) -> Result<Vec<usize>> {
        nearest_indices(features, &self.entries)
    }

    /// Quantizes `features` against this codebook's entries (bound as a
    /// trainable leaf) and records the assignments.
    pub fn quantize(
        &mut self,
        g: &mut Graph,
        features: Var,
        beta: f64,
    ) -> Result<(Var, QuantizationResult)> {
        let codes = g.leaf(self.entries.clone(), true)?;
        let result = quantize_st(g, features, codes, beta)?;
        self.usage.record(&result.indices);
        Ok((codes, result))
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        self.entries.write_dump(w)?;
        for &c in self.usage.counts() {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| Error::format("<codebook>", msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let k = read_u64(r)? as usize;
        let d = read_u64(r)? as usize;
        let entries = Tensor::read_dump(r)?;
        if entries.shape() != [k, d] {
            return Err(bad(format!(
                "header says [{k}, {d}] but entries are {:?}",
                entries.shape()
            )));
        }
        let counts = (0..k).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        Self::with_usage(entries, UsageCounter::from_counts(counts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_dump(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_dump(&mut r).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })
    }
}

fn check_rows(op: &'static str, features: &Tensor, entries: &Tensor) -> Result<(usize, usize, usize)> {
    let (fs, es) = (features.shape(), entries.shape());
    if es.len() != 2 || es[0] == 0 {
        return Err(Error::invalid(op, "empty codebook"));
    }
    if fs.len() != 2 || fs[1] != es[1] {
        return Err(Error::shape(op, fs, es));
    }
    Ok((fs[0], es[0], es[1]))
}

/// Index of the nearest entry (squared Euclidean distance) for every
/// feature row. Ties go to the lowest index.
pub fn nearest_indices(features: &Tensor, entries: &Tensor) -> Result<Vec<usize>> {
    let (n, k, d) = check_rows("nearest_indices", features, entries)?;
    let (f, e) = (features.data(), entries.data());
    Ok((0..n)
        .map(|i| {
            let row = &f[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for j in 0..k {
                let dist: f64 = row
                    .iter()
                    .zip(&e[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best = j;
                    best_dist = dist;
                }
            }
            best
        })
        .collect())
}

/// Output of [`quantize_st`].
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    /// Selected entries in the forward pass; gradient passes straight
    /// through to the features.
    pub z_q: Var,
    /// The gathered entries themselves, differentiable w.r.t. the codes.
    pub selected: Var,
    pub indices: Vec<usize>,
    pub codebook_term: Var,
    pub commitment_term: Var,
}

/// Quantizes `features: [N,d]` against `codes: [K,d]`.
///
/// The codes receive gradient only through `codebook_term`; the
/// straight-through output routes downstream gradient to `features`
/// unchanged.
pub fn quantize_st(g: &mut Graph, features: Var, codes: Var, beta: f64) -> Result<QuantizationResult> {
    check_rows("quantize_st", g.value(features), g.value(codes))?;
    let indices = nearest_indices(g.value(features), g.value(codes))?;
    let selected = g.gather_rows(codes, &indices)?;
    let (codebook_term, commitment_term) = vq_terms(g, features, selected, beta)?;
    let z_q = g.straight_through(features, selected)?;
    Ok(QuantizationResult {
        z_q,
        selected,
        indices,
        codebook_term,
        commitment_term,
    })
}

/// `(mean ‖sg[features] − z_q‖², beta · mean ‖sg[z_q] − features‖²)`, means
/// taken over all elements.
pub fn vq_terms(g: &mut Graph, features: Var, z_q: Var, beta: f64) -> Result<(Var, Var)> {
    if g.value(features).shape() != g.value(z_q).shape() {
        return Err(Error::shape(
            "vq_terms",
            g.value(features).shape(),
            g.value(z_q).shape(),
        ));
    }
    let f_sg = g.detach(features)?;
    let codebook_term = g.mse_loss(f_sg, z_q)?;
    let q_sg = g.detach(z_q)?;
    let commit = g.mse_loss(q_sg, features)?;
    let commitment_term = g.scale(commit, beta)?;
    Ok((codebook_term, commitment_term))
}
