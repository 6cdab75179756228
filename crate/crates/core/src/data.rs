//! Image sets: the procedural generator, a directory of binary PPM files,
//! the fixed train/val/test split and the shuffling batcher.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::component_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Rectangle,
    Circle,
    Gradient,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Rectangle, ShapeClass::Circle, ShapeClass::Gradient];
}

/// Images of shape `[3, size, size]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    size: usize,
    images: Vec<Tensor>,
    labels: Option<Vec<ShapeClass>>,
}

impl ImageSet {
    pub fn new(size: usize, images: Vec<Tensor>, labels: Option<Vec<ShapeClass>>) -> Result<Self> {
        if let Some(bad) = images.iter().find(|t| t.shape() != [3, size, size]) {
            return Err(Error::invalid(
                "image_set",
                format!("expected [3, {size}, {size}] images, got {:?}", bad.shape()),
            ));
        }
        if labels.as_ref().is_some_and(|l| l.len() != images.len()) {
            return Err(Error::invalid("image_set", "label count differs from image count"));
        }
        Ok(Self { size, images, labels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[ShapeClass]> {
        self.labels.as_deref()
    }

    /// Stacks the selected images into `[B, 3, size, size]`.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.size * self.size);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new([indices.len(), 3, self.size, self.size], data)
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            size: self.size,
            images: self.images[range.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Contiguous 80/10/10 split: `floor(0.8 n)` training images, then
    /// `floor(0.1 n)` validation images, the remainder for test.
    pub fn split(&self) -> (Self, Self, Self) {
        let n = self.len();
        let train = n * 8 / 10;
        let val = n / 10;
        (
            self.subset(0..train),
            self.subset(train..train + val),
            self.subset(train + val..n),
        )
    }

    /// SHA-256 over the size, image count and every value's bit pattern.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for img in &self.images {
            for v in img.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Deterministic procedural images. Image `i` has class
/// `ShapeClass::ALL[i % 3]`: a filled rectangle, a filled circle, or a
/// linear color gradient, each over a striped, noisy background.
pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Result<ImageSet> {
    if size < 4 {
        return Err(Error::invalid("synth_dataset", format!("size {size} is too small")));
    }
    let mut rng = component_rng(seed, "synthetic-data");
    let s = size as f64;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::ALL[i % 3];
        let bg = color(&mut rng);
        let fg = color(&mut rng);
        let freq = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / s;
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let amp = rng.gen_range(0.02..0.08);
        let mut img = vec![0.0; 3 * size * size];
        // background: base color, stripes, per-pixel noise
        for y in 0..size {
            for x in 0..size {
                let stripe = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
                for c in 0..3 {
                    let noise = rng.gen_range(-0.03..0.03);
                    img[(c * size + y) * size + x] = bg[c] + stripe + noise;
                }
            }
        }
        match class {
            ShapeClass::Rectangle => {
                let w = rng.gen_range(size / 4..=size / 2);
                let h = rng.gen_range(size / 4..=size / 2);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        for c in 0..3 {
                            img[(c * size + y) * size + x] = fg[c];
                        }
                    }
                }
            }
            ShapeClass::Circle => {
                let r = rng.gen_range(s / 6.0..s / 3.0);
                let cx = rng.gen_range(r..s - r);
                let cy = rng.gen_range(r..s - r);
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            for c in 0..3 {
                                img[(c * size + y) * size + x] = fg[c];
                            }
                        }
                    }
                }
            }
            ShapeClass::Gradient => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (gx, gy) = (theta.cos(), theta.sin());
                let half = s / 2.0;
                let reach = half * (gx.abs() + gy.abs());
                for y in 0..size {
                    for x in 0..size {
                        let proj = (x as f64 + 0.5 - half) * gx + (y as f64 + 0.5 - half) * gy;
                        let t = 0.5 + 0.5 * proj / reach;
                        for c in 0..3 {
                            let p = &mut img[(c * size + y) * size + x];
                            *p = 0.3 * *p + 0.7 * (bg[c] * (1.0 - t) + fg[c] * t);
                        }
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        images.push(Tensor::new([3, size, size], img)?);
        labels.push(class);
    }
    ImageSet::new(size, images, Some(labels))
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a binary (`P6`) PPM with 8-bit samples into `[3, H, W]` in
/// `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    if ppm_token(&bytes, &mut pos) != Some(b"P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        ppm_token(&bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported header {w}x{h} maxval {maxval}")));
    }
    let body = &bytes[pos + 1..];
    if body.len() < w * h * 3 {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f64 / maxval as f64;
            }
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes `[3, H, W]` values in `[0, 1]` as an 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("write_ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    crate::io::write_atomic_bytes(path, &out)
}

/// All `*.ppm` files of a directory in file-name order. Every image must be
/// `size`×`size`.
pub fn load_ppm_dir(dir: &Path, size: usize) -> Result<ImageSet> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .ppm files"));
    }
    let images = paths
        .iter()
        .map(|p| {
            let t = read_ppm(p)?;
            if t.shape() != [3, size, size] {
                return Err(Error::format(p, format!("expected {size}x{size}, got {:?}", &t.shape()[1..])));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageSet::new(size, images, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of synthetic images.
    pub n: usize,
    /// Directory of `.ppm` files for `source = "directory"`.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n: 256,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.source, &self.path) {
            (DataSource::Directory, None) => Err(Error::Config("data.source = \"directory\" needs data.path".into())),
            (DataSource::Synthetic, _) if self.n < 10 => {
                Err(Error::Config(format!("data.n must be at least 10 for the split, got {}", self.n)))
            }
            _ => Ok(()),
        }
    }

    pub fn load(&self, seed: u64, size: usize) -> Result<ImageSet> {
        match self.source {
            DataSource::Synthetic => synth_dataset(seed, self.n, size),
            DataSource::Directory => load_ppm_dir(self.path.as_deref().expect("validated"), size),
        }
    }
}

/// Reshuffles the training set at every epoch and serves full batches;
/// a trailing partial batch is dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    epoch: u64,
}

impl Batcher {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::Config(format!("batch {batch} does not fit {n} training images")));
        }
        Ok(Self {
            rng: component_rng(seed, "batches"),
            order: (0..n).collect(),
            pos: n,
            batch,
            epoch: 0,
        })
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch of indices and whether it opens a new epoch.
    pub fn next_indices(&mut self) -> (Vec<usize>, bool) {
        let fresh = self.pos + self.batch > self.order.len();
        if fresh {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let idx = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        (idx, fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_set_is_deterministic_and_bounded() {
        let a = synth_dataset(7, 256, 32).unwrap();
        let b = synth_dataset(7, 256, 32).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), synth_dataset(8, 256, 32).unwrap().checksum());
        assert!(a.images().iter().flat_map(|t| t.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_sizes() {
        let set = synth_dataset(1, 256, 8).unwrap();
        let (tr, va, te) = set.split();
        assert_eq!((tr.len(), va.len(), te.len()), (204, 25, 27));
        assert_eq!(va.images()[0], set.images()[204]);
    }

    #[test]
    fn batcher_covers_epoch_without_repeats() {
        let mut b = Batcher::new(3, 10, 3).unwrap();
        let mut seen = Vec::new();
        for k in 0..3 {
            let (idx, fresh) = b.next_indices();
            assert_eq!(fresh, k == 0);
            seen.extend(idx);
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let (_, fresh) = b.next_indices();
        assert!(fresh);
        assert_eq!(b.epoch(), 2);
        assert!(Batcher::new(3, 2, 3).is_err());
    }

    #[test]
    fn batcher_state_round_trips() {
        let mut b = Batcher::new(4, 20, 4).unwrap();
        b.next_indices();
        let saved = serde_json::to_string(&b).unwrap();
        let mut c: Batcher = serde_json::from_str(&saved).unwrap();
        for _ in 0..12 {
            assert_eq!(b.next_indices(), c.next_indices());
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        fs::write(dir.path().join("b.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(load_ppm_dir(dir.path(), 4).is_err());
    }
}
