//! Image datasets: IDX ingestion, the synthetic blob generator and splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};
use crate::nn::Tensor;
use crate::rng;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, 1, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(config_err!(
                "dataset images {:?} do not match {} labels",
                s,
                labels.len()
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::Data(format!("label {l} outside [0, 10)")));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_numel();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Stack the selected images into a `[B, C, H, W]` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_numel();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize], split: &str) -> Dataset {
        let (images, labels) = self.batch(idx);
        Dataset { images, labels, split: split.to_string() }
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut c = [0; 10];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format { file: path.to_path_buf(), offset, message: message.into() }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, offset as u64, "file truncated inside header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file into `(count, rows, cols, raw bytes)`.
fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, 0, format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(format_err(
            path,
            bytes.len().min(need) as u64,
            format!("expected {need} bytes for {n} images of {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, 0, format!("bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len()),
        ));
    }
    if let Some(pos) = bytes[8..].iter().position(|&l| l >= 10) {
        return Err(format_err(path, (8 + pos) as u64, format!("label {} outside [0, 10)", bytes[8 + pos])));
    }
    Ok(bytes[8..].iter().map(|&l| l as usize).collect())
}

/// Read an IDX image/label pair; pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, raw) = parse_images(&read_file(images_path)?, images_path)?;
    let labels = parse_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels but {} has {n} images", labels.len(), images_path.display()),
        ));
    }
    let images = Tensor::new(vec![n, 1, rows, cols], raw.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(images, labels, "full")
}

/// Write a dataset as IDX files; pixels are rounded to the nearest `1/255`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(config_err!("IDX writer supports single-channel images, got {} channels", s[1]));
    }
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    for v in [IMAGE_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Standard file names inside an MNIST-style directory, if all four exist.
pub fn find_idx_files(dir: &Path) -> Option<[std::path::PathBuf; 4]> {
    let names = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    let paths = names.map(|n| dir.join(n));
    paths.iter().all(|p| p.is_file()).then_some(paths)
}

/// Anchor cells on a 4x4 grid (row-major cell index), one row per class.
/// Even classes carry two blobs, odd classes three; no class's anchors are a
/// subset of another's.
pub const ANCHOR_TABLE: [&[usize]; 10] = [
    &[0, 15],
    &[1, 6, 11],
    &[2, 13],
    &[3, 4, 9],
    &[5, 10],
    &[7, 8, 14],
    &[12, 3],
    &[0, 6, 13],
    &[9, 14],
    &[2, 7, 11],
];

fn grid_anchor(cell: usize) -> (f64, f64) {
    let step = IMAGE_SIDE as f64 / 4.0;
    (step / 2.0 + step * (cell / 4) as f64, step / 2.0 + step * (cell % 4) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub sigma_blob: f64,
    pub sigma_jit: f64,
    pub sigma_pix: f64,
    pub amplitude: (f64, f64),
    /// Anchor `(row, col)` coordinates per class, in pixels.
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub n_per_class: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            sigma_blob: 1.6,
            sigma_jit: 0.8,
            sigma_pix: 0.05,
            amplitude: (0.8, 1.2),
            anchors: ANCHOR_TABLE
                .iter()
                .map(|cells| cells.iter().map(|&c| grid_anchor(c)).collect())
                .collect(),
            n_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() != 10 {
            return Err(config_err!("anchor table needs 10 classes, got {}", self.anchors.len()));
        }
        let hi = (IMAGE_SIDE - 1) as f64;
        for (c, list) in self.anchors.iter().enumerate() {
            if list.is_empty() {
                return Err(config_err!("class {c} has no anchors"));
            }
            if let Some(a) = list.iter().find(|(u, v)| !(0.0..=hi).contains(u) || !(0.0..=hi).contains(v)) {
                return Err(config_err!("class {c} anchor {a:?} outside the {IMAGE_SIDE}x{IMAGE_SIDE} image"));
            }
        }
        if !(self.sigma_blob > 0.0 && self.sigma_jit >= 0.0 && self.sigma_pix >= 0.0) {
            return Err(config_err!("synthetic widths must be nonnegative (blob > 0)"));
        }
        if !(self.amplitude.0 <= self.amplitude.1) {
            return Err(config_err!("amplitude range {:?} is empty", self.amplitude));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Class-balanced blob images; sample `i` has class `i % 10`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_per_class * 10;
    let area = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = vec![0.0; n * area];
    let mut labels = Vec::with_capacity(n);
    let inv2s2 = 1.0 / (2.0 * cfg.sigma_blob * cfg.sigma_blob);
    for (i, img) in data.chunks_mut(area).enumerate() {
        let class = i % 10;
        labels.push(class);
        let mut r = rng::stream(cfg.seed, rng::DATA, i as u64);
        for &(mu, nu) in &cfg.anchors[class] {
            let mu = mu + cfg.sigma_jit * normal(&mut r);
            let nu = nu + cfg.sigma_jit * normal(&mut r);
            let a = if cfg.amplitude.0 < cfg.amplitude.1 {
                r.random_range(cfg.amplitude.0..cfg.amplitude.1)
            } else {
                cfg.amplitude.0
            };
            for u in 0..IMAGE_SIDE {
                let du = (u as f64 - mu).powi(2);
                for v in 0..IMAGE_SIDE {
                    let dv = (v as f64 - nu).powi(2);
                    img[u * IMAGE_SIDE + v] += a * (-(du + dv) * inv2s2).exp();
                }
            }
        }
        for p in img.iter_mut() {
            if cfg.sigma_pix > 0.0 {
                *p += cfg.sigma_pix * normal(&mut r);
            }
            *p = p.clamp(0.0, 1.0);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?, labels, "full")
}

/// Disjoint train/val/test subsets taken in order from a seeded permutation.
pub fn split(ds: &Dataset, seed: u64, sizes: (usize, usize, usize)) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = sizes;
    if a + b + c > ds.len() {
        return Err(usage_err!(
            "split sizes {a}+{b}+{c} exceed the {} available samples",
            ds.len()
        ));
    }
    let perm = permutation(ds.len(), seed);
    Ok((
        ds.subset(&perm[..a], "train"),
        ds.subset(&perm[a..a + b], "val"),
        ds.subset(&perm[a + b..a + b + c], "test"),
    ))
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
