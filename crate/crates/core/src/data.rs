//! IDX datasets, validation splits, batching and the noise augmentations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 32;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

/// Images `[N, 1, 32, 32]` in `[0, 1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub role: SplitRole,
}

impl DatasetSplit {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, role: SplitRole) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != SIDE || s[3] != SIDE {
            return Err(Error::shape("dataset", format!("images {s:?} must be [N, 1, 32, 32]")));
        }
        if s[0] != labels.len() {
            return Err(Error::Consistency(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Consistency(format!("label {l} outside 0..{CLASSES}")));
        }
        Ok(Self { images, labels, role })
    }

    /// A split with no samples; the image tensor cannot have a zero axis,
    /// so emptiness is carried by the label list.
    fn empty(role: SplitRole) -> Self {
        Self {
            images: Tensor::zeros(vec![1, 1, SIDE, SIDE]),
            labels: Vec::new(),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], role: SplitRole) -> Self {
        if indices.is_empty() {
            return Self::empty(role);
        }
        let mut data = Vec::with_capacity(indices.len() * SIDE * SIDE);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            images: Tensor::new(vec![indices.len(), 1, SIDE, SIDE], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            role,
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

// ---------------------------------------------------------------- IDX

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parse an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let dims: Vec<usize> = (0..3)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| format_err(path, "truncated dimensions"))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(format_err(
            path,
            format!("payload is {} bytes, header declares {n}x{rows}x{cols}", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4).ok_or_else(|| format_err(path, "truncated dimensions"))? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format_err(path, format!("payload is {} bytes, header declares {n}", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Centre-pad (with zeros) or centre-crop one image to `SIDE x SIDE`.
fn fit_to_side(src: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = vec![0u8; SIDE * SIDE];
    // Offsets of the source origin within the destination (may be negative when cropping).
    let oy = (SIDE as isize - rows as isize) / 2;
    let ox = (SIDE as isize - cols as isize) / 2;
    for y in 0..rows {
        let dy = y as isize + oy;
        if !(0..SIDE as isize).contains(&dy) {
            continue;
        }
        for x in 0..cols {
            let dx = x as isize + ox;
            if (0..SIDE as isize).contains(&dx) {
                out[dy as usize * SIDE + dx as usize] = src[y * cols + x];
            }
        }
    }
    out
}

/// Load an IDX image/label pair, scaling pixels by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, mut pixels) = parse_idx_images(ip, &read_file(ip)?)?;
    let labels = parse_idx_labels(lp, &read_file(lp)?)?;
    if n != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            ip.display(),
            lp.display(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(format_err(ip, "no images"));
    }
    if rows != SIDE || cols != SIDE {
        log::warn!("{}: {rows}x{cols} images are centre-fitted to {SIDE}x{SIDE}", ip.display());
        pixels = pixels.chunks(rows * cols).flat_map(|img| fit_to_side(img, rows, cols)).collect();
    }
    let images = Tensor::new(vec![n, 1, SIDE, SIDE], pixels.iter().map(|&b| b as f32 / 255.0).collect())?;
    let labels = labels.into_iter().map(usize::from).collect();
    DatasetSplit::new(images, labels, SplitRole::Train)
}

/// Read a single grayscale digit (PGM, PNG) as `[1, 1, 32, 32]`,
/// centre-fitted like IDX input.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = img.into_raw();
    if w != SIDE || h != SIDE {
        log::warn!("{}: {h}x{w} image is centre-fitted to {SIDE}x{SIDE}", path.display());
        px = fit_to_side(&px, h, w);
    }
    Tensor::new(vec![1, 1, SIDE, SIDE], px.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Quantise pixels back to bytes; exact inverse of the 1/255 scaling.
pub fn to_bytes(images: &Tensor<f32>) -> Vec<u8> {
    images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn idx_image_bytes(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Write a split as an IDX image/label pair.
pub fn write_idx(split: &DatasetSplit, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = idx_image_bytes(split.len(), SIDE, SIDE, &to_bytes(&split.images));
    let labels: Vec<u8> = split.labels.iter().map(|&l| l as u8).collect();
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, idx_label_bytes(&labels)).map_err(|e| Error::io(lp, e))
}

// ---------------------------------------------------------------- split / batch

/// Hold out `n_val` samples chosen by a seeded shuffle. Both parts keep the
/// original relative order.
pub fn split_validation(split: &DatasetSplit, n_val: usize, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    let n = split.len();
    if n_val >= n {
        return Err(Error::contract(format!("validation size {n_val} must be below the {n} samples")));
    }
    if n_val == 0 {
        return Ok((split.clone(), DatasetSplit::empty(SplitRole::Validation)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((split.subset(&train, split.role), split.subset(&val, SplitRole::Validation)))
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub index: usize,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Positions of the samples in the source split.
    pub indices: Vec<usize>,
}

/// Sample order for one pass; `seed` only matters when shuffling.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Cover every sample once in chunks of `batch_size`; the last may be short.
pub fn batches(split: &DatasetSplit, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    Ok(epoch_order(split.len(), shuffle, seed)
        .chunks(batch_size)
        .enumerate()
        .map(|(index, idx)| {
            let sub = split.subset(idx, split.role);
            Batch {
                index,
                images: sub.images,
                labels: sub.labels,
                indices: idx.to_vec(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------- noise

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Pepper,
    Blur,
    Speckle,
    Gaussian,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::Pepper, NoiseKind::Blur, NoiseKind::Speckle, NoiseKind::Gaussian];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Pepper => "pepper",
            NoiseKind::Blur => "blur",
            NoiseKind::Speckle => "speckle",
            NoiseKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pepper" => Ok(NoiseKind::Pepper),
            "blur" => Ok(NoiseKind::Blur),
            "speckle" => Ok(NoiseKind::Speckle),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::contract(format!(
                "unknown noise kind {other:?} (expected pepper, blur, speckle or gaussian)"
            ))),
        }
    }
}

fn default_salt() -> bool {
    true
}

/// One corruption. `intensity` is the corrupted fraction for pepper, the
/// Gaussian sigma in pixels for blur, and the noise scale for speckle and
/// gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    #[serde(default)]
    pub seed: u64,
    /// Pepper only: half the corrupted pixels become 1 instead of 0.
    #[serde(default = "default_salt")]
    pub salt: bool,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, intensity: f64, seed: u64) -> Self {
        Self {
            kind,
            intensity,
            seed,
            salt: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.intensity;
        let ok = match self.kind {
            NoiseKind::Pepper => (0.0..=1.0).contains(&i),
            NoiseKind::Blur => (0.0..=8.0).contains(&i),
            NoiseKind::Speckle | NoiseKind::Gaussian => (0.0..=10.0).contains(&i),
        };
        if !ok {
            let range = match self.kind {
                NoiseKind::Pepper => "[0, 1]",
                NoiseKind::Blur => "[0, 8]",
                _ => "[0, 10]",
            };
            return Err(Error::contract(format!("{} intensity {i} outside {range}", self.kind)));
        }
        Ok(())
    }

    /// Short label such as `pepper(0.05)`.
    pub fn label(&self) -> String {
        format!("{}({})", self.kind, self.intensity)
    }
}

/// Normalised 1-D Gaussian taps of length `ceil(6 sigma)` rounded up to odd.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let mut size = (6.0 * sigma).ceil().max(1.0) as usize;
    if size % 2 == 0 {
        size += 1;
    }
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|k| {
            let x = k as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror an index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    (if i >= n { period - i } else { i }) as usize
}

fn blur_image(img: &mut [f32], taps: &[f64]) {
    let half = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0f64; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            tmp[y * SIDE + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * img[y * SIDE + reflect(x as isize + k as isize - half, SIDE)] as f64)
                .sum();
        }
    }
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - half, SIDE) * SIDE + x])
                .sum();
            img[y * SIDE + x] = v as f32;
        }
    }
}

/// RNG for image `index`: one ChaCha stream per image so the result does not
/// depend on how images are grouped.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Corrupt every image of `[N, 1, 32, 32]`; the result stays in `[0, 1]`.
pub fn apply_noise(images: &Tensor<f32>, spec: &NoiseSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != SIDE || s[3] != SIDE {
        return Err(Error::shape("apply_noise", format!("images {s:?} must be [N, 1, 32, 32]")));
    }
    if spec.intensity == 0.0 {
        return Ok(images.clone());
    }
    let mut data = images.to_vec();
    let px = SIDE * SIDE;
    let taps = (spec.kind == NoiseKind::Blur).then(|| gaussian_kernel(spec.intensity));
    for (idx, img) in data.chunks_mut(px).enumerate() {
        let mut rng = image_rng(spec.seed, idx);
        match spec.kind {
            NoiseKind::Pepper => {
                let k = (spec.intensity * px as f64).round() as usize;
                let mut pos: Vec<usize> = (0..px).collect();
                let (chosen, _) = pos.partial_shuffle(&mut rng, k);
                for (n, &p) in chosen.iter().enumerate() {
                    img[p] = if spec.salt && n % 2 == 1 { 1.0 } else { 0.0 };
                }
            }
            NoiseKind::Blur => blur_image(img, taps.as_deref().expect("blur taps")),
            NoiseKind::Speckle => {
                for v in img.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (*v as f64 * (1.0 + spec.intensity * n)) as f32;
                }
            }
            NoiseKind::Gaussian => {
                for v in img.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (*v as f64 + spec.intensity * n) as f32;
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(s.to_vec(), data)
}
