//! Labeled image datasets: two deterministic synthetic generators and the
//! IDX (MNIST-style) file pair format.
//!
//! Synthetic tasks are 2-class, 16×16:
//! - `gaussian-blobs` (3 channels): class-specific base color plus a bright
//!   blob at a random position. Linearly separable from GAP features alone.
//! - `striped-textures` (1 channel): sinusoidal stripes whose spatial period
//!   depends on the class while orientation and phase vary per sample, so
//!   pooled intensity carries no signal and filters must do the work.

use std::f32::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NDTensor, Scalar};

pub const IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    GaussianBlobs,
    StripedTextures,
}

/// In-memory labeled dataset, images stored f32 CHW.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Materialize a batch as an NCHW tensor in the requested precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(NDTensor<T>, Vec<usize>)> {
        let n = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "sample index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend(self.images[i * n..(i + 1) * n].iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let t = NDTensor::from_vec(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }

    /// The first `n` samples as one batch.
    pub fn head_batch<T: Scalar>(&self, n: usize) -> Result<(NDTensor<T>, Vec<usize>)> {
        let idxs: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idxs)
    }
}

/// Deterministic synthetic dataset: same (kind, n, seed) gives identical
/// bytes. Labels alternate, so the class balance is exact to ±1 sample.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::GaussianBlobs => {
            let channels = 3;
            let side = IMAGE_SIDE;
            let mut images = Vec::with_capacity(n * channels * side * side);
            let mut labels = Vec::with_capacity(n);
            // Class base colors differ far more than the noise floor.
            let base = [[0.2f32, 0.5, 0.8], [0.8, 0.5, 0.2]];
            for i in 0..n {
                let class = i % 2;
                let cx = rng.gen_range(3.0f32..(side as f32 - 3.0));
                let cy = rng.gen_range(3.0f32..(side as f32 - 3.0));
                let amp = rng.gen_range(0.5f32..1.0);
                let sigma2 = 2.0 * rng.gen_range(1.5f32..2.5).powi(2);
                for ch in 0..channels {
                    for y in 0..side {
                        for x in 0..side {
                            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                            let blob = amp * (-d2 / sigma2).exp();
                            let noise = rng.gen_range(-0.05f32..0.05);
                            images.push(base[class][ch] + blob + noise);
                        }
                    }
                }
                labels.push(class);
            }
            Ok(Dataset {
                images,
                channels,
                height: side,
                width: side,
                labels,
                classes: 2,
            })
        }
        SynthKind::StripedTextures => {
            let side = IMAGE_SIDE;
            let mut images = Vec::with_capacity(n * side * side);
            let mut labels = Vec::with_capacity(n);
            // Class selects the stripe period; orientation and phase vary
            // within a class.
            let period = [8.0f32, 4.0];
            for i in 0..n {
                let class = i % 2;
                let theta = rng.gen_range(0.0f32..PI);
                let phase = rng.gen_range(0.0f32..(2.0 * PI));
                let (dx, dy) = (theta.cos(), theta.sin());
                let freq = 2.0 * PI / period[class];
                for y in 0..side {
                    for x in 0..side {
                        let t = freq * (dx * x as f32 + dy * y as f32) + phase;
                        let noise = rng.gen_range(-0.1f32..0.1);
                        images.push(t.sin() + noise);
                    }
                }
                labels.push(class);
            }
            Ok(Dataset {
                images,
                channels: 1,
                height: side,
                width: side,
                labels,
                classes: 2,
            })
        }
    }
}

// ── IDX format ──────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Load an IDX image/label file pair; pixels scale to [0,1], one channel.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(images_path)
        .map_err(|e| Error::io(&ipath, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&ipath, e))?;
    if read_u32_be(&bytes, 0, &ipath)? != IDX_IMAGES_MAGIC {
        return Err(Error::format(&ipath, "bad image magic (want 0x00000803)"));
    }
    let n = read_u32_be(&bytes, 4, &ipath)? as usize;
    let rows = read_u32_be(&bytes, 8, &ipath)? as usize;
    let cols = read_u32_be(&bytes, 12, &ipath)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            &ipath,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let images: Vec<f32> = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();

    let lpath = labels_path.display().to_string();
    let mut lbytes = Vec::new();
    std::fs::File::open(labels_path)
        .map_err(|e| Error::io(&lpath, e))?
        .read_to_end(&mut lbytes)
        .map_err(|e| Error::io(&lpath, e))?;
    if read_u32_be(&lbytes, 0, &lpath)? != IDX_LABELS_MAGIC {
        return Err(Error::format(&lpath, "bad label magic (want 0x00000801)"));
    }
    let ln = read_u32_be(&lbytes, 4, &lpath)? as usize;
    if ln != n {
        return Err(Error::format(
            &lpath,
            format!("{ln} labels for {n} images"),
        ));
    }
    if lbytes.len() != 8 + ln {
        return Err(Error::format(&lpath, "truncated label payload"));
    }
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images,
        channels: 1,
        height: rows,
        width: cols,
        labels,
        classes,
    })
}

/// Write a single-channel dataset as an IDX pair (pixels clamp to [0,1]).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.channels != 1 {
        return Err(Error::Usage(format!(
            "IDX stores single-channel images, dataset has {}",
            dataset.channels
        )));
    }
    let ipath = images_path.display().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    buf.extend_from_slice(&(dataset.height as u32).to_be_bytes());
    buf.extend_from_slice(&(dataset.width as u32).to_be_bytes());
    for &v in &dataset.images {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::File::create(images_path)
        .map_err(|e| Error::io(&ipath, e))?
        .write_all(&buf)
        .map_err(|e| Error::io(&ipath, e))?;

    let lpath = labels_path.display().to_string();
    let mut lbuf = Vec::new();
    lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        lbuf.push(l as u8);
    }
    std::fs::File::create(labels_path)
        .map_err(|e| Error::io(&lpath, e))?
        .write_all(&lbuf)
        .map_err(|e| Error::io(&lpath, e))
}
