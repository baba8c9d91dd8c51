//! Datasets: a seeded synthetic corpus for desk-scale runs, the CIFAR-10
//! binary reader, and batch augmentation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x C x H x W
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    /// Gather a batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let inner = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * inner);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data[i * inner..(i + 1) * inner]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }

    /// Deterministic Fisher-Yates permutation of the sample indices.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// First `n` samples as a new dataset (for stability checks).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split.clone(),
        })
    }
}

/// Class templates are oriented soft-edged bars through the image center, one
/// angle per class, with per-class channel weighting; samples add seeded
/// Gaussian-ish noise on top. Labels cycle 0..K so classes stay balanced.
pub fn make_synth_dataset(seed: u64, n: usize, k: usize, resolution: (usize, usize), noise: f64) -> Result<Dataset> {
    if k == 0 || n < k {
        return Err(Error::InvalidInput(format!("need n >= K >= 1, got n={n}, K={k}")));
    }
    let (h, w) = resolution;
    let c = 3usize;
    let mut templates = Vec::with_capacity(k);
    for class in 0..k {
        let angle = std::f64::consts::PI * class as f64 / k as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut t = vec![0.0f64; c * h * w];
        for ch in 0..c {
            // each class emphasizes the channels differently so color carries
            // signal too
            let weight = 0.5 + 0.5 * ((class + ch) % c) as f64 / (c - 1) as f64;
            for y in 0..h {
                for x in 0..w {
                    // distance from the line through the center at `angle`
                    let d = (y as f64 - cy) * dx - (x as f64 - cx) * dy;
                    let v = weight * (-d * d / 2.0).exp();
                    t[(ch * h + y) * w + x] = v;
                }
            }
        }
        templates.push(t);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = c * h * w;
    let mut data = Vec::with_capacity(n * inner);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        for &tv in &templates[class] {
            let eps: f64 = rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0);
            data.push(tv + noise * eps / 3.0);
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        num_classes: k,
        split: "synth".into(),
    })
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

/// Per-channel normalization constants (mean, std) applied after the [0,1]
/// scaling. `None` leaves pixels in [0,1].
pub type Normalization = Option<([f64; 3], [f64; 3])>;

/// The widely used CIFAR-10 channel statistics.
pub const CIFAR10_NORM: Normalization = Some((
    [0.4914, 0.4822, 0.4465],
    [0.2470, 0.2435, 0.2616],
));

pub fn load_cifar10_binary(path: &Path, split: &str, norm: Normalization) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!("label byte {label} out of range (must be < 10)")));
        }
        labels.push(label);
        for (i, &px) in rec[1..].iter().enumerate() {
            let mut v = px as f64 / 255.0;
            if let Some((mean, std)) = norm {
                let ch = i / 1024; // channel-major planes
                v = (v - mean[ch]) / std[ch];
            }
            data.push(v);
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        num_classes: 10,
        split: split.into(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AugmentCfg {
    pub hflip: bool,
    /// zero padding added on each side before cropping
    pub pad: usize,
    /// output extent of the random crop; None disables cropping
    pub crop: Option<(usize, usize)>,
}

impl AugmentCfg {
    pub const OFF: AugmentCfg = AugmentCfg { hflip: false, pad: 0, crop: None };

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.pad == 0 && self.crop.is_none()
    }
}

/// Per-sample flip (p = 0.5) and random crop from the zero-padded image.
pub fn augment(batch: &Tensor, cfg: &AugmentCfg, seed: u64) -> Result<Tensor> {
    if batch.shape.len() != 4 {
        return Err(Error::dim("augment input", "NCHW", format!("{:?}", batch.shape)));
    }
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let (n, c, h, w) = (batch.shape[0], batch.shape[1], batch.shape[2], batch.shape[3]);
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    let (oh, ow) = cfg.crop.unwrap_or((h, w));
    if oh > ph || ow > pw {
        return Err(Error::InvalidInput(format!(
            "crop {oh}x{ow} larger than padded image {ph}x{pw}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for ni in 0..n {
        let flip = cfg.hflip && rng.gen_bool(0.5);
        let (dy, dx) = if cfg.crop.is_some() || cfg.pad > 0 {
            (rng.gen_range(0..=ph - oh), rng.gen_range(0..=pw - ow))
        } else {
            (0, 0)
        };
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    // position in the padded frame, then back to the source
                    let sy = (y + dy) as isize - cfg.pad as isize;
                    let sx0 = (x + dx) as isize - cfg.pad as isize;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        batch.data[((ni * c + ci) * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    out[((ni * c + ci) * oh + y) * ow + x] = v;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}
