use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Samples;
use crate::autodiff::Tensor;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Photometric transform used as the strong view of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrongAugment {
    Jitter,
    Cutout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding before the random crop back to the original size.
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub strong: StrongAugment,
    /// Range of the brightness and contrast factors.
    pub jitter: [f64; 2],
    /// Side of the square zeroed by cutout.
    pub cutout: usize,
    /// Weak view of vector data: additive Gaussian noise.
    pub noise_sigma: f64,
    /// Strong view of vector data: probability of zeroing a coordinate.
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            flip_prob: 0.5,
            strong: StrongAugment::Jitter,
            jitter: [0.6, 1.4],
            cutout: 8,
            noise_sigma: 0.05,
            dropout_prob: 0.2,
        }
    }
}

/// Seeded augmentation stream. Images have shape `[c, h, w]`; anything else
/// is treated as a flat vector.
#[derive(Clone, Debug)]
pub struct AugmentationPipeline {
    kind: AugmentKind,
    cfg: AugmentConfig,
    rng: Rng,
}

impl AugmentationPipeline {
    pub fn new(kind: AugmentKind, cfg: AugmentConfig, seed: u64) -> Self {
        let tag = match kind {
            AugmentKind::Weak => "augment-weak",
            AugmentKind::Strong => "augment-strong",
        };
        Self {
            kind,
            cfg,
            rng: rng::stream(seed, tag),
        }
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn augment(&mut self, sample: &[f64], shape: &[usize]) -> Vec<f64> {
        match (shape, self.kind) {
            (&[c, h, w], AugmentKind::Weak) => {
                let dy = self.rng.random_range(0..=2 * self.cfg.crop_pad);
                let dx = self.rng.random_range(0..=2 * self.cfg.crop_pad);
                let flip = self.rng.random_bool(self.cfg.flip_prob.clamp(0.0, 1.0));
                let out = crop(sample, c, h, w, self.cfg.crop_pad, dy, dx);
                if flip {
                    hflip(&out, c, h, w)
                } else {
                    out
                }
            }
            (&[c, h, w], AugmentKind::Strong) => match self.cfg.strong {
                StrongAugment::Jitter => {
                    let [lo, hi] = self.cfg.jitter;
                    let b = self.factor(lo, hi);
                    let k = self.factor(lo, hi);
                    jitter(sample, b, k)
                }
                StrongAugment::Cutout => {
                    let size = self.cfg.cutout.min(h).min(w);
                    let y = self.rng.random_range(0..=h - size);
                    let x = self.rng.random_range(0..=w - size);
                    cutout(sample, c, h, w, y, x, size)
                }
            },
            (_, AugmentKind::Weak) => {
                let noise = Normal::new(0.0, self.cfg.noise_sigma).expect("finite sigma");
                sample
                    .iter()
                    .map(|&v| v + noise.sample(&mut self.rng))
                    .collect()
            }
            (_, AugmentKind::Strong) => {
                let p = self.cfg.dropout_prob.clamp(0.0, 1.0);
                sample
                    .iter()
                    .map(|&v| if self.rng.random_bool(p) { 0.0 } else { v })
                    .collect()
            }
        }
    }

    fn factor(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    /// Augments `samples[indices]` into one batch tensor.
    pub fn batch(&mut self, samples: &Samples, indices: &[usize]) -> Tensor {
        let shape = samples.sample_shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * samples.sample_len());
        for &i in indices {
            data.extend(self.augment(samples.get(i), &shape));
        }
        samples.batch(indices.len(), data)
    }
}

/// Horizontal mirror of a `[c, h, w]` image.
pub fn hflip(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.len());
    for row in img.chunks(w).take(c * h) {
        out.extend(row.iter().rev());
    }
    out
}

/// Crop of the zero-padded image starting at `(dy, dx)` in padded coordinates.
fn crop(img: &[f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Brightness then contrast around the image mean, clamped to `[0, 1]`.
fn jitter(img: &[f64], brightness: f64, contrast: f64) -> Vec<f64> {
    let bright: Vec<f64> = img.iter().map(|&v| v * brightness).collect();
    let mean = bright.iter().sum::<f64>() / bright.len() as f64;
    bright
        .iter()
        .map(|&v| (v * contrast + mean * (1.0 - contrast)).clamp(0.0, 1.0))
        .collect()
}

fn cutout(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    size: usize,
) -> Vec<f64> {
    let mut out = img.to_vec();
    for ch in 0..c {
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                out[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
    out
}
