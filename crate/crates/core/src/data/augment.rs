//! Two-view stochastic augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Range of the crop's area fraction.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub noise_std: f64,
    pub brightness_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            noise_std: 0.05,
            brightness_jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            noise_std: 0.0,
            brightness_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale {:?} must satisfy 0 < low ≤ high ≤ 1", self.crop_scale)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || self.noise_std < 0.0 || self.brightness_jitter < 0.0 {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample generator derived from `(global_seed, sample_index, epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn for_sample(global_seed: u64, index: usize, epoch: usize) -> Self {
        RngStream {
            seed: rng::mix(&[global_seed, stream::AUGMENT, index as u64, epoch as u64]),
        }
    }

    /// Independent sub-stream for view `v`.
    pub fn view(&self, v: u64) -> ChaCha8Rng {
        rng::seeded(rng::mix(&[self.seed, v]))
    }
}

/// Bilinear sample at fractional `(y, x)`, clamped to the image.
fn bilinear(img: &[f64], size: usize, y: f64, x: f64) -> f64 {
    let max = (size - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| img[r * size + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Random square crop resized back with corner-aligned bilinear sampling.
fn random_crop(img: &[f64], size: usize, scale: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let area = rng.gen_range(scale.0..=scale.1);
    let side = (area.sqrt() * size as f64).clamp(1.0, size as f64);
    let slack = size as f64 - side;
    let oy = rng.gen_range(0.0..=slack);
    let ox = rng.gen_range(0.0..=slack);
    if size == 1 {
        return img.to_vec();
    }
    let step = (side - 1.0) / (size - 1) as f64;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = bilinear(img, size, oy + r as f64 * step, ox + c as f64 * step);
        }
    }
    out
}

/// One augmented view: crop, flip, additive noise, brightness; clamped to `[0, 1]`.
pub fn augment_view(img: &[f64], size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = random_crop(img, size, cfg.crop_scale, rng);
    if rng.gen::<f64>() < cfg.flip_prob {
        for row in out.chunks_mut(size) {
            row.reverse();
        }
    }
    if cfg.noise_std > 0.0 {
        for p in &mut out {
            *p = (*p + cfg.noise_std * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
    }
    let j = cfg.brightness_jitter;
    let factor = 1.0 - j + 2.0 * j * rng.gen::<f64>();
    for p in &mut out {
        *p = (*p * factor).clamp(0.0, 1.0);
    }
    out
}

/// Two independently augmented views drawn from disjoint sub-streams.
pub fn augment_pair(img: &[f64], size: usize, cfg: &AugmentConfig, stream: &RngStream) -> (Vec<f64>, Vec<f64>) {
    let x1 = augment_view(img, size, cfg, &mut stream.view(1));
    let x2 = augment_view(img, size, cfg, &mut stream.view(2));
    (x1, x2)
}
