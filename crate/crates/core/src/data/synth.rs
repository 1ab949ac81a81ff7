//! Synthetic "shared anatomy, distinct pathology" images.
//!
//! Every image carries the same smooth radial gradient and three concentric
//! low-contrast elliptical bands, with a few pixels of centre jitter and a
//! few percent of radius jitter. Exposure varies per image (gain and
//! offset), which keeps the encoder's tokens from collapsing onto two
//! codewords. The class signal is one Gaussian blob whose
//! position relative to the anatomy depends on the class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, ImageSample, Split};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub blob_contrast: f64,
    /// Blob standard deviation as a fraction of the side.
    pub blob_sigma: f64,
    pub band_contrast: f64,
    pub band_radii: [f64; 3],
    pub band_width: f64,
    /// Anatomy centre jitter in pixels.
    pub center_jitter: f64,
    pub radius_jitter: f64,
    /// Per-image multiplicative gain is drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Per-image additive offset is drawn from `± offset_jitter`.
    pub offset_jitter: f64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            blob_contrast: 0.3,
            blob_sigma: 0.07,
            band_contrast: 0.06,
            band_radii: [0.14, 0.26, 0.38],
            band_width: 0.025,
            center_jitter: 2.0,
            radius_jitter: 0.05,
            gain_jitter: 0.3,
            offset_jitter: 0.3,
            noise_std: 0.0,
        }
    }
}

/// Blob centre for class `c`, as an offset from the anatomy centre in units
/// of the image side.
fn blob_offset(c: usize, classes: usize) -> (f64, f64) {
    let angle = PI / 4.0 + 2.0 * PI * c as f64 / classes as f64;
    let radius = 0.12 + 0.16 * c as f64 / (classes - 1) as f64;
    (radius * angle.sin(), radius * angle.cos())
}

/// Held-out rows: every fifth sample of each class.
pub fn split_for(index: usize, classes: usize) -> Split {
    if (index / classes) % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn render(size: usize, class: usize, classes: usize, spec: &SynthSpec, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let j = spec.center_jitter;
    let cy = s / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let cx = s / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let rj = spec.radius_jitter;
    let radius_scale = 1.0 + if rj > 0.0 { rng.gen_range(-rj..=rj) } else { 0.0 };
    let gain = 1.0 + spec.gain_jitter * (2.0 * rng.gen::<f64>() - 1.0);
    let offset = spec.offset_jitter * (2.0 * rng.gen::<f64>() - 1.0);
    let (oy, ox) = blob_offset(class, classes);
    let (by, bx) = (cy + oy * s, cx + ox * s);
    let sigma = spec.blob_sigma * s;

    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let (dy, dx) = ((fy - cy) / s, (fx - cx) / s);
            let r = (dy * dy + dx * dx).sqrt();
            let mut v = 0.75 - 0.6 * r;
            let e = (dx * dx + (dy / 1.25).powi(2)).sqrt();
            for a in spec.band_radii {
                let t = (e - a * radius_scale) / spec.band_width;
                v += spec.band_contrast * (-0.5 * t * t).exp();
            }
            let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
            v += spec.blob_contrast * (-d2 / (2.0 * sigma * sigma)).exp();
            v = v * gain + offset;
            if spec.noise_std > 0.0 {
                v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            px.push(v.clamp(0.0, 1.0));
        }
    }
    px
}

/// `n` balanced samples (`class = index mod classes`), deterministic per seed.
pub fn generate_synthetic(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    generate_with(&SynthSpec::default(), n, classes, size, seed)
}

pub fn generate_with(spec: &SynthSpec, n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {n}")));
    }
    if !(2..=8).contains(&classes) {
        return Err(Error::Config(format!("classes must be in 2..=8, got {classes}")));
    }
    if size < 16 {
        return Err(Error::Config(format!("image size must be ≥ 16, got {size}")));
    }
    let width = n.to_string().len().max(4);
    let mut samples = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut r = rng::seeded(rng::mix(&[seed, stream::SYNTH, i as u64]));
        let pixels = render(size, class, classes, spec, &mut r);
        let mut labels = vec![0u8; classes];
        labels[class] = 1;
        samples.push(ImageSample {
            id: format!("img{i:0width$}"),
            size,
            pixels,
            labels,
        });
        splits.push(split_for(i, classes));
    }
    Dataset::new(samples, splits, classes, size)
}
