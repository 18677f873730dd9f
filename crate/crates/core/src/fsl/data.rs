//! Procedural image classes: oriented colour gratings with a class-specific
//! shape overlay.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub class_count: usize,
    /// `[channels, height, width]`; channels must be 3.
    pub image_size: [usize; 3],
    /// Distinct procedural samples available per class and split.
    pub samples_per_class: usize,
    /// Radians of per-sample orientation jitter around the class orientation.
    pub orientation_jitter: f64,
    /// Relative per-sample jitter of the grating frequency.
    pub frequency_jitter: f64,
    /// Relative per-sample jitter of the class colour brightness.
    pub brightness_jitter: f64,
    /// Per-sample hue shift, in turns of the colour wheel.
    pub hue_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            class_count: 10,
            image_size: [3, 40, 40],
            samples_per_class: 1000,
            orientation_jitter: 0.3,
            frequency_jitter: 0.1,
            brightness_jitter: 0.5,
            hue_jitter: 0.08,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Disjoint sample pools for training and evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452_4149_4e00_0000,
            Split::Eval => 0x4556_414c_0000_0000,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fixed appearance of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub orientation: f64,
    /// Cycles per pixel.
    pub frequency: f64,
    pub color: [f64; 3],
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + hue * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("dataset.class_count must be at least 2".into()));
        }
        if self.image_size[0] != 3 || self.image_size[1] < 8 || self.image_size[2] < 8 {
            return Err(Error::Config(format!(
                "dataset.image_size must be [3, ≥8, ≥8], got {:?}",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("dataset.noise_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Orientation cycles through five directions; the frequency band and
    /// the shape alternate every five classes; hue is unique per class.
    pub fn class_style(&self, class: usize) -> ClassStyle {
        let n = self.class_count as f64;
        let orientation = PI * (class % 5) as f64 / 5.0;
        let band = (class / 5) % 2;
        ClassStyle {
            orientation,
            frequency: if band == 0 { 0.09 } else { 0.18 },
            color: hue_to_rgb(class as f64 / n),
            shape: if band == 0 { Shape::Disk } else { Shape::Square },
        }
    }

    /// Deterministic image `3×H×W` for `(class, index, split)`.
    pub fn render(&self, class: usize, index: usize, split: Split) -> Result<Tensor> {
        if class >= self.class_count {
            return Err(Error::invalid(format!("class {class} ≥ class_count {}", self.class_count)));
        }
        let [chans, h, w] = self.image_size;
        let seed = mix64(self.seed ^ mix64(split.tag() ^ mix64(((class as u64) << 32) | index as u64)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let style = self.class_style(class);
        let theta = style.orientation + rng.random_range(-1.0..=1.0) * self.orientation_jitter;
        let freq = style.frequency * (1.0 + rng.random_range(-1.0..=1.0) * self.frequency_jitter);
        let phase = rng.random_range(0.0..2.0 * PI);
        let bright = 1.0 + rng.random_range(-1.0..=1.0) * self.brightness_jitter;
        let hue = class as f64 / self.class_count as f64 + rng.random_range(-1.0..=1.0) * self.hue_jitter;
        let color = hue_to_rgb(hue.rem_euclid(1.0));
        let size = rng.random_range(0.15..0.25) * h.min(w) as f64;
        let cy = rng.random_range(size..h as f64 - size);
        let cx = rng.random_range(size..w as f64 - size);
        let (dir_y, dir_x) = theta.sin_cos();
        let mut data = vec![0.0; chans * h * w];
        for y in 0..h {
            for x in 0..w {
                let t = 2.0 * PI * freq * (x as f64 * dir_x + y as f64 * dir_y) + phase;
                let grating = 0.5 + 0.5 * t.sin();
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match style.shape {
                    Shape::Disk => dy * dy + dx * dx <= size * size,
                    Shape::Square => dy.abs() <= size && dx.abs() <= size,
                };
                let v = if inside { 1.0 - grating } else { grating };
                for ch in 0..chans {
                    data[(ch * h + y) * w + x] = (color[ch] * bright * v).clamp(0.0, 1.5);
                }
            }
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Tensor::new(vec![chans, h, w], data)
    }
}
