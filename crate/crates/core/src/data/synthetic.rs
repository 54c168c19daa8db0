//! Procedural class-conditional images.
//!
//! Each class draws one motif from a fixed catalogue of twelve (four shape
//! families, three orientations each). Orientations are chosen so that no two
//! motifs coincide under a horizontal flip, which keeps classes separable
//! when flip augmentation is on. A sample is the class motif, shifted by up
//! to `jitter` pixels, scaled by a random per-channel gain, plus Gaussian
//! noise.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, PI};

use serde::{Deserialize, Serialize};

use super::{channel_stats, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    Bars,
    Cross,
    HalfDisk,
    Checkers,
}

pub const MOTIF_COUNT: usize = 12;

const FAMILIES: [Motif; 4] = [Motif::Bars, Motif::Cross, Motif::HalfDisk, Motif::Checkers];

fn orientation(m: Motif, k: usize) -> f64 {
    let table = match m {
        Motif::Bars => [0.0, FRAC_PI_2, FRAC_PI_4],
        Motif::Cross => [0.0, FRAC_PI_4, FRAC_PI_8],
        Motif::HalfDisk => [FRAC_PI_2, 3.0 * FRAC_PI_2, 0.0],
        Motif::Checkers => [0.0, FRAC_PI_4, FRAC_PI_8],
    };
    table[k]
}

/// `(family, angle)` of catalogue entry `index`.
fn motif(index: usize) -> (Motif, f64) {
    let index = index % MOTIF_COUNT;
    let family = FAMILIES[index % 4];
    (family, orientation(family, index / 4))
}

/// Motif coverage in `[0, 1]` at a point given in units of the half image
/// side, relative to the motif centre.
fn coverage(m: Motif, angle: f64, x: f64, y: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let u = x * c + y * s;
    let v = -x * s + y * c;
    let inside_box = u.abs() < 0.7 && v.abs() < 0.7;
    let on = match m {
        Motif::Bars => inside_box && (2.0 * PI * u / 0.5).cos() > 0.0,
        Motif::Cross => (u.abs() < 0.18 || v.abs() < 0.18) && u.abs().max(v.abs()) < 0.75,
        Motif::HalfDisk => u * u + v * v < 0.49 && u > 0.0,
        Motif::Checkers => inside_box && (PI * u / 0.3).cos() * (PI * v / 0.3).cos() > 0.0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.8;

/// Parameters of a synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub train_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub val_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise, in `[0, 1]` pixel units.
    #[serde(default)]
    pub noise: f64,
    /// Maximum motif shift in pixels along each axis.
    #[serde(default)]
    pub jitter: usize,
    /// Per-channel gain is drawn from `[1 - contrast, 1]`.
    #[serde(default)]
    pub contrast: f64,
    /// Class `k` uses catalogue motif `(k + motif_offset) mod 12`.
    #[serde(default)]
    pub motif_offset: usize,
}

fn default_eval_per_class() -> usize {
    50
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        let bad = |m: String| Err(Error::Config(m));
        if h < 8 || w < 8 || c == 0 {
            return bad(format!("image shape {c}x{h}x{w} smaller than 1x8x8"));
        }
        if self.num_classes < 2 || self.num_classes > MOTIF_COUNT {
            return bad(format!("{} classes; supported range is 2..={MOTIF_COUNT}", self.num_classes));
        }
        if self.train_per_class < 1 || self.val_per_class < 1 || self.test_per_class < 1 {
            return bad("every split needs at least one sample per class".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=1.0).contains(&self.contrast) {
            return bad("noise must be finite and non-negative, contrast in [0, 1]".into());
        }
        if 2 * self.jitter >= h.min(w) {
            return bad(format!("jitter {} too large for {h}x{w}", self.jitter));
        }
        Ok(())
    }
}

/// Renders motif `class` at offset `(dy, dx)` with per-channel `gain` into
/// `out` as values in `[0, 1]`.
fn render(spec: &SyntheticSpec, class: usize, dy: f64, dx: f64, gain: &[f64], out: &mut [f64]) {
    let [c, h, w] = spec.shape;
    let (family, angle) = motif(class + spec.motif_offset);
    let half = h.min(w) as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5 - w as f64 / 2.0 - dx) / half;
            let py = (y as f64 + 0.5 - h as f64 / 2.0 - dy) / half;
            let cov = coverage(family, angle, px, py);
            for (ch, g) in gain.iter().enumerate().take(c) {
                out[(ch * h + y) * w + x] = BACKGROUND + g * FOREGROUND * cov;
            }
        }
    }
}

/// Noise-free, centred, full-gain rendering of `class` in `[0, 1]` units.
pub fn class_template(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let [c, h, w] = spec.shape;
    let mut out = vec![0.0; c * h * w];
    render(spec, class, 0.0, 0.0, &vec![1.0; c], &mut out);
    out
}

fn draw_split(spec: &SyntheticSpec, per_class: usize, rng: &mut Rng) -> (Vec<u8>, Vec<u16>) {
    let [c, h, w] = spec.shape;
    let n = per_class * spec.num_classes;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut buf = vec![0.0; c * h * w];
    let span = 2 * spec.jitter as u64 + 1;
    for i in 0..n {
        // Interleave classes so any prefix is roughly balanced.
        let class = i % spec.num_classes;
        let dy = rng.below(span) as f64 - spec.jitter as f64;
        let dx = rng.below(span) as f64 - spec.jitter as f64;
        let gain: Vec<f64> = (0..c).map(|_| 1.0 - spec.contrast * rng.uniform()).collect();
        render(spec, class, dy, dx, &gain, &mut buf);
        for &v in &buf {
            let noisy = if spec.noise > 0.0 { v + spec.noise * rng.normal() } else { v };
            pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(class as u16);
    }
    (pixels, labels)
}

/// Generates `(train, val, test)`. Each split is drawn from its own random
/// stream; all three are normalized with the training split's statistics.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut parts = Vec::with_capacity(3);
    for (split, per_class) in [
        (Split::Train, spec.train_per_class),
        (Split::Val, spec.val_per_class),
        (Split::Test, spec.test_per_class),
    ] {
        let mut rng = Rng::new(derive_seed(seed, &split.to_string()));
        parts.push((split, draw_split(spec, per_class, &mut rng)));
    }
    let (mean, std) = channel_stats(&parts[0].1 .0, spec.shape);
    let mut out = parts.into_iter().map(|(split, (pixels, labels))| {
        Dataset::new(split, spec.shape, spec.num_classes, mean.clone(), std.clone(), pixels, labels)
    });
    let train = out.next().expect("three splits")?;
    let val = out.next().expect("three splits")?;
    let test = out.next().expect("three splits")?;
    Ok((train, val, test))
}
