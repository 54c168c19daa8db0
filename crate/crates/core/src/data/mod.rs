//! Image datasets: the `LTDS` file format, synthetic generation, stratified
//! splitting and training-time augmentation.
//!
//! Pixels are stored as raw `u8` and normalized on the way out: a pixel `p` of
//! channel `c` becomes `(p / 255 - mean[c]) / std[c]`, where the statistics
//! are those of the training split.

mod augment;
mod synthetic;
mod task;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_image, augment_with, AugmentDraw, PAD};
pub use synthetic::{class_template, generate_synthetic, Motif, SyntheticSpec, MOTIF_COUNT};
pub use task::TaskSpec;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "LTDS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    /// Validates and assembles a dataset. `pixels` is `N·C·H·W` row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        split: Split,
        [channels, height, width]: [usize; 3],
        num_classes: usize,
        mean: Vec<f32>,
        std: Vec<f32>,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Dataset(m));
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!("empty image shape {channels}x{height}x{width}"));
        }
        if num_classes < 2 {
            return bad(format!("{num_classes} classes"));
        }
        if labels.is_empty() {
            return bad("no samples".into());
        }
        if mean.len() != channels || std.len() != channels {
            return bad("per-channel statistics do not match channel count".into());
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("non-finite mean or non-positive std".into());
        }
        if pixels.len() != labels.len() * channels * height * width {
            return bad(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return bad(format!("label {l} out of range for {num_classes} classes"));
        }
        Ok(Dataset {
            split,
            channels,
            height,
            width,
            num_classes,
            mean,
            std,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Normalized value of one stored pixel.
    pub fn normalize(&self, channel: usize, pixel: u8) -> f64 {
        (pixel as f64 / 255.0 - self.mean[channel] as f64) / self.std[channel] as f64
    }

    /// Normalized images and labels for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let plane = self.height * self.width;
        let img = self.image_len();
        // One lookup table per channel: 256 possible values each.
        let lut: Vec<Vec<T>> = (0..self.channels)
            .map(|c| (0..=255u8).map(|p| T::from_f64(self.normalize(c, p))).collect())
            .collect();
        let mut data = Vec::with_capacity(indices.len() * img);
        for &i in indices {
            let src = &self.pixels[i * img..(i + 1) * img];
            for (j, &p) in src.iter().enumerate() {
                data.push(lut[j / plane][p as usize]);
            }
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        let shape = [indices.len(), self.channels, self.height, self.width];
        (Tensor::new(shape.to_vec(), data).expect("batch shape"), labels)
    }

    /// Every image, normalized, as one `[N, C, H, W]` tensor.
    pub fn images<T: Scalar>(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all).0
    }

    /// Replaces the normalization statistics (e.g. with a training split's).
    pub fn with_stats(mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::Dataset("statistics do not match channel count".into()));
        }
        self.mean = mean;
        self.std = std;
        Dataset::new(
            self.split,
            self.image_shape(),
            self.num_classes,
            self.mean,
            self.std,
            self.pixels,
            self.labels,
        )
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Copies the single channel of a grayscale dataset into `channels`
    /// identical planes.
    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Dataset(format!(
                "cannot adapt {} channels to {channels}",
                self.channels
            )));
        }
        let plane = self.height * self.width;
        let mut pixels = Vec::with_capacity(self.pixels.len() * channels);
        for img in self.pixels.chunks_exact(plane) {
            for _ in 0..channels {
                pixels.extend_from_slice(img);
            }
        }
        Dataset::new(
            self.split,
            [channels, self.height, self.width],
            self.num_classes,
            vec![self.mean[0]; channels],
            vec![self.std[0]; channels],
            pixels,
            self.labels.clone(),
        )
    }

    /// Sub-dataset at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let img = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * img);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * img..(i + 1) * img]);
        }
        Dataset::new(
            self.split,
            self.image_shape(),
            self.num_classes,
            self.mean.clone(),
            self.std.clone(),
            pixels,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.pixels.len() + 2 * self.labels.len());
        out.extend_from_slice(MAGIC.as_bytes());
        codec::put_u16(&mut out, VERSION);
        let too_big = |what: &str| Error::Dataset(format!("{what} does not fit the file header"));
        codec::put_u32(&mut out, u32::try_from(self.len()).map_err(|_| too_big("sample count"))?);
        out.push(u8::try_from(self.channels).map_err(|_| too_big("channel count"))?);
        codec::put_u16(&mut out, u16::try_from(self.height).map_err(|_| too_big("height"))?);
        codec::put_u16(&mut out, u16::try_from(self.width).map_err(|_| too_big("width"))?);
        codec::put_u16(&mut out, u16::try_from(self.num_classes).map_err(|_| too_big("class count"))?);
        for v in self.mean.iter().chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for &l in &self.labels {
            codec::put_u16(&mut out, l);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "dataset",
                version,
            });
        }
        let n = r.u32("sample count")? as usize;
        let c = r.u8("channels")? as usize;
        let h = r.u16("height")? as usize;
        let w = r.u16("width")? as usize;
        let classes = r.u16("class count")? as usize;
        let mean = (0..c).map(|_| r.f32("mean")).collect::<Result<Vec<_>>>()?;
        let std = (0..c).map(|_| r.f32("std")).collect::<Result<Vec<_>>>()?;
        let pixels = r.take(n * c * h * w, "pixels")?.to_vec();
        let labels = r
            .take(2 * n, "labels")?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        r.finish()?;
        Dataset::new(split, [c, h, w], classes, mean, std, pixels, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

/// Reads an `LTDS` file. The split tag is not stored in the file; the result
/// is tagged [`Split::Train`] (use [`Dataset::with_split`] to retag).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&codec::read_file(path.as_ref())?, Split::Train)
}

/// Per-channel mean and population std of raw pixels scaled to `[0, 1]`.
/// A constant channel gets std 1.
pub fn channel_stats(pixels: &[u8], [c, h, w]: [usize; 3]) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut count = 0usize;
    for img in pixels.chunks_exact(c * plane) {
        for (ch, chunk) in img.chunks_exact(plane).enumerate() {
            for &p in chunk {
                let v = p as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        count += plane;
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let m = sum[ch] / count as f64;
        let var = (sq[ch] / count as f64 - m * m).max(0.0);
        mean.push(m as f32);
        std.push(if var > 1e-12 { var.sqrt() as f32 } else { 1.0 });
    }
    (mean, std)
}

/// Stratified split into `(train, val)`: each class contributes
/// `round(val_fraction · n_class)` samples (at least one) to validation.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::Dataset(format!("validation fraction {val_fraction} outside (0, 0.5)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in 0..dataset.len() {
        by_class[dataset.label(i)].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!("class {class} has fewer than 2 samples")));
        }
        rng.shuffle(&mut idx);
        let k = ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((
        dataset.select(&train)?.with_split(Split::Train),
        dataset.select(&val)?.with_split(Split::Val),
    ))
}
