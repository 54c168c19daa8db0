use std::path::Path;

use super::{generate_synthetic, load_dataset, split, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};

/// A classification task: three splits plus whether training augments.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub augment: bool,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, train: Dataset, val: Dataset, test: Dataset, augment: bool) -> Result<Self> {
        let name = name.into();
        for d in [&val, &test] {
            if d.num_classes() != train.num_classes() || d.image_shape() != train.image_shape() {
                return Err(Error::Dataset(format!(
                    "task `{name}`: {} split disagrees with train on classes or image shape",
                    d.split
                )));
            }
        }
        if let Some(c) = train.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!("task `{name}`: class {c} absent from training split")));
        }
        Ok(TaskSpec {
            name,
            train: train.with_split(Split::Train),
            val: val.with_split(Split::Val),
            test: test.with_split(Split::Test),
            augment,
        })
    }

    pub fn synthetic(name: impl Into<String>, spec: &SyntheticSpec, seed: u64, augment: bool) -> Result<Self> {
        let (train, val, test) = generate_synthetic(spec, seed)?;
        TaskSpec::new(name, train, val, test, augment)
    }

    /// Loads `train.ltds`, `test.ltds` and, if present, `val.ltds` from
    /// `dir`. Without a validation file, 10% of each training class is held
    /// out (stratified, seeded by `seed`).
    pub fn from_dir(name: impl Into<String>, dir: impl AsRef<Path>, augment: bool, seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let train = load_dataset(dir.join("train.ltds"))?;
        let test = load_dataset(dir.join("test.ltds"))?;
        let val_path = dir.join("val.ltds");
        let (train, val) = if val_path.exists() {
            (train, load_dataset(val_path)?)
        } else {
            split(&train, 0.1, seed)?
        };
        TaskSpec::new(name, train, val, test, augment)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(dir.join("train.ltds"))?;
        self.val.save(dir.join("val.ltds"))?;
        self.test.save(dir.join("test.ltds"))
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    /// Replicates grayscale splits to `channels` planes (no-op when equal).
    pub fn adapt_channels(&self, channels: usize) -> Result<Self> {
        Ok(TaskSpec {
            name: self.name.clone(),
            train: self.train.replicate_channels(channels)?,
            val: self.val.replicate_channels(channels)?,
            test: self.test.replicate_channels(channels)?,
            augment: self.augment,
        })
    }
}
