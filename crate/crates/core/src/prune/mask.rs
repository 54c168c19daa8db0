use std::path::Path;

use indexmap::IndexMap;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{Architecture, ParameterSet};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "LTMK";
const VERSION: u16 = 1;

/// A binary keep/drop pattern for one weight tensor. `true` keeps the weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: vec![bits.len()],
            });
        }
        Ok(Mask {
            shape: shape.to_vec(),
            bits,
        })
    }

    /// Parses a 0/1 tensor. Any other value is rejected.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            let v = v.to_f64();
            if v == 1.0 {
                bits.push(true);
            } else if v == 0.0 {
                bits.push(false);
            } else {
                return Err(Error::contract(format!("mask value {v} is not 0 or 1")));
            }
        }
        Mask::from_bits(t.shape(), bits)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| if self.bits[i] { T::ONE } else { T::ZERO })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    /// True when every kept entry of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Which parameters a density is measured over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityScope {
    /// Only the masked (prunable) tensors.
    Prunable,
    /// Every trainable scalar of the model; unmasked tensors count as fully
    /// dense.
    WholeModel { trainable: usize },
}

impl DensityScope {
    pub fn whole_model<T: Scalar>(params: &ParameterSet<T>) -> Self {
        DensityScope::WholeModel {
            trainable: params.trainable_count(),
        }
    }
}

/// One mask per prunable tensor, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet {
    entries: IndexMap<String, Mask>,
}

impl MaskSet {
    /// All-ones masks over the prunable tensors of `arch`.
    pub fn ones(arch: &Architecture) -> Self {
        MaskSet {
            entries: arch
                .param_specs()
                .into_iter()
                .filter(|s| s.prunable)
                .map(|s| (s.name, Mask::ones(&s.shape)))
                .collect(),
        }
    }

    pub fn ones_for<T: Scalar>(params: &ParameterSet<T>) -> Self {
        MaskSet {
            entries: params
                .iter()
                .filter(|(_, p)| p.prunable)
                .map(|(k, p)| (k.to_string(), Mask::ones(p.tensor.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: Mask) -> Option<Mask> {
        self.entries.insert(name.into(), mask)
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.entries.iter().map(|(k, m)| (k.as_str(), m))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mask)> {
        self.entries.iter_mut().map(|(k, m)| (k.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Requires exactly one mask per prunable tensor of `params`, with equal
    /// shapes, and no layer fully pruned.
    pub fn check_against<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        let mut seen = 0;
        for (name, p) in params.iter().filter(|(_, p)| p.prunable) {
            let m = self
                .entries
                .get(name)
                .ok_or_else(|| Error::contract(format!("no mask for prunable tensor `{name}`")))?;
            if m.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    expected: p.tensor.shape().to_vec(),
                    actual: m.shape().to_vec(),
                });
            }
            if m.count_ones() == 0 {
                return Err(Error::DegenerateLayer(name.to_string()));
            }
            seen += 1;
        }
        if seen != self.entries.len() {
            let extra = self
                .entries
                .keys()
                .find(|k| !params.get(k).is_some_and(|p| p.prunable))
                .cloned()
                .unwrap_or_default();
            return Err(Error::contract(format!("mask for non-prunable or unknown tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn count_ones(&self) -> usize {
        self.entries.values().map(Mask::count_ones).sum()
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(Mask::len).sum()
    }

    pub fn density(&self, scope: DensityScope) -> f64 {
        match scope {
            DensityScope::Prunable => self.count_ones() as f64 / self.total_len() as f64,
            DensityScope::WholeModel { trainable } => {
                let removed = self.total_len() - self.count_ones();
                (trainable - removed) as f64 / trainable as f64
            }
        }
    }

    /// Elementwise `self <= other` over the same set of tensors.
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .all(|(k, m)| other.entries.get(k).is_some_and(|o| m.is_subset_of(o)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        codec::put_u16(&mut out, VERSION);
        codec::put_u32(&mut out, self.entries.len() as u32);
        for (name, m) in &self.entries {
            codec::put_name(&mut out, name)?;
            codec::put_shape(&mut out, m.shape())?;
            let mut packed = vec![0u8; m.len().div_ceil(8)];
            for (i, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "mask file");
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "mask file",
                version,
            });
        }
        let count = r.u32("entry count")?;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let packed = r.take(n.div_ceil(8), "mask payload")?;
            let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
                return Err(r.malformed(format!("nonzero padding bits in `{name}`")));
            }
            if entries.insert(name.clone(), Mask { shape, bits }).is_some() {
                return Err(r.malformed(format!("duplicate entry `{name}`")));
            }
        }
        r.finish()?;
        Ok(MaskSet { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MaskSet::from_bytes(&codec::read_file(path.as_ref())?)
    }
}
