use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::arch::{Architecture, ParamRole, Section};
use crate::tensor::{Scalar, Tensor};

/// A tensor plus what it means to the owning architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub role: ParamRole,
    pub section: Section,
    pub prunable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn is_trainable(&self) -> bool {
        self.role.is_trainable()
    }
}

/// Ordered, named parameter tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    /// Builds a set from raw named tensors, taking roles from `arch`.
    pub fn from_tensors(arch: &Architecture, mut tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut out = ParameterSet::new();
        for spec in arch.param_specs() {
            let tensor = tensors
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::contract(format!("missing tensor `{}`", spec.name)))?;
            tensor.ensure_shape(&spec.shape)?;
            out.insert(
                spec.name,
                Param {
                    tensor,
                    role: spec.role,
                    section: spec.section,
                    prunable: spec.prunable,
                },
            )?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::contract(format!("unexpected tensor `{extra}`")));
        }
        Ok(out)
    }

    /// Checks names, order and shapes against `arch`.
    pub fn check_against(&self, arch: &Architecture) -> Result<()> {
        let specs = arch.param_specs();
        if specs.len() != self.entries.len() {
            return Err(Error::contract(format!(
                "architecture has {} tensors, parameter set has {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for spec in specs {
            let p = self
                .entries
                .get(&spec.name)
                .ok_or_else(|| Error::contract(format!("missing tensor `{}`", spec.name)))?;
            p.tensor.ensure_shape(&spec.shape)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub(crate) fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("missing tensor `{name}`")))
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.shift_remove(name)
    }

    /// Number of scalars in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.is_trainable())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Same names and metadata, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: Tensor::zeros(p.tensor.shape()),
                            role: p.role,
                            section: p.section,
                            prunable: p.prunable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Byte-exact equality of every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.tensor.bit_eq(&b.tensor))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            role: p.role,
                            section: p.section,
                            prunable: p.prunable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn into_tensors(self) -> IndexMap<String, Tensor<T>> {
        self.entries.into_iter().map(|(k, p)| (k, p.tensor)).collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.tensor))
    }
}
