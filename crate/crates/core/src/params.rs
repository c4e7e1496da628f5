//! Named, ordered parameter collections with a canonical flat layout.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// An ordered list of uniquely named tensors. The flat view is the
/// concatenation of all tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::new();
        for (name, tensor) in entries {
            params.push(name, tensor)?;
        }
        Ok(params)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::LayoutMismatch(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        self.entries
            .iter()
            .map(|(n, t)| ParamSpec {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        let first_diff = self
            .layout()
            .into_iter()
            .zip(other.layout())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{}{:?} vs {}{:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} vs {} tensors", self.len(), other.len()));
        Err(Error::LayoutMismatch(first_diff))
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros_like(t)))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, t) in &self.entries {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    pub fn unflatten(layout: &[ParamSpec], flat: &[f32]) -> Result<ModelParams> {
        let total: usize = layout.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {total} values, flat vector has {}",
                flat.len()
            )));
        }
        let mut names = HashSet::new();
        let mut offset = 0;
        let mut entries = Vec::with_capacity(layout.len());
        for spec in layout {
            if !names.insert(spec.name.as_str()) {
                return Err(Error::LayoutMismatch(format!("duplicate name {}", spec.name)));
            }
            let n: usize = spec.shape.iter().product();
            let t = Tensor::new(&spec.shape, flat[offset..offset + n].to_vec())?;
            entries.push((spec.name.clone(), t));
            offset += n;
        }
        Ok(ModelParams { entries })
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Appends all entries of `other`, rejecting name clashes.
    pub fn extend(&mut self, other: ModelParams) -> Result<()> {
        for (n, t) in other.entries {
            self.push(n, t)?;
        }
        Ok(())
    }
}
