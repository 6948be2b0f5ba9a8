use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::TensorError;

/// Named parameter arrays, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f64> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Subset whose names start with any of `prefixes`.
    pub fn filter_prefix(&self, prefixes: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Puts every parameter on `tape`. Names for which `trainable` is false are
    /// registered as constants and never appear in the gradient map.
    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Bound, TensorError> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            let var = if trainable(name) {
                tape.param(name.clone(), value.clone())?
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.clone(), var);
        }
        Ok(Bound { vars })
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind(tape, |_| false).expect("constants cannot collide")
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::Invalid {
            op: "bind",
            msg: format!("missing parameter `{name}`"),
        })
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}
