//! Named parameters with freeze flags.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A learnable tensor. While `frozen` is set the optimizer must leave the
/// value bitwise unchanged; the autodiff graph enforces this structurally by
/// admitting frozen parameters as constants.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            frozen: false,
        }
    }
}

/// Ordered collection of uniquely named parameters. BTreeMap ordering makes
/// optimizer sweeps, checkpoints, and counts deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.params.contains_key(&p.name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", p.name)));
        }
        self.params.insert(p.name.clone(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Set the freeze flag on every parameter whose name matches the glob
    /// pattern (`*` matches any run of characters). Returns the match count;
    /// zero matches is legal.
    pub fn set_frozen(&mut self, pattern: &str, frozen: bool) -> usize {
        let mut count = 0;
        for p in self.params.values_mut() {
            if glob_match(pattern, &p.name) {
                p.frozen = frozen;
                count += 1;
            }
        }
        count
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .values()
            .filter(|p| p.frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    /// (total, frozen, trainable) scalar counts.
    pub fn count_scalars(&self) -> (usize, usize, usize) {
        let mut frozen = 0;
        let mut trainable = 0;
        for p in self.params.values() {
            if p.frozen {
                frozen += p.tensor.numel();
            } else {
                trainable += p.tensor.numel();
            }
        }
        (frozen + trainable, frozen, trainable)
    }

    /// Concatenated little-endian image of every tensor, in name order.
    /// Used by tests and the training loop for snapshot-equality checks.
    pub fn byte_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.values() {
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }

    /// Bytes of the frozen subset only, in name order.
    pub fn frozen_byte_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.values().filter(|p| p.frozen) {
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }
}

/// Glob matching with `*` wildcards only, as used by freeze patterns like
/// `block.*.ffn.*`.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn inner(p: &[u8], n: &[u8]) -> bool {
        match p.first() {
            None => n.is_empty(),
            Some(b'*') => {
                // try every possible span for the star
                (0..=n.len()).any(|k| inner(&p[1..], &n[k..]))
            }
            Some(&c) => n.first() == Some(&c) && inner(&p[1..], &n[1..]),
        }
    }
    inner(pattern.as_bytes(), name.as_bytes())
}
