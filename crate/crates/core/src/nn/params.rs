use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named collection of parameter tensors.
///
/// Names are unique; iteration order is the sorted name order, which keeps
/// every optimiser sweep and serialisation deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries
            .insert(name.into(), Parameter { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn entry(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.entries.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the set with every entry frozen; used to treat a network as a
    /// constant inside another network's loss.
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        out.entries.values_mut().for_each(|p| p.trainable = false);
        out
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in &mut self.entries {
            if name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParameterSet) {
        self.entries.extend(other.entries);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// `self ← tau·source + (1 − tau)·self` for entries present in both, matched
    /// by name after replacing `source_prefix` with `self_prefix`.
    pub fn blend_from(
        &mut self,
        source: &ParameterSet,
        source_prefix: &str,
        self_prefix: &str,
        tau: f64,
    ) {
        for (name, p) in &mut self.entries {
            let Some(suffix) = name.strip_prefix(self_prefix) else {
                continue;
            };
            let src_name = format!("{source_prefix}{suffix}");
            if let Some(src) = source.get(&src_name) {
                for (t, s) in p.value.data_mut().iter_mut().zip(src.data()) {
                    if tau == 1.0 {
                        *t = *s;
                    } else {
                        *t += tau * (s - *t);
                    }
                }
            }
        }
    }

    /// Sum of absolute elementwise differences against `other` over shared names.
    pub fn abs_diff(&self, other: &ParameterSet) -> f64 {
        self.entries
            .iter()
            .filter_map(|(n, p)| other.get(n).map(|o| (p, o)))
            .map(|(p, o)| {
                p.value
                    .data()
                    .iter()
                    .zip(o.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Euclidean norm across all gradient tensors.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
