use std::collections::btree_map;
use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
///
/// Gradients use the same type: a gradient map is a `ParamStore` whose names are a
/// subset of the parameters it updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.params.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.params.iter_mut()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn same_names(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len() && self.params.keys().zip(other.params.keys()).all(|(a, b)| a == b)
    }

    /// Order-sensitive hash of names and value bits; equal iff bit-identical (modulo collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in &self.params {
            name.bytes().for_each(|b| feed(b as u64));
            t.data().iter().for_each(|v| feed(v.to_bits() as u64));
        }
        h
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParamStore {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// `p <- p - lr * g` for every gradient entry; parameters without a gradient are untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f32) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Usage(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
