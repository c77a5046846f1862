use std::collections::BTreeMap;

use super::{EngineError, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named tensors grouped by share key. Every reference to a share key in a
/// graph binds the same tensors. Iteration order is sorted and deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    groups: BTreeMap<String, BTreeMap<String, Param<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { groups: BTreeMap::new() }
    }

    pub fn insert(&mut self, share_key: &str, name: &str, value: Tensor<T>, trainable: bool) {
        self.groups
            .entry(share_key.to_string())
            .or_default()
            .insert(name.to_string(), Param { value, trainable });
    }

    pub fn get(&self, share_key: &str, name: &str) -> Option<&Tensor<T>> {
        self.groups.get(share_key)?.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, share_key: &str, name: &str) -> Option<&mut Tensor<T>> {
        self.groups.get_mut(share_key)?.get_mut(name).map(|p| &mut p.value)
    }

    pub fn require(&self, share_key: &str, name: &str) -> Result<&Tensor<T>, EngineError> {
        self.get(share_key, name).ok_or_else(|| EngineError::MissingParam {
            share_key: share_key.to_string(),
            name: name.to_string(),
        })
    }

    pub fn contains_key(&self, share_key: &str) -> bool {
        self.groups.contains_key(share_key)
    }

    pub fn share_keys(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn group(&self, share_key: &str) -> Option<&BTreeMap<String, Param<T>>> {
        self.groups.get(share_key)
    }

    /// Replaces (or adds) a whole share-key group.
    pub fn set_group(&mut self, share_key: &str, group: BTreeMap<String, Param<T>>) {
        self.groups.insert(share_key.to_string(), group);
    }

    pub fn remove_group(&mut self, share_key: &str) -> Option<BTreeMap<String, Param<T>>> {
        self.groups.remove(share_key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Param<T>)> {
        self.groups
            .iter()
            .flat_map(|(k, g)| g.iter().map(move |(n, p)| (k.as_str(), n.as_str(), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Param<T>)> {
        self.groups
            .iter_mut()
            .flat_map(|(k, g)| g.iter_mut().map(move |(n, p)| (k.as_str(), n.as_str(), p)))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, _, p)| p.trainable).map(|(_, _, p)| p.value.len()).sum()
    }

    /// Number of trainable scalars under one share key.
    pub fn group_trainable_count(&self, share_key: &str) -> usize {
        self.groups
            .get(share_key)
            .map_or(0, |g| g.values().filter(|p| p.trainable).map(|p| p.value.len()).sum())
    }

    /// Zero tensors shaped like every trainable parameter.
    pub fn zeros_like_trainable(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, n, p) in self.iter().filter(|(_, _, p)| p.trainable) {
            out.insert(k, n, Tensor::zeros(p.value.shape()), true);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, n, p) in self.iter() {
            out.insert(k, n, p.value.cast(), p.trainable);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Bitwise equality of every tensor in a group.
    pub fn group_bits_equal(&self, share_key: &str, other: &ParamStore<T>, other_key: &str) -> bool {
        match (self.groups.get(share_key), other.groups.get(other_key)) {
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|((na, pa), (nb, pb))| {
                        na == nb
                            && pa.value.shape() == pb.value.shape()
                            && pa
                                .value
                                .data()
                                .iter()
                                .zip(pb.value.data())
                                .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                    })
            }
            _ => false,
        }
    }
}
