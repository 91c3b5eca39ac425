use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// A named tensor together with its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable,
        }
    }
}

/// Insertion-ordered collection of parameters addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter. Replacing keeps the original position.
    pub fn insert(&mut self, param: Parameter) {
        match self.index.get(&param.name) {
            Some(&i) => self.params[i] = param,
            None => {
                self.index.insert(param.name.clone(), self.params.len());
                self.params.push(param);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::MissingParameter(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        let i = self.index.remove(name)?;
        let p = self.params.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// SHA-256 over name, shape and little-endian payload of every parameter
    /// accepted by `filter`, in store order.
    pub fn fingerprint(&self, filter: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn frozen_fingerprint(&self) -> String {
        self.fingerprint(|p| !p.trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_replace_and_remove_keep_order() {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("a", Tensor::scalar(1.0), true));
        s.insert(Parameter::new("b", Tensor::scalar(2.0), false));
        s.insert(Parameter::new("c", Tensor::scalar(3.0), true));
        s.insert(Parameter::new("a", Tensor::scalar(4.0), true));
        let names: Vec<_> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(s.value("a").unwrap().item(), 4.0);
        s.remove("b");
        assert_eq!(s.value("c").unwrap().item(), 3.0);
        assert!(matches!(s.get("b"), Err(Error::MissingParameter(_))));
    }

    #[test]
    fn fingerprint_tracks_only_filtered_params() {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("w", Tensor::vector(vec![1.0, 2.0]), true));
        s.insert(Parameter::new("f", Tensor::vector(vec![3.0]), false));
        let frozen = s.frozen_fingerprint();
        s.get_mut("w").unwrap().value.data_mut()[0] = 9.0;
        assert_eq!(frozen, s.frozen_fingerprint());
        s.get_mut("f").unwrap().value.data_mut()[0] = 9.0;
        assert_ne!(frozen, s.frozen_fingerprint());
    }
}
