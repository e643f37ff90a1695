//! Named parameters and the ordered parameter store.

use std::collections::HashMap;

use crate::checkpoint::CheckpointArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// A named tensor with a trainability flag. Frozen parameters are bitwise
/// identical before and after any number of optimizer steps.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParam(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidParam(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidParam(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Bind a parameter into a graph: trainable parameters become named
    /// leaves, frozen ones enter as constants.
    pub fn bind(&self, graph: &mut Graph, name: &str) -> Result<VarId> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::InvalidParam(format!("unknown parameter {name}")))?;
        Ok(if p.trainable {
            graph.param(&p.name, p.value.clone())
        } else {
            graph.constant(p.value.clone())
        })
    }

    /// Expected (name, shape) manifest, in insertion order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn to_archive(&self) -> CheckpointArchive {
        let mut archive = CheckpointArchive::new();
        for p in &self.params {
            archive
                .push(&p.name, p.value.clone())
                .expect("names unique by construction");
        }
        archive
    }

    /// Replace every parameter value from an archive. The archive must carry
    /// exactly this store's manifest: missing, extra or mis-shaped entries
    /// are reported by name.
    pub fn load_archive(&mut self, archive: &CheckpointArchive) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for p in &self.params {
            match archive.get(&p.name) {
                None => missing.push(p.name.clone()),
                Some(t) if t.shape() != p.value.shape() => mismatched.push(format!(
                    "{} (expected {:?}, got {:?})",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        let extra: Vec<String> = archive
            .names()
            .filter(|n| !self.index.contains_key(*n))
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() || !extra.is_empty() || !mismatched.is_empty() {
            return Err(Error::Manifest(format!(
                "missing: [{}]; extra: [{}]; mis-shaped: [{}]",
                missing.join(", "),
                extra.join(", "),
                mismatched.join(", ")
            )));
        }
        for p in &mut self.params {
            p.value = archive.get(&p.name).expect("checked above").clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn load_reports_missing_and_extra_by_name() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2]), true).unwrap();
        store.insert("b", Tensor::zeros(&[3]), false).unwrap();

        let mut archive = CheckpointArchive::new();
        archive.push("a", Tensor::zeros(&[2])).unwrap();
        archive.push("c", Tensor::zeros(&[1])).unwrap();

        let err = store.load_archive(&archive).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing: [b]"), "{msg}");
        assert!(msg.contains("extra: [c]"), "{msg}");
    }

    #[test]
    fn load_reports_shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2]), true).unwrap();
        let mut archive = CheckpointArchive::new();
        archive.push("a", Tensor::zeros(&[3])).unwrap();
        let err = store.load_archive(&archive).unwrap_err();
        assert!(err.to_string().contains("mis-shaped: [a"));
    }
}
