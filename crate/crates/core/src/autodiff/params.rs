use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Tape, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// One parameter in checkpoint form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: parameter name to shape and flat row-major values.
pub type Checkpoint = BTreeMap<String, CheckpointEntry>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
    }

    /// Glorot-uniform weight matrix.
    pub fn insert_glorot<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    /// Gaussian weight matrix with the given standard deviation.
    pub fn insert_normal<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every parameter as a constant (inference or frozen use).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gradients for vars produced by [`ParamSet::bind`], zero-filled where
    /// the loss does not depend on a parameter.
    pub fn collect_grads(grads: &Gradients, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    CheckpointEntry {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Builds a set from a checkpoint, keeping checkpoint (sorted) order.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, AutodiffError> {
        let mut set = Self::new();
        for (name, entry) in checkpoint {
            set.insert(name.clone(), Tensor::new(entry.shape.clone(), entry.values.clone())?);
        }
        Ok(set)
    }

    /// Overwrites every parameter from `checkpoint`. Names must match and
    /// shapes must agree exactly.
    pub fn load_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<(), AutodiffError> {
        for (i, name) in self.names.iter().enumerate() {
            let entry = checkpoint
                .get(name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{name}`")))?;
            if entry.shape.as_slice() != self.tensors[i].shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                    entry.shape,
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = Tensor::new(entry.shape.clone(), entry.values.clone())?;
        }
        if let Some(extra) = checkpoint.keys().find(|k| !self.names.contains(k)) {
            return Err(AutodiffError::Checkpoint(format!("unknown parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn load_json(&mut self, json: &str) -> Result<(), AutodiffError> {
        let checkpoint: Checkpoint =
            serde_json::from_str(json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        self.load_checkpoint(&checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        ps.insert("b", Tensor::matrix(1, 2, vec![0.5, -0.5]));
        ps
    }

    #[test]
    fn checkpoint_round_trip() {
        let ps = sample();
        let mut other = sample();
        other.tensor_mut(0).data_mut()[0] = 99.0;
        other.load_json(&ps.to_json()).unwrap();
        assert_eq!(other, ps);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ps = sample();
        let mut other = ParamSet::new();
        other.insert("a", Tensor::matrix(1, 4, vec![0.0; 4]));
        other.insert("b", Tensor::matrix(1, 2, vec![0.0; 2]));
        let err = other.load_json(&ps.to_json()).unwrap_err();
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn missing_and_unknown_names_are_rejected() {
        let ps = sample();
        let mut fewer = ParamSet::new();
        fewer.insert("a", Tensor::matrix(2, 2, vec![0.0; 4]));
        assert!(fewer.load_json(&ps.to_json()).is_err());
        let mut more = sample();
        more.insert("c", Tensor::scalar(1.0));
        assert!(more.load_json(&ps.to_json()).is_err());
    }
}
