use std::sync::Arc;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors. Index `i` is the parameter id used on
/// the tape and in gradient vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, pid: usize) -> &Tensor<T> {
        &self.values[pid]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn get_mut(&mut self, pid: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[pid])
    }

    pub fn set(&mut self, pid: usize, value: Tensor<T>) {
        self.values[pid] = Arc::new(value);
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|v| v.shape().to_vec()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter on `g`; the returned ids are indexed by pid.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.values.iter().enumerate().map(|(i, v)| g.param(Arc::clone(v), i)).collect()
    }

    /// Registers every parameter as a constant (no gradients flow).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.values.iter().map(|v| g.constant((**v).clone())).collect()
    }

    /// FNV-1a over the bit patterns of every element, in store order.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.values {
            for x in v.data() {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_checkpoint(&self, kind: CheckpointKind) -> Checkpoint {
        let named: Vec<(String, &Tensor<T>)> =
            self.names.iter().cloned().zip(self.values.iter().map(|v| &**v)).collect();
        Checkpoint::new(kind, &named)
    }

    /// Replaces every parameter with the same-named checkpoint tensor.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.len()
            )));
        }
        for pid in 0..self.len() {
            let name = &self.names[pid];
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != self.values[pid].shape() {
                return Err(Error::shape(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[pid].shape()
                )));
            }
            self.values[pid] = Arc::new(t.cast());
        }
        Ok(())
    }
}
