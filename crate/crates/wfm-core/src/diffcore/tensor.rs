//! Dense row-major `f32` tensors and ordered, named parameter collections.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional 32-bit-float array, row-major.
///
/// An optional gradient buffer of identical shape can be attached; it is
/// populated by training loops that want to keep gradients next to values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidArg(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Uniform draws from `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Zero-mean gaussian draws with the given standard deviation.
    pub fn rand_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attach a gradient buffer; must match the tensor's element count.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidArg(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// One named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named collection of trainable tensors.
///
/// Order is definition order and is part of the contract: `flatten` walks
/// entries in that order, and gradient reductions accumulate in that order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, true)
    }

    pub fn insert_with(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    /// Rebuild the name index (after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Total element count across all entries.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Concatenate all trainable entries, in definition order, into one vector.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.trainable_elements());
        for e in &self.entries {
            if e.trainable {
                out.extend_from_slice(e.tensor.data());
            }
        }
        out
    }

    /// Rebuild a ParamSet from a flat vector, using `self` as the template.
    ///
    /// Non-trainable entries are copied from the template untouched.
    pub fn unflatten(&self, flat: &[f32]) -> Result<ParamSet> {
        if flat.len() != self.trainable_elements() {
            return Err(Error::InvalidArg(format!(
                "flat vector has {} elements, template expects {}",
                flat.len(),
                self.trainable_elements()
            )));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for e in &self.entries {
            let tensor = if e.trainable {
                let n = e.tensor.len();
                let t = Tensor::new(e.tensor.shape().to_vec(), flat[offset..offset + n].to_vec())?;
                offset += n;
                t
            } else {
                e.tensor.clone()
            };
            out.insert_with(e.name.clone(), tensor, e.trainable)?;
        }
        Ok(out)
    }

    /// A zero-filled ParamSet with the same entry layout (for gradients).
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert_with(
                e.name.clone(),
                Tensor::zeros(e.tensor.shape()),
                e.trainable,
            )
            .expect("names already unique");
        }
        out
    }

    /// Exact byte image of all tensor payloads, for frozenness checks and hashing.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn flatten_orders_by_definition() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        ps.insert("b", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        assert_eq!(ps.flatten(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn unflatten_round_trip_exact() {
        let mut rng = rng_for(3, "t");
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng))
            .unwrap();
        ps.insert_with("frozen", Tensor::full(&[2], 9.0), false)
            .unwrap();
        ps.insert("b", Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng))
            .unwrap();
        let flat = ps.flatten();
        assert_eq!(flat.len(), 16);
        let back = ps.unflatten(&flat).unwrap();
        assert_eq!(back, ps);
        // perturb then unflatten then flatten -> same perturbed vector
        let shifted: Vec<f32> = flat.iter().map(|v| v + 0.25).collect();
        assert_eq!(ps.unflatten(&shifted).unwrap().flatten(), shifted);
    }

    #[test]
    fn unflatten_rejects_length_mismatch() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[3])).unwrap();
        assert!(ps.unflatten(&[0.0; 2]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
