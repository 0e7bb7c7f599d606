use std::collections::BTreeMap;

use crate::tensor::{Graph, Scalar, Tensor};

/// Named parameter tensors with `f64` gradient accumulators.
///
/// Values are held at `f32` precision so a checkpoint written as 32-bit
/// floats reproduces the model bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    grads: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Register a parameter; ids are assigned in insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.grads.push(vec![0.0; value.numel()]);
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor<f32> {
        &self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.id(name).map(|i| &self.values[i])
    }

    /// Overwrite a parameter; `data` is rounded to `f32`.
    pub fn set_from_f64(&mut self, id: usize, data: &[f64]) {
        let dst = self.values[id].data_mut();
        assert_eq!(dst.len(), data.len());
        for (d, &s) in dst.iter_mut().zip(data) {
            *d = s as f32;
        }
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<f32> {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.grads[id]
    }

    /// Sum of squared gradient entries.
    pub fn grad_sq_sum(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Add `weight * grad` from every parameter leaf of `graph`.
    pub fn accumulate_from<T: Scalar>(&mut self, graph: &Graph<T>, weight: f64) {
        self.accumulate_from_offset(graph, weight, 0);
    }

    /// Like [`accumulate_from`](Self::accumulate_from) for a store whose
    /// leaves were bound with ids `offset..offset + len`; other ids are
    /// ignored.
    pub fn accumulate_from_offset<T: Scalar>(&mut self, graph: &Graph<T>, weight: f64, offset: usize) {
        for (id, g) in graph.param_grads() {
            let Some(local) = id.checked_sub(offset).filter(|&i| i < self.len()) else {
                continue;
            };
            for (acc, &x) in self.grads[local].iter_mut().zip(g.data()) {
                *acc += weight * x.as_f64();
            }
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}
