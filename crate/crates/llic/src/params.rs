//! Named parameter storage. Every learned weight lives here; blocks hold
//! `ParamId` handles resolved at model-build time. Iteration order is
//! creation order, which fixes the RNG consumption order at init and the
//! tensor order in checkpoints.

use std::collections::HashMap;
use std::rc::Rc;

use crate::math::Rng;
use crate::tensor::{numel, Tape, Tensor};

pub type ParamId = usize;

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    pub grad: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(numel(&shape), data.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate param name: {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            value: Rc::new(data),
            grad: Vec::new(),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id].grad
    }

    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(data.len(), self.entries[id].value.len());
        self.entries[id].value = Rc::new(data);
    }

    pub fn set_value_at(&mut self, id: ParamId, idx: usize, v: f64) {
        let data: &mut Vec<f64> = Rc::make_mut(&mut self.entries[id].value);
        data[idx] = v;
    }

    /// In-place update access for the optimizer.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        let data: &mut Vec<f64> = Rc::make_mut(&mut self.entries[id].value);
        data.as_mut_slice()
    }

    pub fn set_all_zero(&mut self) {
        for e in self.entries.iter_mut() {
            e.value = Rc::new(vec![0.0; e.value.len()]);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.clear();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id];
        if e.grad.is_empty() {
            e.grad = vec![0.0; e.value.len()];
        }
        for (a, b) in e.grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }

    pub fn has_grad(&self, id: ParamId) -> bool {
        !self.entries[id].grad.is_empty()
    }

    /// View a param as a tensor; records a differentiable leaf when a tape
    /// is given, otherwise a constant view (eval mode).
    pub fn lift(&self, id: ParamId, tape: Option<&Tape>) -> Tensor {
        let e = &self.entries[id];
        match tape {
            Some(t) => t.param_leaf(id, e.shape.clone(), e.value.clone()),
            None => Tensor::from_vec(e.shape.clone(), e.value.as_ref().clone()),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Registration helper used while building a model: allocates params with
/// Kaiming-uniform init (bound 1 / sqrt(fan_in)) from a deterministic RNG.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = numel(&shape);
        let data: Vec<f64> = (0..n).map(|_| self.rng.uniform(-bound, bound)).collect();
        self.store.add(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> ParamId {
        let n = numel(&shape);
        self.store.add(name, shape, vec![v; n])
    }
}
