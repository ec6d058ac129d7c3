//! Named parameter storage and per-tape binding.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::engine::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered map of trainable tensors; insertion order is the canonical order
/// used by the optimizer and the checkpoint writer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.map.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.map.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Element count of every parameter whose name starts with `prefix`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites every tensor named `prefix*` with zeros.
    pub fn zero_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, v) in self.map.iter_mut() {
            if pred(k) {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn init_uniform(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng))
    }
}

/// Lazily registers store parameters as leaves of one tape.
pub struct Bound<'t, 's, T: Real> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<IndexMap<String, Var<'t, T>>>,
    trainable: bool,
}

impl<'t, 's, T: Real> Bound<'t, 's, T> {
    /// Parameters become trainable leaves.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(IndexMap::new()),
            trainable: true,
        }
    }

    /// Parameters become constants; no gradient bookkeeping.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Binds `name` to an existing variable instead of the stored tensor.
    pub fn preset(&self, name: &str, v: Var<'t, T>) {
        self.vars.borrow_mut().insert(name.to_string(), v);
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable {
            self.tape.param(t, name)
        } else {
            self.tape.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every bound parameter, by name.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }
}
