//! Trainable parameter storage and gradient accumulation buffers.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter. Only [`ParamKind::Weight`] entries enter the L1
/// penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Token,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sum of absolute values over all [`ParamKind::Weight`] parameters.
    pub fn weight_l1(&self) -> T {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .flat_map(|p| p.value.data())
            .fold(T::zero(), |s, x| s + x.abs())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers, one per parameter. Backward passes add into these;
/// they are only cleared by [`Gradients::zero`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    bufs: Vec<Tensor<T>>,
    touched: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    pub fn for_params(store: &ParamStore<T>) -> Self {
        Gradients {
            bufs: store
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            touched: alloc::vec![false; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.bufs[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        for (g, &d) in self.bufs[id.0].data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        self.touched[id.0] = true;
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        self.touched.iter_mut().for_each(|t| *t = false);
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    /// Number of scalar gradient slots that received a contribution since
    /// the last [`Gradients::zero`].
    pub fn touched_scalars(&self) -> usize {
        self.bufs
            .iter()
            .zip(&self.touched)
            .filter(|(_, &t)| t)
            .map(|(b, _)| b.len())
            .sum()
    }

    pub fn scale(&mut self, factor: T) {
        for b in &mut self.bufs {
            b.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}
