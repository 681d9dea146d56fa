use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

/// Which accumulator a backward pass writes into.
///
/// `Ce` carries the gradient used both for optimization and for importance
/// scoring; `Aux` carries gradients that must only reach the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradChannel {
    Ce,
    Aux,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad_ce: Tensor<S>,
    pub grad_aux: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad_ce = Tensor::zeros(value.shape());
        let grad_aux = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad_ce,
            grad_aux,
            trainable: true,
        }
    }

    pub fn grad(&self, channel: GradChannel) -> &Tensor<S> {
        match channel {
            GradChannel::Ce => &self.grad_ce,
            GradChannel::Aux => &self.grad_aux,
        }
    }

    pub fn grad_mut(&mut self, channel: GradChannel) -> &mut Tensor<S> {
        match channel {
            GradChannel::Ce => &mut self.grad_ce,
            GradChannel::Aux => &mut self.grad_aux,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_ce.fill_zero();
        self.grad_aux.fill_zero();
    }

    /// Replaces the value, resizing both accumulators to match.
    pub fn set_value(&mut self, value: Tensor<S>) {
        if value.shape() != self.value.shape() {
            self.grad_ce = Tensor::zeros(value.shape());
            self.grad_aux = Tensor::zeros(value.shape());
        }
        self.value = value;
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Owns a set of parameters. Every store (including clones) carries a unique
/// id so a gradient computed against one store can never land in another.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<S>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grads);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_get_fresh_ids() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let copy = store.clone();
        assert_ne!(store.uid(), copy.uid());
        assert_eq!(copy.len(), 1);
    }

    #[test]
    fn zero_grads_clears_both_channels() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[3]));
        store.get_mut(id).grad_ce.data_mut()[0] = 1.5;
        store.get_mut(id).grad_aux.data_mut()[2] = -2.0;
        store.zero_grads();
        let p = store.get(id);
        assert!(p.grad_ce.data().iter().all(|&x| x == 0.0));
        assert!(p.grad_aux.data().iter().all(|&x| x == 0.0));
    }
}
