//! Named parameter storage with gradient buffers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

/// Parameters bound as tracked leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars created by the caller, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]`, drawn in f64 then rounded to `T` so
    /// both precisions start from the same weights.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Records every parameter as an untracked constant, for inference.
    pub fn bind_frozen(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Pulls per-parameter gradients out of a backward pass; parameters the
    /// loss does not reach get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    }

    /// Installs gradients. Fails if any buffer is still populated from an
    /// earlier step; call [`ParamStore::zero_grad`] first.
    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if let Some(p) = self.params.iter().find(|p| p.grad.is_some()) {
            return Err(Error::Contract(format!(
                "gradient of `{}` already populated; reset before the next backward",
                p.name
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("set_grads", p.value.shape(), g.shape()));
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}

/// Element-wise sum of per-sample gradient lists, in list order.
pub fn sum_grads<T: Real>(per_sample: Vec<Vec<Tensor<T>>>) -> Option<Vec<Tensor<T>>> {
    let mut iter = per_sample.into_iter();
    let mut total = iter.next()?;
    for sample in iter {
        for (acc, g) in total.iter_mut().zip(sample) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_grads_requires_reset() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![2]));
        store.set_grads(vec![Tensor::ones(vec![2])]).unwrap();
        assert!(matches!(
            store.set_grads(vec![Tensor::ones(vec![2])]),
            Err(Error::Contract(_))
        ));
        store.zero_grad();
        store.set_grads(vec![Tensor::ones(vec![2])]).unwrap();
    }

    #[test]
    fn collect_grads_fills_unreached_with_zeros() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(vec![2]));
        store.add("unused", Tensor::ones(vec![3]));
        let g = Graph::new();
        let bound = store.bind(&g);
        let loss = g.sum(bound.var(a));
        let mut grads = g.backward(loss).unwrap();
        let collected = store.collect_grads(&mut grads, &bound);
        assert_eq!(collected[0].data(), &[1.0, 1.0]);
        assert_eq!(collected[1].data(), &[0.0, 0.0, 0.0]);
    }
}
