use ndarray::Array2;
use rand::Rng;

use super::{cast, Real};
use crate::error::{Error, Result};

/// Stable handle to a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Array2<S>,
    pub grad: Array2<S>,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    frozen: bool,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Weight drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add_uniform_bound(name, shape, bound, rng)
    }

    pub fn add_uniform_bound<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_simple_fn(shape, || S::of(rng.random_range(-bound..=bound)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<S> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Adds a backward pass' parameter gradients into `Parameter::grad`.
    pub fn accumulate(&mut self, grads: &Gradients<S>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen("cannot accumulate gradients".into()));
        }
        for (id, g) in &grads.grads {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {id:?}")))?;
            if p.grad.raw_dim() != g.raw_dim() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    p.grad.shape()
                )));
            }
            p.grad += g;
        }
        Ok(())
    }

    /// Same parameters in another precision. Gradients are reset.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: cast(&p.value),
                    grad: Array2::zeros(p.value.raw_dim()),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Flattened copy of every value, in store order.
    pub fn flat_values(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore<S>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub(crate) grads: Vec<(ParamId, Array2<S>)>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<S>> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }
}
