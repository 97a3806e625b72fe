use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect()
            }
        }
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.value)
    }

    /// Copy-on-write access; cheap when no graph still holds the buffer.
    pub fn value_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Every parameter of a model, in creation order.
///
/// Creation order is part of the contract: it fixes both the random
/// initialization and the checkpoint layout.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let data = init.sample(numel(shape), rng).into_iter().map(T::from_f64).collect();
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            value: Arc::new(data),
            requires_grad: true,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn set(&mut self, id: ParamId, t: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if t.shape() != p.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.shape,
                t.shape()
            )));
        }
        p.value = Arc::new(t.data().to_vec());
        Ok(())
    }

    pub fn tensor(&self, id: ParamId) -> Tensor<T> {
        let p = &self.params[id.0];
        Tensor::new(p.shape.clone(), p.value.to_vec()).expect("parameter shape")
    }

    /// Adds gradients from a backward sweep onto the stored `grad` fields.
    pub fn accumulate_grads(&mut self, grads: impl IntoIterator<Item = (ParamId, Vec<T>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Marks which parameters train (others keep `requires_grad = false`).
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.requires_grad = pred(&p.name);
        }
    }

    /// Same parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: Arc::new(p.value.iter().map(|v| U::from_f64(v.as_f64())).collect()),
                    requires_grad: p.requires_grad,
                    grad: None,
                })
                .collect(),
        }
    }
}
