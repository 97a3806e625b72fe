//! Parameterised layers. Layers hold [`ParamId`]s only, so one model
//! definition runs against an `f32` store for training and an `f64` copy for
//! gradient checks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::LeakyRelu => g.leaky_relu(x, 0.1),
            Activation::Identity => x,
        }
    }
}

/// Builder context: the store being filled, its RNG and a name prefix.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.len();
        self.prefix.push_str(name);
        self.prefix.push('.');
        let out = f(self);
        self.prefix.truncate(saved);
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}{}", self.prefix, name);
        self.store.add(full, shape, init, self.rng)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled weights, zero bias; `same` padding for odd kernels.
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let init = Init::FanIn {
            fan_in: cin * k * k,
            gain: 2f64.sqrt(),
        };
        Self::with_init(b, name, cin, cout, k, stride, init)
    }

    /// Zero weights and bias.
    pub fn zeroed<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_init(b, name, cin, cout, k, stride, Init::Zeros)
    }

    fn with_init<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        b.scope(name, |b| Conv2d {
            weight: b.param("weight", &[cout, cin, k, k], init),
            bias: b.param("bias", &[cout], Init::Zeros),
            stride,
            padding: k / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        // each output pixel of a k=s transpose sees exactly one input tap per channel
        let init = Init::FanIn {
            fan_in: cin * (k / stride).max(1).pow(2),
            gain: 2f64.sqrt(),
        };
        b.scope(name, |b| ConvTranspose2d {
            weight: b.param("weight", &[cin, cout, k, k], init),
            bias: b.param("bias", &[cout], Init::Zeros),
            stride,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

/// Token-wise affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        b.scope(name, |b| Linear {
            weight: b.param("weight", &[din, dout], Init::TruncNormal(0.02)),
            bias: bias.then(|| b.param("bias", &[dout], Init::Zeros)),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(s, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LayerNorm over one axis with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, channels: usize, axis: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gamma: b.param("gamma", &[channels], Init::Ones),
            beta: b.param("beta", &[channels], Init::Zeros),
            axis,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, self.axis, gamma, beta, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn scoped_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, &mut rng);
        let conv = b.scope("enc", |b| Conv2d::new(b, "c1", 3, 8, 3, 2));
        assert_eq!(store.get(conv.weight).name(), "enc.c1.weight");
        assert_eq!(store.get(conv.bias).name(), "enc.c1.bias");
        assert_eq!(store.get(conv.weight).shape(), &[8, 3, 3, 3]);
    }

    #[test]
    fn linear_acts_on_last_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut Builder::new(&mut store, &mut rng), "l", 3, 2, true);
        store
            .set(lin.weight, &Tensor::from_f64(vec![3, 2], &[1., 0., 0., 1., 1., 1.]).unwrap())
            .unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_f64(vec![2, 1, 3], &[1., 2., 3., 0., 0., 1.]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 2]);
        assert_eq!(g.value(y), &[4., 5., 1., 1.]);
    }
}
