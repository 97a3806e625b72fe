//! Effective receptive field probes for a plain convolution and for the
//! attention branch of window / cross-scale window attention layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{AttentionKind, LayerConfig, TransformerLayer};
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, Conv2d};
use crate::tensor::{Graph, ParamStore, Tensor};

/// The block being probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErfBlock {
    Conv3x3,
    /// `Attn(LN(z))` of a transformer layer, without the residual.
    Attention(AttentionKind),
}

impl ErfBlock {
    pub fn name(self) -> &'static str {
        match self {
            ErfBlock::Conv3x3 => "conv3x3",
            ErfBlock::Attention(AttentionKind::Window) => "wa",
            ErfBlock::Attention(AttentionKind::CrossScale) => "cswa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErfConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    /// Square input side.
    pub size: usize,
    /// Random inputs and initializations averaged.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ErfConfig {
    fn default() -> Self {
        ErfConfig {
            channels: 16,
            heads: 2,
            window: 8,
            size: 32,
            samples: 16,
            seed: 0,
        }
    }
}

/// Max-normalized gradient magnitude map `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub block: ErfBlock,
    pub window: usize,
    pub map: Tensor<f64>,
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.map.at(&[y, x])
    }

    /// Pixels strictly above `threshold`.
    pub fn area(&self, threshold: f64) -> usize {
        erf_area(&self.map, threshold)
    }

    /// Pixels with any nonzero response.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let w = self.map.shape()[1];
        self.map
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.01;

pub fn erf_area(map: &Tensor<f64>, threshold: f64) -> usize {
    map.data().iter().filter(|&&v| v > threshold).count()
}

/// Gradient of the centre output pixel (summed over channels) with respect
/// to the input, as per-pixel L1 over channels, averaged over
/// `samples` draws of input and weights, then divided by its maximum.
pub fn compute_erf(block: ErfBlock, cfg: &ErfConfig) -> Result<ErfMap> {
    let (c, n) = (cfg.channels, cfg.size);
    if n == 0 || c == 0 || cfg.samples == 0 {
        return Err(Error::Config("erf probe needs positive size, channels and samples".into()));
    }
    let mut acc = vec![0.0f64; n * n];
    for s in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64 + 1);
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, &mut rng);
        enum Probe {
            Conv(Conv2d),
            Layer(TransformerLayer),
        }
        let probe = match block {
            ErfBlock::Conv3x3 => Probe::Conv(Conv2d::new(&mut b, "conv", c, c, 3, 1)),
            ErfBlock::Attention(kind) => Probe::Layer(TransformerLayer::new(
                &mut b,
                &LayerConfig {
                    kind,
                    dim: c,
                    heads: cfg.heads,
                    window: cfg.window,
                    mlp_ratio: 2,
                    mlp_act: Activation::Gelu,
                },
            )?),
        };
        let data: Vec<f64> = (0..c * n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, c, n, n], data)?);
        let y = match &probe {
            Probe::Conv(conv) => conv.forward(&mut g, &store, x)?,
            Probe::Layer(layer) => layer.attention_branch(&mut g, &store, x)?,
        };
        let mut seed = vec![0.0; g.value(y).len()];
        let centre = (n / 2) * n + n / 2;
        for ch in 0..c {
            seed[ch * n * n + centre] = 1.0;
        }
        let grads = g.backward_from(y, seed)?;
        let gx = grads.wrt(x).expect("input is a leaf");
        for ch in 0..c {
            for p in 0..n * n {
                acc[p] += gx[ch * n * n + p].abs();
            }
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    Ok(ErfMap {
        block,
        window: cfg.window,
        map: Tensor::new(vec![n, n], acc)?,
    })
}
