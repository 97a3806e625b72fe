//! The full interpolation network: shared encoder, flow estimator, warping,
//! transformer UNet and the blend/residual synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{LayerConfig, TransformerBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowEstimator, FlowPyramid};
use crate::nn::{Activation, Builder, Conv2d, ConvTranspose2d};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Frames must be divisible by this on both axes.
/// Subtracted from frames before the encoder and flow estimator.
pub const INPUT_MEAN: f64 = 0.5;

pub const SIZE_MULTIPLE: usize = 16;

/// Four stride-2 stages producing features at 1/2, 1/4, 1/8 and 1/16.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<[Conv2d; 2]>,
    pub act: Activation,
}

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<T>, widths: &[usize; 4], act: Activation) -> Self {
        let mut cin = 3;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let block = b.scope(&format!("block{k}"), |b| {
                    [Conv2d::new(b, "conv0", cin, w, 3, 2), Conv2d::new(b, "conv1", w, w, 3, 1)]
                });
                cin = w;
                block
            })
            .collect();
        Encoder { blocks, act }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        check_frame_size(g.shape(x))?;
        let mut feats = Vec::with_capacity(4);
        let mut h = x;
        for [c0, c1] in &self.blocks {
            h = c0.forward(g, s, h)?;
            h = self.act.apply(g, h);
            h = c1.forward(g, s, h)?;
            h = self.act.apply(g, h);
            feats.push(h);
        }
        Ok(feats)
    }
}

fn check_frame_size(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Input(format!("expected frames shaped [N,3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(Error::Input(format!(
            "frame size {h}x{w} must be a nonzero multiple of {SIZE_MULTIPLE} on both axes"
        )));
    }
    Ok(())
}

/// Blend mask, residual and the composed frame.
#[derive(Clone, Copy, Debug)]
pub struct Synthesis {
    pub mask: Var,
    pub residual: Var,
    pub frame: Var,
}

/// Splits a 4-channel head output into a sigmoid mask and a residual and
/// composes `H⊙w0 + (1−H)⊙w1 + ΔI`.
pub fn synthesize<T: Real>(g: &mut Graph<T>, head: Var, warped0: Var, warped1: Var) -> Result<Synthesis> {
    let logits = g.narrow(head, 1, 0, 1)?;
    let residual = g.narrow(head, 1, 1, 3)?;
    let mask = g.sigmoid(logits);
    let a = g.mul(mask, warped0)?;
    let inv = g.rsub_scalar(1.0, mask);
    let b = g.mul(inv, warped1)?;
    let blend = g.add(a, b)?;
    let frame = g.add(blend, residual)?;
    Ok(Synthesis { mask, residual, frame })
}

/// Everything a training step or a test might inspect.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub frame: Var,
    pub mask: Var,
    pub residual: Var,
    pub warped: (Var, Var),
    pub flows: (Var, Var),
    pub pyramid: FlowPyramid,
}

/// Flow-only forward, used while the flow estimator trains alone.
#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub flows: (Var, Var),
    pub pyramid: FlowPyramid,
    enc0: Vec<Var>,
    enc1: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub flow: FlowEstimator,
    pub tfbs: Vec<TransformerBlock>,
    pub ups: Vec<ConvTranspose2d>,
    pub merges: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Model {
    /// Builds the model, registering its parameters in `store`.
    pub fn build<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, rng);
        let ew = config.encoder_widths;
        let c = config.width;
        let encoder = b.scope("enc", |b| Encoder::new(b, &ew, config.conv_activation));
        let flow = b.scope("flow", |b| FlowEstimator::new(b, &ew));
        let layer = LayerConfig {
            kind: config.attention,
            dim: c,
            heads: config.heads,
            window: config.window_size,
            mlp_ratio: config.mlp_ratio,
            mlp_act: config.mlp_activation,
        };
        let inputs = [12, c + 2 * ew[0], c + 2 * ew[1], c + 2 * ew[2]];
        let tfbs = (0..4)
            .map(|i| b.scope(&format!("tfb{}", i + 1), |b| TransformerBlock::new(b, inputs[i], config.tfls[i], &layer)))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        b.scope("dec", |b| {
            for i in 0..3 {
                ups.push(ConvTranspose2d::new(b, &format!("up{i}"), c, c, 2, 2));
                merges.push(Conv2d::new(b, &format!("merge{i}"), 2 * c, c, 3, 1));
            }
        });
        let head = Conv2d::zeroed(&mut b, "head", c, 4, 3, 1);
        Ok(Model {
            config: config.clone(),
            encoder,
            flow,
            tfbs,
            ups,
            merges,
            head,
        })
    }

    /// Fresh `f32` parameters for `config`, initialized from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Parameters of the encoder and flow estimator.
    pub fn flow_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let n = store.get(id).name();
                n.starts_with("enc.") || n.starts_with("flow.")
            })
            .collect()
    }

    pub fn forward_flow<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, i0: Var, i1: Var) -> Result<FlowOutput> {
        if g.shape(i0) != g.shape(i1) {
            return Err(Error::Input(format!(
                "frames differ in shape: {:?} vs {:?}",
                g.shape(i0),
                g.shape(i1)
            )));
        }
        let n = g.shape(i0)[0];
        // the flow path sees zero-centred frames
        let both = g.concat(&[i0, i1], 0)?;
        let both = g.add_scalar(both, -INPUT_MEAN);
        let (c0, c1) = (g.narrow(both, 0, 0, n)?, g.narrow(both, 0, n, n)?);
        let feats = self.encoder.forward(g, s, both)?;
        let mut enc0 = Vec::with_capacity(4);
        let mut enc1 = Vec::with_capacity(4);
        for f in feats {
            enc0.push(g.narrow(f, 0, 0, n)?);
            enc1.push(g.narrow(f, 0, n, n)?);
        }
        let pyramid = self.flow.forward(g, s, c0, c1, &enc0, &enc1)?;
        Ok(FlowOutput {
            flows: pyramid.finest(),
            pyramid,
            enc0,
            enc1,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, i0: Var, i1: Var) -> Result<ForwardOutput> {
        let fo = self.forward_flow(g, s, i0, i1)?;
        let (o0, o1) = fo.flows;
        let w0 = g.bilinear_warp(i0, o0)?;
        let w1 = g.bilinear_warp(i1, o1)?;

        let mut skips = Vec::with_capacity(4);
        let mut f = self.tfbs[0].forward(g, s, &[i0, i1, w0, w1])?;
        skips.push(f);
        let (mut s0, mut s1) = (o0, o1);
        for k in 0..3 {
            s0 = g.rescale_flow(s0, 0.5)?;
            s1 = g.rescale_flow(s1, 0.5)?;
            let e0 = g.bilinear_warp(fo.enc0[k], s0)?;
            let e1 = g.bilinear_warp(fo.enc1[k], s1)?;
            let down = g.downsample2x(f)?;
            f = self.tfbs[k + 1].forward(g, s, &[down, e0, e1])?;
            skips.push(f);
        }

        let act = self.config.conv_activation;
        let mut d = skips[3];
        for (i, skip) in skips[..3].iter().rev().enumerate() {
            let up = self.ups[i].forward(g, s, d)?;
            let cat = g.concat(&[up, *skip], 1)?;
            d = self.merges[i].forward(g, s, cat)?;
            d = act.apply(g, d);
        }
        let head = self.head.forward(g, s, d)?;
        let syn = synthesize(g, head, w0, w1)?;
        Ok(ForwardOutput {
            frame: syn.frame,
            mask: syn.mask,
            residual: syn.residual,
            warped: (w0, w1),
            flows: fo.flows,
            pyramid: fo.pyramid,
        })
    }

    /// The middle frame between `i0` and `i1` (both `[N,3,H,W]` in `[0,1]`),
    /// clamped to `[0,1]`. Other sizes are reflection-padded up to a
    /// multiple of 16 and cropped back.
    pub fn interpolate(&self, s: &ParamStore<f32>, i0: &Tensor<f32>, i1: &Tensor<f32>) -> Result<Tensor<f32>> {
        if i0.shape() != i1.shape() || i0.shape().len() != 4 || i0.shape()[1] != 3 {
            return Err(Error::Input(format!(
                "frames must both be [N,3,H,W] of one size, got {:?} and {:?}",
                i0.shape(),
                i1.shape()
            )));
        }
        let (h, w) = (i0.shape()[2], i0.shape()[3]);
        if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE {
            return Err(Error::Input(format!("frames must be at least {SIZE_MULTIPLE}x{SIZE_MULTIPLE}, got {h}x{w}")));
        }
        let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE) - h, w.next_multiple_of(SIZE_MULTIPLE) - w);
        let mut g = Graph::inference();
        let mut a = g.constant(i0.clone());
        let mut b = g.constant(i1.clone());
        if ph + pw > 0 {
            a = g.reflection_pad(a, 0, ph, 0, pw)?;
            b = g.reflection_pad(b, 0, ph, 0, pw)?;
        }
        let out = self.forward(&mut g, s, a, b)?;
        g.check_finite(out.frame, "interpolated frame")?;
        let frame = g.crop(out.frame, 0, 0, h, w)?;
        let clamped = g.clamp(frame, 0.0, 1.0);
        Ok(g.tensor(clamped))
    }

    /// `factor − 1` frames evenly spaced between `i0` and `i1`, in temporal
    /// order, by repeated midpoint interpolation.
    pub fn interpolate_recursive(
        &self,
        s: &ParamStore<f32>,
        i0: &Tensor<f32>,
        i1: &Tensor<f32>,
        factor: usize,
    ) -> Result<Vec<Tensor<f32>>> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::Usage(format!("interpolation factor must be 2, 4 or 8, got {factor}")));
        }
        let mid = self.interpolate(s, i0, i1)?;
        if factor == 2 {
            return Ok(vec![mid]);
        }
        let mut out = self.interpolate_recursive(s, i0, &mid, factor / 2)?;
        out.push(mid.clone());
        out.extend(self.interpolate_recursive(s, &mid, i1, factor / 2)?);
        Ok(out)
    }
}
