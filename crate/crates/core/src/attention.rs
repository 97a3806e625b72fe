//! Window attention (WA), cross-scale window attention (CSWA) and the
//! transformer layer and block built on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, Builder, Conv2d, LayerNorm, Linear};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Which attention a transformer layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Window,
    CrossScale,
}

/// Relative-position bias table index for fine token pairs, `[T, T]`.
fn fine_bias_index(m: usize) -> Vec<u32> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for iy in 0..m {
        for ix in 0..m {
            for jy in 0..m {
                for jx in 0..m {
                    let dy = iy + m - 1 - jy;
                    let dx = ix + m - 1 - jx;
                    idx.push((dy * span + dx) as u32);
                }
            }
        }
    }
    idx
}

/// Offset in fine pixels from coarse token `q` to fine token `i` along one
/// axis, shifted into `[0, 4M-1)`.
fn cross_offset(i: usize, q: usize, m: usize) -> usize {
    let off = i as isize - 2 * q as isize + (m / 2) as isize;
    (off + 2 * m as isize - 1) as usize
}

/// Bias table index for (fine token, coarse token) pairs, `[T, T]`.
fn cross_bias_index(m: usize) -> Vec<u32> {
    let span = 4 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for iy in 0..m {
        for ix in 0..m {
            for qy in 0..m {
                for qx in 0..m {
                    idx.push((cross_offset(iy, qy, m) * span + cross_offset(ix, qx, m)) as u32);
                }
            }
        }
    }
    idx
}

/// Expands a `[heads, L]` table into `[heads, T, T]` biases.
fn expand_bias<T: Real>(g: &mut Graph<T>, table: Var, pair_index: &[u32]) -> Var {
    let s = g.shape(table).to_vec();
    let (heads, len) = (s[0], s[1]);
    let t2 = pair_index.len();
    let t = (t2 as f64).sqrt() as usize;
    let mut idx = Vec::with_capacity(heads * t2);
    for h in 0..heads {
        idx.extend(pair_index.iter().map(|&i| (h * len) as u32 + i));
    }
    g.gather_arc(table, Arc::new(idx), vec![heads, t, t])
}

/// `Softmax(QKᵀ/√d + P)·V` for `q, k, v: [B, h, T, d]`, `bias: [h, T, T]`.
pub fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let d = *g.shape(q).last().ok_or_else(|| dim_err!("attention query has no axes"))?;
    let logits = g.matmul_nt(q, k)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    let axis = g.shape(logits).len() - 1;
    let weights = g.softmax(logits, axis)?;
    g.matmul(weights, v)
}

/// Window attention parameters; the cross-scale fields are present for CSWA only.
#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttentionKind,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub wq: Linear,
    pub wkx: Linear,
    pub wvx: Linear,
    pub p_fine: ParamId,
    pub proj: Linear,
    pub cross: Option<CrossScale>,
}

#[derive(Clone, Debug)]
pub struct CrossScale {
    pub wky: Linear,
    pub wvy: Linear,
    pub p_cross: ParamId,
    pub fuse1: Conv2d,
    pub fuse2: Conv2d,
}

impl Attention {
    pub fn new<T: Real>(b: &mut Builder<T>, kind: AttentionKind, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        if kind == AttentionKind::CrossScale && !window.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "cross-scale attention needs a window size divisible by 4, got {window}"
            )));
        }
        let fine_len = (2 * window - 1).pow(2);
        let wq = Linear::new(b, "q", dim, dim, false);
        let wkx = Linear::new(b, "kx", dim, dim, false);
        let wvx = Linear::new(b, "vx", dim, dim, false);
        let p_fine = b.param("p_fine", &[heads, fine_len], Init::Zeros);
        let cross = (kind == AttentionKind::CrossScale).then(|| CrossScale {
            wky: Linear::new(b, "ky", dim, dim, false),
            wvy: Linear::new(b, "vy", dim, dim, false),
            p_cross: b.param("p_cross", &[heads, (4 * window - 1).pow(2)], Init::Zeros),
            fuse1: Conv2d::new(b, "fuse1", 2 * dim, dim, 3, 1),
            fuse2: Conv2d::new(b, "fuse2", dim, dim, 3, 1),
        });
        let proj = Linear::new(b, "proj", dim, dim, true);
        Ok(Attention {
            kind,
            dim,
            heads,
            window,
            wq,
            wkx,
            wvx,
            p_fine,
            proj,
            cross,
        })
    }

    /// `[B, T, C]` tokens to `[B, h, T, d]` heads through a projection.
    fn heads_of<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, lin: &Linear, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let y = lin.forward(g, s, x)?;
        let y = g.reshape(y, &[sh[0], sh[1], self.heads, self.dim / self.heads])?;
        g.permute(y, &[0, 2, 1, 3])
    }

    /// `[B, h, T, d]` back to projected `[B, T, C]` tokens.
    fn merge_heads<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let y = g.permute(x, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[sh[0], sh[2], self.dim])?;
        self.proj.forward(g, s, y)
    }

    /// WA over window tokens `[B, M², C]`.
    pub fn wa_forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, xw: Var) -> Result<Var> {
        self.check_tokens(g, xw)?;
        let q = self.heads_of(g, s, &self.wq, xw)?;
        let k = self.heads_of(g, s, &self.wkx, xw)?;
        let v = self.heads_of(g, s, &self.wvx, xw)?;
        let table = g.param(s, self.p_fine);
        let bias = expand_bias(g, table, &fine_bias_index(self.window));
        let a = attend(g, q, k, v, Some(bias))?;
        self.merge_heads(g, s, a)
    }

    /// Both CSWA attention paths over paired fine windows `xw` and coarse
    /// windows `yw`: returns `(X_X, X_Y)` as `[B, M², C]` tokens.
    pub fn cswa_paths<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, xw: Var, yw: Var) -> Result<(Var, Var)> {
        let cross = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::Usage("cross-scale forward on a window-attention layer".into()))?;
        self.check_tokens(g, xw)?;
        self.check_tokens(g, yw)?;
        if g.shape(xw)[0] != g.shape(yw)[0] {
            return Err(Error::Geometry(format!(
                "fine and coarse window counts differ: {} vs {}",
                g.shape(xw)[0],
                g.shape(yw)[0]
            )));
        }
        let q = self.heads_of(g, s, &self.wq, xw)?;
        let kx = self.heads_of(g, s, &self.wkx, xw)?;
        let vx = self.heads_of(g, s, &self.wvx, xw)?;
        let ky = self.heads_of(g, s, &cross.wky, yw)?;
        let vy = self.heads_of(g, s, &cross.wvy, yw)?;
        let pf = g.param(s, self.p_fine);
        let pf = expand_bias(g, pf, &fine_bias_index(self.window));
        let pc = g.param(s, cross.p_cross);
        let pc = expand_bias(g, pc, &cross_bias_index(self.window));
        let ax = attend(g, q, kx, vx, Some(pf))?;
        let ay = attend(g, q, ky, vy, Some(pc))?;
        let xx = self.merge_heads(g, s, ax)?;
        let xy = self.merge_heads(g, s, ay)?;
        Ok((xx, xy))
    }

    /// `X̂ = X_X + Convs([X_X, X_Y])` on merged `[N, C, H, W]` maps.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, xx: Var, xy: Var) -> Result<Var> {
        let cross = self.cross.as_ref().expect("fuse on cross-scale attention");
        let cat = g.concat(&[xx, xy], 1)?;
        let h = cross.fuse1.forward(g, s, cat)?;
        let h = Activation::LeakyRelu.apply(g, h);
        let h = cross.fuse2.forward(g, s, h)?;
        g.add(xx, h)
    }

    /// Attention on a map whose extents are multiples of the window size.
    pub fn forward_map<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (xw, grid) = g.partition_windows(x, self.window)?;
        match self.kind {
            AttentionKind::Window => {
                let y = self.wa_forward(g, s, xw)?;
                g.merge_windows(y, &grid)
            }
            AttentionKind::CrossScale => {
                let down = g.downsample2x(x)?;
                let (yw, coarse) = g.partition_overlapping(down, self.window)?;
                debug_assert_eq!(coarse.num_windows(), grid.num_windows());
                let (xx, xy) = self.cswa_paths(g, s, xw, yw)?;
                let xx = g.merge_windows(xx, &grid)?;
                let xy = g.merge_windows(xy, &grid)?;
                self.fuse(g, s, xx, xy)
            }
        }
    }

    /// Attention on any `[N, C, H, W]` map: reflection pads up to the window
    /// grid, attends, and crops back.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let padded = g.pad_to_multiple(x, self.window)?;
        let y = self.forward_map(g, s, padded)?;
        if padded == x {
            Ok(y)
        } else {
            g.crop(y, 0, 0, h, w)
        }
    }

    fn check_tokens<T: Real>(&self, g: &Graph<T>, w: Var) -> Result<()> {
        let sh = g.shape(w);
        if sh.len() != 3 || sh[1] != self.window * self.window || sh[2] != self.dim {
            return Err(Error::Config(format!(
                "window tokens {:?} do not match attention (window {}, width {})",
                sh, self.window, self.dim
            )));
        }
        Ok(())
    }

    /// Matrix-product flops per pixel of one forward pass.
    pub fn flops_per_pixel(&self) -> u64 {
        let (c, m2) = (self.dim as u64, (self.window * self.window) as u64);
        match self.kind {
            // Q, K, V and output projections; QKᵀ and AV
            AttentionKind::Window => 2 * (4 * c * c + 2 * m2 * c),
            // adds K_Y, V_Y, a second output projection and a second attention
            AttentionKind::CrossScale => 2 * (7 * c * c + 4 * m2 * c),
        }
    }
}

/// `ẑ = Attn(LN(z)) + z`, `z' = MLP(LN(ẑ)) + ẑ` on `[N, C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub mlp_act: Activation,
}

impl TransformerLayer {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &LayerConfig) -> Result<Self> {
        let c = cfg.dim;
        let hidden = c * cfg.mlp_ratio;
        Ok(TransformerLayer {
            norm1: LayerNorm::new(b, "norm1", c, 1),
            attn: b.scope("attn", |b| Attention::new(b, cfg.kind, c, cfg.heads, cfg.window))?,
            norm2: LayerNorm::new(b, "norm2", c, 1),
            fc1: Conv2d::new(b, "fc1", c, hidden, 1, 1),
            fc2: Conv2d::new(b, "fc2", hidden, c, 1, 1),
            mlp_act: cfg.mlp_act,
        })
    }

    /// The attention branch alone: `Attn(LN(z))`.
    pub fn attention_branch<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        let n = self.norm1.forward(g, s, z)?;
        self.attn.forward(g, s, n)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        let a = self.attention_branch(g, s, z)?;
        let zh = g.add(a, z)?;
        let n = self.norm2.forward(g, s, zh)?;
        let h = self.fc1.forward(g, s, n)?;
        let h = self.mlp_act.apply(g, h);
        let h = self.fc2.forward(g, s, h)?;
        g.add(h, zh)
    }
}

/// Shape of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub kind: AttentionKind,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub mlp_act: Activation,
}

/// Entry convolution, stacked transformer layers, exit convolution.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub entry: Conv2d,
    pub layers: Vec<TransformerLayer>,
    pub exit: Conv2d,
}

impl TransformerBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, in_channels: usize, depth: usize, cfg: &LayerConfig) -> Result<Self> {
        let entry = Conv2d::new(b, "entry", in_channels, cfg.dim, 3, 1);
        let layers = (0..depth)
            .map(|i| b.scope(&format!("layer{i}"), |b| TransformerLayer::new(b, cfg)))
            .collect::<Result<Vec<_>>>()?;
        let exit = Conv2d::new(b, "exit", cfg.dim, cfg.dim, 3, 1);
        Ok(TransformerBlock { entry, layers, exit })
    }

    /// Concatenates `inputs` along channels and runs the block.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, inputs: &[Var]) -> Result<Var> {
        let (h, w) = (g.shape(inputs[0])[2], g.shape(inputs[0])[3]);
        if let Some(bad) = inputs.iter().find(|&&v| g.shape(v)[2..] != [h, w]) {
            return Err(Error::Geometry(format!(
                "transformer block inputs disagree in size: {h}x{w} vs {:?}",
                &g.shape(*bad)[2..]
            )));
        }
        let x = if inputs.len() == 1 { inputs[0] } else { g.concat(inputs, 1)? };
        let mut z = self.entry.forward(g, s, x)?;
        for layer in &self.layers {
            z = layer.forward(g, s, z)?;
        }
        self.exit.forward(g, s, z)
    }
}
