//! Intermediate flow estimation: a coarse convolutional predictor at 1/8
//! resolution refined coarse-to-fine by bilateral local refinement blocks.

use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, Builder, Conv2d};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Added to both vector norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-6;
/// Correlation values are clamped to `±(1 − CORR_MARGIN)`.
pub const CORR_MARGIN: f64 = 1e-6;

impl<T: Real> Graph<T> {
    /// Cosine similarity along the channel axis of two `[N, C, H, W]` maps,
    /// giving `[N, 1, H, W]` in `[−1 + 1e-6, 1 − 1e-6]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || self.shape(b) != sa.as_slice() {
            return Err(dim_err!(
                "cosine_similarity needs equal [N,C,H,W] maps, got {:?} and {:?}",
                sa,
                self.shape(b)
            ));
        }
        let (n, ch, plane) = (sa[0], sa[1], sa[2] * sa[3]);
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let eps = T::from_f64(COSINE_EPS);
        let lim = T::from_f64(1.0 - CORR_MARGIN);
        let len = n * plane;
        let (mut dot, mut na, mut nb) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * plane;
                for p in 0..plane {
                    let (x, y) = (av[base + p], bv[base + p]);
                    dot[i * plane + p] += x * y;
                    na[i * plane + p] += x * x;
                    nb[i * plane + p] += y * y;
                }
            }
        }
        na.iter_mut().for_each(|v| *v = v.sqrt());
        nb.iter_mut().for_each(|v| *v = v.sqrt());
        let raw: Vec<T> = (0..len).map(|k| dot[k] / ((na[k] + eps) * (nb[k] + eps))).collect();
        let out: Vec<T> = raw.iter().map(|&v| v.max(-lim).min(lim)).collect();
        Ok(self.push_op(out, vec![n, 1, sa[2], sa[3]], &[a, b], move |g, sink| {
            for (target, x, y, nx, ny) in [(a, &av, &bv, &na, &nb), (b, &bv, &av, &nb, &na)] {
                if !sink.wants(target) {
                    continue;
                }
                let gx = sink.buf(target);
                for i in 0..n {
                    for p in 0..plane {
                        let k = i * plane + p;
                        if raw[k] <= -lim || raw[k] >= lim {
                            continue;
                        }
                        let (dx, dy) = (nx[k] + eps, ny[k] + eps);
                        let inv = T::one() / (dx * dy);
                        // d/dx of ‖x‖ is x/‖x‖, taken as 0 at the origin
                        let radial = if nx[k] > T::zero() {
                            dot[k] * inv / (dx * nx[k])
                        } else {
                            T::zero()
                        };
                        for c in 0..ch {
                            let idx = (i * ch + c) * plane + p;
                            gx[idx] += g[k] * (y[idx] * inv - radial * x[idx]);
                        }
                    }
                }
            }
        }))
    }

    /// Radius-`r` local correlation between `f_t` and `f_src` sampled around
    /// `x + flow(x)`: `[N, (2r+1)², H, W]`, offsets row-major (dy outer).
    pub fn correlation_volume(&mut self, f_t: Var, f_src: Var, flow: Var, r: usize) -> Result<Var> {
        let st = self.shape(f_t).to_vec();
        if self.shape(f_src) != st.as_slice() || st.len() != 4 || self.shape(flow) != [st[0], 2, st[2], st[3]] {
            return Err(dim_err!(
                "correlation_volume: features {:?}/{:?} and flow {:?} do not agree",
                st,
                self.shape(f_src),
                self.shape(flow)
            ));
        }
        let r = r as isize;
        let mut channels = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
        for dy in -r..=r {
            for dx in -r..=r {
                let off = self.constant(Tensor::from_f64(vec![1, 2, 1, 1], &[dx as f64, dy as f64])?);
                let shifted = self.add(flow, off)?;
                let warped = self.bilinear_warp(f_src, shifted)?;
                channels.push(self.cosine_similarity(f_t, warped)?);
            }
        }
        self.concat(&channels, 1)
    }
}

fn act<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    Activation::LeakyRelu.apply(g, x)
}

/// Strided convolutional predictor of both intermediate flows at 1/8 scale.
#[derive(Clone, Debug)]
pub struct CoarseFlow {
    pub convs: Vec<Conv2d>,
    pub head: Conv2d,
}

impl CoarseFlow {
    pub fn new<T: Real>(b: &mut Builder<T>, width: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = 6;
        for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
            convs.push(Conv2d::new(b, &format!("down{i}"), cin, width, 3, stride));
            cin = width;
        }
        convs.push(Conv2d::new(b, "refine0", width, width, 3, 1));
        let head = Conv2d::zeroed(b, "refine1", width, 4, 3, 1);
        CoarseFlow { convs, head }
    }

    /// `(O_t→0, O_t→1)` at 1/8 resolution, in 1/8-scale pixels.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, i0: Var, i1: Var) -> Result<(Var, Var)> {
        let mut x = g.concat(&[i0, i1], 1)?;
        for c in &self.convs {
            x = c.forward(g, s, x)?;
            x = act(g, x);
        }
        let out = self.head.forward(g, s, x)?;
        Ok((g.narrow(out, 1, 0, 2)?, g.narrow(out, 1, 2, 2)?))
    }
}

/// Per-direction refinement convolutions of a BLRB.
#[derive(Clone, Debug)]
pub struct RefineBranch {
    pub corr: [Conv2d; 2],
    pub flow: [Conv2d; 2],
    pub residual: [Conv2d; 4],
}

impl RefineBranch {
    fn new<T: Real>(b: &mut Builder<T>, feat: usize, width: usize) -> Self {
        let taps = 9;
        RefineBranch {
            corr: [
                Conv2d::new(b, "corr0", taps, width, 3, 1),
                Conv2d::new(b, "corr1", width, width, 3, 1),
            ],
            flow: [
                Conv2d::new(b, "flow0", 2, width, 3, 1),
                Conv2d::new(b, "flow1", width, width, 3, 1),
            ],
            residual: [
                Conv2d::new(b, "res0", 2 * width + 2 * feat, width, 3, 1),
                Conv2d::new(b, "res1", width, width, 3, 1),
                Conv2d::new(b, "res2", width, width, 3, 1),
                Conv2d::zeroed(b, "res3", width, 2, 3, 1),
            ],
        }
    }

    fn stack<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, convs: &[Conv2d], mut x: Var, last_act: bool) -> Result<Var> {
        for (i, c) in convs.iter().enumerate() {
            x = c.forward(g, s, x)?;
            if last_act || i + 1 < convs.len() {
                x = act(g, x);
            }
        }
        Ok(x)
    }

    /// Flow residual from the correlation volume, flow, warped source feature
    /// and blended intermediate feature.
    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, corr: Var, flow: Var, warped: Var, f_t: Var) -> Result<Var> {
        let cf = Self::stack(g, s, &self.corr, corr, true)?;
        let ff = Self::stack(g, s, &self.flow, flow, true)?;
        let cat = g.concat(&[cf, ff, warped, f_t], 1)?;
        Self::stack(g, s, &self.residual, cat, false)
    }
}

/// Bilateral local refinement block.
#[derive(Clone, Debug)]
pub struct Blrb {
    pub feat: usize,
    pub mask: [Conv2d; 2],
    pub branches: [RefineBranch; 2],
}

/// Intermediate values of one BLRB pass.
#[derive(Clone, Copy, Debug)]
pub struct BlrbOutput {
    pub flows: (Var, Var),
    /// Flows after the ×2 rescale, before the residual.
    pub upsampled: (Var, Var),
    pub mask: Var,
    pub f_t: Var,
}

impl Blrb {
    pub fn new<T: Real>(b: &mut Builder<T>, feat: usize, width: usize) -> Self {
        Blrb {
            feat,
            mask: [
                Conv2d::new(b, "mask0", 2 * feat, width, 3, 1),
                Conv2d::new(b, "mask1", width, 1, 3, 1),
            ],
            branches: [
                b.scope("to0", |b| RefineBranch::new(b, feat, width)),
                b.scope("to1", |b| RefineBranch::new(b, feat, width)),
            ],
        }
    }

    /// Refines flows from the previous (half-resolution) level against
    /// features `f0`, `f1` at this level.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        prev: (Var, Var),
        f0: Var,
        f1: Var,
    ) -> Result<BlrbOutput> {
        let fs = g.shape(f0).to_vec();
        if g.shape(f1) != fs.as_slice() || fs[1] != self.feat {
            return Err(dim_err!(
                "BLRB expects two [N,{},H,W] features, got {:?} and {:?}",
                self.feat,
                fs,
                g.shape(f1)
            ));
        }
        let o0 = g.rescale_flow(prev.0, 2.0)?;
        let o1 = g.rescale_flow(prev.1, 2.0)?;
        if g.shape(o0)[2..] != fs[2..] {
            return Err(Error::Geometry(format!(
                "upsampled flow {:?} does not match feature size {:?}",
                &g.shape(o0)[2..],
                &fs[2..]
            )));
        }
        let w0 = g.bilinear_warp(f0, o0)?;
        let w1 = g.bilinear_warp(f1, o1)?;
        let cat = g.concat(&[w0, w1], 1)?;
        let m = self.mask[0].forward(g, s, cat)?;
        let m = act(g, m);
        let m = self.mask[1].forward(g, s, m)?;
        let mask = g.sigmoid(m);
        // D⊙F̃0 + (1−D)⊙F̃1
        let diff = g.sub(w0, w1)?;
        let blend = g.mul(mask, diff)?;
        let f_t = g.add(w1, blend)?;

        let mut refined = [o0, o1];
        for (k, (src, warped)) in [(f0, w0), (f1, w1)].into_iter().enumerate() {
            let corr = g.correlation_volume(f_t, src, refined[k], 1)?;
            let delta = self.branches[k].forward(g, s, corr, refined[k], warped, f_t)?;
            refined[k] = g.add(refined[k], delta)?;
        }
        Ok(BlrbOutput {
            flows: (refined[0], refined[1]),
            upsampled: (o0, o1),
            mask,
            f_t,
        })
    }
}

/// Coarse predictor plus three refinement levels (1/4, 1/2, 1/1).
#[derive(Clone, Debug)]
pub struct FlowEstimator {
    pub coarse: CoarseFlow,
    pub blrbs: Vec<Blrb>,
}

/// Flow pyramid from coarsest (1/8) to full resolution.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    pub levels: Vec<(Var, Var)>,
}

impl FlowPyramid {
    pub fn finest(&self) -> (Var, Var) {
        *self.levels.last().expect("non-empty pyramid")
    }
}

impl FlowEstimator {
    /// `enc_widths` are the encoder widths at 1/2..1/16. The full-resolution
    /// block refines against the frames themselves, with the 1/2 width.
    pub fn new<T: Real>(b: &mut Builder<T>, enc_widths: &[usize; 4]) -> Self {
        let coarse = b.scope("coarse", |b| CoarseFlow::new(b, enc_widths[2]));
        let blrbs = vec![
            b.scope("blrb4", |b| Blrb::new(b, enc_widths[1], enc_widths[1])),
            b.scope("blrb2", |b| Blrb::new(b, enc_widths[0], enc_widths[0])),
            b.scope("blrb1", |b| Blrb::new(b, 3, enc_widths[0])),
        ];
        FlowEstimator { coarse, blrbs }
    }

    /// `enc0[k]`, `enc1[k]` are encoder features at scale `1/2^(k+1)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        i0: Var,
        i1: Var,
        enc0: &[Var],
        enc1: &[Var],
    ) -> Result<FlowPyramid> {
        let mut flows = self.coarse.forward(g, s, i0, i1)?;
        let mut levels = vec![flows];
        let feats = [(enc0[1], enc1[1]), (enc0[0], enc1[0]), (i0, i1)];
        for (blrb, (f0, f1)) in self.blrbs.iter().zip(feats) {
            flows = blrb.forward(g, s, flows, f0, f1)?.flows;
            levels.push(flows);
        }
        Ok(FlowPyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, check_params, random_tensor};
    use crate::tensor::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bilinear_at(t: &Tensor<f64>, b: usize, c: usize, y: f64, x: f64) -> f64 {
        let (h, w) = (t.shape()[2], t.shape()[3]);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let v = |yy, xx| t.at(&[b, c, yy, xx]);
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    }

    #[test]
    fn self_similarity_centre_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_tensor(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let mut g = Graph::<f64>::inference();
        let a = g.constant(f.clone());
        let b = g.constant(f);
        let flow = g.constant(Tensor::zeros(vec![1, 2, 6, 6]));
        let c = g.correlation_volume(a, b, flow, 1).unwrap();
        assert_eq!(g.shape(c), &[1, 9, 6, 6]);
        let centre = &g.value(c)[4 * 36..5 * 36];
        assert!(centre.iter().all(|&v| (v - 1.0).abs() < 1e-5), "{centre:?}");
        assert!(g.value(c).iter().all(|v| v.abs() <= 1.0 - CORR_MARGIN));
    }

    #[test]
    fn orthogonal_features_correlate_to_zero() {
        let mut g = Graph::<f64>::inference();
        let mut ta = Tensor::zeros(vec![1, 2, 3, 3]);
        let mut tb = Tensor::zeros(vec![1, 2, 3, 3]);
        ta.data_mut()[..9].fill(1.0);
        tb.data_mut()[9..].fill(1.0);
        let a = g.constant(ta);
        let b = g.constant(tb);
        let flow = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let c = g.correlation_volume(a, b, flow, 1).unwrap();
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ft = random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let fs = random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let fl = random_tensor(&[1, 2, 8, 8], -1.5, 1.5, &mut rng);
        let mut g = Graph::<f64>::inference();
        let (a, b, f) = (g.constant(ft.clone()), g.constant(fs.clone()), g.constant(fl.clone()));
        let c = g.correlation_volume(a, b, f, 1).unwrap();
        let got = g.tensor(c);
        for y in 0..8 {
            for x in 0..8 {
                let (u, v) = (fl.at(&[0, 0, y, x]), fl.at(&[0, 1, y, x]));
                for (k, (dy, dx)) in (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).enumerate() {
                    let (sy, sx) = (y as f64 + v + dy as f64, x as f64 + u + dx as f64);
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for ch in 0..3 {
                        let p = ft.at(&[0, ch, y, x]);
                        let q = bilinear_at(&fs, 0, ch, sy, sx);
                        dot += p * q;
                        na += p * p;
                        nb += q * q;
                    }
                    let expect = dot / ((na.sqrt() + COSINE_EPS) * (nb.sqrt() + COSINE_EPS));
                    assert!((got.at(&[0, k, y, x]) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn correlation_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ft = random_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let fs = random_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let fl = random_tensor(&[1, 2, 5, 5], -0.9, 0.9, &mut rng);
        let rep = check_inputs(&[ft, fs, fl], 1e-6, None, 3, |g, v| g.correlation_volume(v[0], v[1], v[2], 1)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn cosine_of_zero_vector_is_finite() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![1, 3, 2, 2]));
        let b = g.leaf(Tensor::full(vec![1, 3, 2, 2], 0.5));
        let c = g.cosine_similarity(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(a).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn untrained_coarse_flow_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let cf = CoarseFlow::new(&mut Builder::new(&mut store, &mut rng), 8);
        let mut g = Graph::inference();
        let i0 = g.constant(random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng).cast());
        let i1 = g.constant(random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng).cast());
        let (a, b) = cf.forward(&mut g, &store, i0, i1).unwrap();
        assert_eq!(g.shape(a), &[1, 2, 4, 4]);
        assert!(g.value(a).iter().chain(g.value(b)).all(|&v| v == 0.0));
    }

    fn blrb(feat: usize, seed: u64) -> (ParamStore<f64>, Blrb) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = Blrb::new(&mut Builder::new(&mut store, &mut rng), feat, 4);
        (store, b)
    }

    #[test]
    fn zero_residual_returns_rescaled_flows() {
        let (store, b) = blrb(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::inference();
        let p0 = g.constant(random_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng));
        let p1 = g.constant(random_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng));
        let f0 = g.constant(random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng));
        let f1 = g.constant(random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng));
        let out = b.forward(&mut g, &store, (p0, p1), f0, f1).unwrap();
        assert_eq!(g.value(out.flows.0), g.value(out.upsampled.0));
        assert_eq!(g.value(out.flows.1), g.value(out.upsampled.1));
    }

    #[test]
    fn zero_mask_logit_blends_evenly() {
        let (mut store, b) = blrb(3, 7);
        for c in &b.mask {
            for id in [c.weight, c.bias] {
                let shape = store.get(id).shape().to_vec();
                store.set(id, &Tensor::zeros(shape)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f64>::inference();
        let p = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let t0 = random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let t1 = random_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let (f0, f1) = (g.constant(t0.clone()), g.constant(t1.clone()));
        let out = b.forward(&mut g, &store, (p, p), f0, f1).unwrap();
        assert!(g.value(out.mask).iter().all(|&v| v == 0.5));
        for (i, &v) in g.value(out.f_t).iter().enumerate() {
            assert!((v - 0.5 * (t0.data()[i] + t1.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn blrb_gradient_check() {
        let (mut store, b) = blrb(3, 9);
        // give the zero-initialized heads weights so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for br in &b.branches {
            let id = br.residual[3].weight;
            let t = random_tensor(store.get(id).shape(), -0.1, 0.1, &mut rng);
            store.set(id, &t).unwrap();
        }
        let p0 = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let p1 = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let f0 = random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let f1 = random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let rep = check_params(&store, &ids, 1e-5, Some(40), 11, |g, s| {
            let (a, bb) = (g.constant(p0.clone()), g.constant(p1.clone()));
            let (x, y) = (g.constant(f0.clone()), g.constant(f1.clone()));
            let out = b.forward(g, s, (a, bb), x, y)?;
            g.concat(&[out.flows.0, out.flows.1], 1)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }
}
