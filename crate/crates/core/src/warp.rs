//! Backward warping and the resampling geometry around it.
//!
//! Sampling positions outside the frame are clamped to the border
//! (edge replication), so warps never read undefined memory and never emit NaN.

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Displacement field `[N, 2, H, W]`: channel 0 is horizontal (u), channel 1
/// vertical (v), in pixels of its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T = f32> {
    tensor: Tensor<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(dim_err!("flow field must be [N, 2, H, W], got {:?}", s));
        }
        Ok(FlowField { tensor })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField {
            tensor: Tensor::zeros(vec![n, 2, h, w]),
        }
    }

    /// Constant displacement everywhere.
    pub fn constant(n: usize, h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut t = Tensor::zeros(vec![n, 2, h, w]);
        let plane = h * w;
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val = T::from_f64(if (i / plane).is_multiple_of(2) { u } else { v });
        }
        FlowField { tensor: t }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    /// `(u, v)` at a pixel.
    pub fn at(&self, n: usize, y: usize, x: usize) -> (T, T) {
        (self.tensor.at(&[n, 0, y, x]), self.tensor.at(&[n, 1, y, x]))
    }

    pub fn max_magnitude(&self) -> f64 {
        let (h, w) = (self.height(), self.width());
        let mut best = 0.0f64;
        for n in 0..self.batch() {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = self.at(n, y, x);
                    best = best.max(u.as_f64().hypot(v.as_f64()));
                }
            }
        }
        best
    }

    /// Resamples to `factor` times the resolution and scales displacements by `factor`.
    pub fn rescale(&self, factor: f64) -> Result<Self> {
        let mut g = Graph::inference();
        let f = g.constant(self.tensor.clone());
        let r = g.rescale_flow(f, factor)?;
        Ok(FlowField { tensor: g.tensor(r) })
    }
}

/// Mirror index without repeating the edge sample, repeated periodically for
/// overshoots longer than the extent.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

/// Output size of a resize by `factor`; must be integral.
fn scaled_extent(n: usize, factor: f64) -> Result<usize> {
    let out = n as f64 * factor;
    let rounded = out.round();
    if factor <= 0.0 || (out - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(dim_err!("extent {n} cannot be scaled by {factor}"));
    }
    Ok(rounded as usize)
}

/// Half-pixel-centered source taps along one axis.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// Samples `src` at `(x + u, y + v)` with bilinear interpolation.
    ///
    /// Differentiable in both `src` and `flow`. Where a coordinate is clamped
    /// to the border its derivative with respect to the flow is zero.
    pub fn bilinear_warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (ss, fs) = (self.shape(src).to_vec(), self.shape(flow).to_vec());
        if ss.len() != 4 || fs.len() != 4 || fs[1] != 2 || ss[0] != fs[0] || ss[2..] != fs[2..] {
            return Err(dim_err!(
                "bilinear_warp: source {:?} and flow {:?} must be [N,C,H,W] and [N,2,H,W] of equal size",
                ss,
                fs
            ));
        }
        let (n, ch, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let plane = h * w;
        let sv = self.value_arc(src);
        let fv = self.value_arc(flow);

        // Per-pixel taps, shared by all channels.
        struct Tap<T> {
            x0: usize,
            x1: usize,
            y0: usize,
            y1: usize,
            wx: T,
            wy: T,
            free_x: bool,
            free_y: bool,
        }
        let hi_x: T = T::from_f64((w - 1) as f64);
        let hi_y: T = T::from_f64((h - 1) as f64);
        let mut taps = Vec::with_capacity(n * plane);
        for b in 0..n {
            let fu = &fv[(b * 2) * plane..(b * 2 + 1) * plane];
            let fvv = &fv[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let px = T::from_f64(x as f64) + fu[i];
                    let py = T::from_f64(y as f64) + fvv[i];
                    let cx = px.max(T::zero()).min(hi_x);
                    let cy = py.max(T::zero()).min(hi_y);
                    let x0 = cx.floor().as_f64() as usize;
                    let y0 = cy.floor().as_f64() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    taps.push(Tap {
                        x0,
                        x1,
                        y0,
                        y1,
                        wx: cx - T::from_f64(x0 as f64),
                        wy: cy - T::from_f64(y0 as f64),
                        free_x: px > T::zero() && px < hi_x,
                        free_y: py > T::zero() && py < hi_y,
                    });
                }
            }
        }
        let mut out = vec![T::zero(); n * ch * plane];
        for b in 0..n {
            for c in 0..ch {
                let s = &sv[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                let o = &mut out[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                for (i, t) in taps[b * plane..(b + 1) * plane].iter().enumerate() {
                    let top = (T::one() - t.wx) * s[t.y0 * w + t.x0] + t.wx * s[t.y0 * w + t.x1];
                    let bot = (T::one() - t.wx) * s[t.y1 * w + t.x0] + t.wx * s[t.y1 * w + t.x1];
                    o[i] = (T::one() - t.wy) * top + t.wy * bot;
                }
            }
        }
        Ok(self.push_op(out, ss.clone(), &[src, flow], move |g, sink| {
            if sink.wants(src) {
                let gs = sink.buf(src);
                for b in 0..n {
                    for c in 0..ch {
                        let base = (b * ch + c) * plane;
                        for (i, t) in taps[b * plane..(b + 1) * plane].iter().enumerate() {
                            let gv = g[base + i];
                            let (ax, ay) = (T::one() - t.wx, T::one() - t.wy);
                            gs[base + t.y0 * w + t.x0] += gv * ax * ay;
                            gs[base + t.y0 * w + t.x1] += gv * t.wx * ay;
                            gs[base + t.y1 * w + t.x0] += gv * ax * t.wy;
                            gs[base + t.y1 * w + t.x1] += gv * t.wx * t.wy;
                        }
                    }
                }
            }
            if sink.wants(flow) {
                let gf = sink.buf(flow);
                for b in 0..n {
                    for (i, t) in taps[b * plane..(b + 1) * plane].iter().enumerate() {
                        let (mut du, mut dv) = (T::zero(), T::zero());
                        for c in 0..ch {
                            let base = (b * ch + c) * plane;
                            let s = &sv[base..base + plane];
                            let gv = g[base + i];
                            let (s00, s01) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                            let (s10, s11) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                            du += gv * ((T::one() - t.wy) * (s01 - s00) + t.wy * (s11 - s10));
                            dv += gv * ((T::one() - t.wx) * (s10 - s00) + t.wx * (s11 - s01));
                        }
                        if t.free_x {
                            gf[(b * 2) * plane + i] += du;
                        }
                        if t.free_y {
                            gf[(b * 2 + 1) * plane + i] += dv;
                        }
                    }
                }
            }
        }))
    }

    /// Mirror padding of the last two axes, without repeating the edge pixel.
    pub fn reflection_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(dim_err!("reflection_pad needs at least 2 axes, got {:?}", shape));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if top.max(bottom) >= h || left.max(right) >= w {
            return Err(dim_err!(
                "reflection pad ({top},{bottom},{left},{right}) must be smaller than extents {h}x{w}"
            ));
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let planes: usize = shape[..r - 2].iter().product();
        let mut index = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in 0..ho {
                let sy = reflect(y as isize - top as isize, h);
                for xx in 0..wo {
                    let sx = reflect(xx as isize - left as isize, w);
                    index.push((p * h * w + sy * w + sx) as u32);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Ok(self.gather_arc(x, Arc::new(index), out_shape))
    }

    /// Crops the last two axes to `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err!("crop needs at least 2 axes"));
        }
        let t = self.narrow(x, r - 2, y0, h)?;
        self.narrow(t, r - 1, x0, w)
    }

    /// Bilinear resize of the last two axes (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || out_h == 0 || out_w == 0 {
            return Err(dim_err!("resize_bilinear: bad target {out_h}x{out_w} for {:?}", shape));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let ty = linear_taps(h, out_h);
        let tx = linear_taps(w, out_w);
        let mut index = Vec::with_capacity(planes * out_h * out_w);
        let mut weights = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let base = p * h * w;
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    index.push([
                        (base + y0 * w + x0) as u32,
                        (base + y0 * w + x1) as u32,
                        (base + y1 * w + x0) as u32,
                        (base + y1 * w + x1) as u32,
                    ]);
                    weights.push([
                        T::from_f64((1.0 - wy) * (1.0 - wx)),
                        T::from_f64((1.0 - wy) * wx),
                        T::from_f64(wy * (1.0 - wx)),
                        T::from_f64(wy * wx),
                    ]);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        Ok(self.sample4(x, Arc::new(index), Arc::new(weights), out_shape))
    }

    /// Resamples a flow by `factor` and multiplies its displacements by `factor`.
    pub fn rescale_flow(&mut self, flow: Var, factor: f64) -> Result<Var> {
        let shape = self.shape(flow).to_vec();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(dim_err!("rescale_flow expects [N,2,H,W], got {:?}", shape));
        }
        if factor <= 0.0 {
            return Err(dim_err!("rescale factor must be positive, got {factor}"));
        }
        if factor == 1.0 {
            return Ok(flow);
        }
        let oh = scaled_extent(shape[2], factor)?;
        let ow = scaled_extent(shape[3], factor)?;
        let resized = self.resize_bilinear(flow, oh, ow)?;
        Ok(self.scale(resized, factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random(&[2, 3, 7, 5], &mut rng, -4.0, 4.0).cast::<f32>();
        let mut g = Graph::<f32>::inference();
        let s = g.constant(src.clone());
        let f = g.constant(Tensor::zeros(vec![2, 2, 7, 5]));
        let out = g.bilinear_warp(s, f).unwrap();
        assert_eq!(g.value(out), src.data());
    }

    #[test]
    fn ramp_shift_by_one() {
        // f(x, y) = x, u = 1 -> x + 1 away from the right border
        let (h, w) = (4, 6);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let mut g = Graph::<f64>::inference();
        let s = g.constant(Tensor::new(vec![1, 1, h, w], data).unwrap());
        let f = g.constant(FlowField::constant(1, h, w, 1.0, 0.0).into_tensor());
        let out = g.bilinear_warp(s, f).unwrap();
        let o = g.value(out);
        for y in 0..h {
            for x in 0..w - 1 {
                assert_eq!(o[y * w + x], x as f64 + 1.0);
            }
        }
    }

    #[test]
    fn far_outside_flow_replicates_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random(&[1, 2, 5, 5], &mut rng, 0.0, 1.0);
        let mut g = Graph::<f64>::inference();
        let s = g.constant(src.clone());
        let f = g.constant(FlowField::constant(1, 5, 5, 10.0, -10.0).into_tensor());
        let out = g.bilinear_warp(s, f).unwrap();
        let t = g.tensor(out);
        assert!(t.is_finite());
        // every sample lands on the top-right corner
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(t.at(&[0, c, y, x]), src.at(&[0, c, 0, 4]));
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
        let y = random(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
        let fl = random(&[1, 2, 6, 6], &mut rng, -2.0, 2.0);
        let (a, b) = (0.7, -1.3);
        let mut g = Graph::<f64>::inference();
        let (xv, yv, fv) = (g.constant(x), g.constant(y), g.constant(fl));
        let ax = g.scale(xv, a);
        let by = g.scale(yv, b);
        let comb = g.add(ax, by).unwrap();
        let lhs = g.bilinear_warp(comb, fv).unwrap();
        let wx = g.bilinear_warp(xv, fv).unwrap();
        let wy = g.bilinear_warp(yv, fv).unwrap();
        let awx = g.scale(wx, a);
        let bwy = g.scale(wy, b);
        let rhs = g.add(awx, bwy).unwrap();
        assert!(g.tensor(lhs).max_abs_diff(&g.tensor(rhs)) < 1e-6);
    }

    #[test]
    fn warp_rejects_size_mismatch() {
        let mut g = Graph::<f32>::inference();
        let s = g.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let f = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        assert_eq!(g.bilinear_warp(s, f).unwrap_err().category(), "dimension");
    }

    #[test]
    fn reflection_pad_row() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let p = g.reflection_pad(x, 0, 0, 1, 1).unwrap();
        assert_eq!(g.value(p), &[2.0, 1.0, 2.0, 3.0, 2.0]);
        let same = g.reflection_pad(x, 0, 0, 0, 0).unwrap();
        assert_eq!(g.value(same), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reflection_pad_corner_block_mirrors_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = random(&[4, 4], &mut rng, 0.0, 1.0);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(src.clone());
        let p = g.reflection_pad(x, 2, 2, 2, 2).unwrap();
        let t = g.tensor(p);
        assert_eq!(t.shape(), &[8, 8]);
        // padded (i, j) for i, j < 2 mirrors source (2 - i, 2 - j)
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(t.at(&[i, j]), src.at(&[2 - i, 2 - j]));
                assert_eq!(t.at(&[7 - i, 7 - j]), src.at(&[1 + i, 1 + j]));
            }
        }
    }

    #[test]
    fn reflection_pad_too_large() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(vec![3, 3]));
        assert!(g.reflection_pad(x, 3, 0, 0, 0).is_err());
    }

    #[test]
    fn rescale_identity_and_constant() {
        let f = FlowField::<f64>::constant(1, 8, 8, 4.0, -2.0);
        assert_eq!(f.rescale(1.0).unwrap(), f);
        let half = f.rescale(0.5).unwrap();
        assert_eq!(half.tensor().shape(), &[1, 2, 4, 4]);
        assert_eq!(half, FlowField::constant(1, 4, 4, 2.0, -1.0));
    }

    #[test]
    fn rescale_round_trip_smooth_flow() {
        // slopes stay below 0.08 px/px, where bilinear round trips are accurate
        let (h, w) = (64, 64);
        let mut t = Tensor::<f64>::zeros(vec![1, 2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
                t.data_mut()[y * w + x] = 1.5 * (std::f64::consts::PI * fx).sin() + fy;
                t.data_mut()[h * w + y * w + x] = 1.2 * (std::f64::consts::PI * fy).cos() - fx;
            }
        }
        let f = FlowField::new(t).unwrap();
        let back = f.rescale(0.5).unwrap().rescale(2.0).unwrap();
        let err = back.tensor().max_abs_diff(f.tensor());
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn rescale_rejects_non_integral() {
        let f = FlowField::<f32>::zeros(1, 5, 5);
        assert!(f.rescale(0.5).is_err());
        assert!(f.rescale(-1.0).is_err());
    }
}
