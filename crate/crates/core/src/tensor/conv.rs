use super::graph::{Graph, Var};
use super::{gemm, MatRef, Real};
use crate::error::{dim_err, Result};

/// Geometry of a square-kernel 2-D correlation on one image plane set.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `[c, h, w]` into `[c·k·k, ho·wo]` with zero padding.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let n = g.col_cols();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto `[c, h, w]`.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation. `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] {
            return Err(dim_err!("conv2d: input {:?} incompatible with weight {:?}", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err!("conv2d: bias {:?} for {} output channels", self.shape(b), ws[0]));
            }
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride, padding).ok_or_else(|| {
            dim_err!(
                "conv2d: kernel {k} with stride {stride} does not fit input {:?} padded by {padding}",
                xs
            )
        })?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bias = b.map(|b| self.value(b).to_vec());
        let mut out = vec![T::zero(); n * cout * cols];
        let mut col = if is_pointwise(&geom) { Vec::new() } else { vec![T::zero(); rows * cols] };
        for i in 0..n {
            let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let colref = if is_pointwise(&geom) {
                xi
            } else {
                im2col(xi, &geom, &mut col);
                &col
            };
            let dst = &mut out[i * cout * cols..(i + 1) * cout * cols];
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                    chunk.fill(bias[oc]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(MatRef::new(&wv, cout, rows), MatRef::new(colref, rows, cols), dst, beta);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, vec![n, cout, geom.ho, geom.wo], &inputs, move |g, sink| {
            let (want_x, want_w) = (sink.wants(x), sink.wants(w));
            let mut col = if is_pointwise(&geom) { Vec::new() } else { vec![T::zero(); rows * cols] };
            let mut dcol = if want_x && !is_pointwise(&geom) {
                vec![T::zero(); rows * cols]
            } else {
                Vec::new()
            };
            for i in 0..n {
                let gi = &g[i * cout * cols..(i + 1) * cout * cols];
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                if want_w {
                    let colref = if is_pointwise(&geom) {
                        xi
                    } else {
                        im2col(xi, &geom, &mut col);
                        &col
                    };
                    let gw = sink.buf(w);
                    gemm(MatRef::new(gi, cout, cols), MatRef::t(colref, cols, rows), gw, T::one());
                }
                if want_x {
                    if is_pointwise(&geom) {
                        let gx = sink.buf(x);
                        let dst = &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd];
                        gemm(MatRef::t(&wv, rows, cout), MatRef::new(gi, cout, cols), dst, T::one());
                    } else {
                        gemm(MatRef::t(&wv, rows, cout), MatRef::new(gi, cout, cols), &mut dcol, T::zero());
                        let gx = sink.buf(x);
                        col2im(&dcol, &geom, &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                }
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let gb = sink.buf(b);
                    for i in 0..n {
                        for (oc, chunk) in g[i * cout * cols..(i + 1) * cout * cols].chunks(cols).enumerate() {
                            gb[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] without padding).
    ///
    /// `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`; output extent `(H-1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[0] != xs[1] || stride == 0 {
            return Err(dim_err!(
                "conv_transpose2d: input {:?} incompatible with weight {:?} (stride {stride})",
                xs,
                ws
            ));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("conv_transpose2d: bias {:?} for {cout} output channels", self.shape(b)));
            }
        }
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        // The output plane seen as the input of the matching forward conv.
        let geom = ConvGeom::new(cout, ho, wo, k, stride, 0).expect("transpose geometry");
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bias = b.map(|b| self.value(b).to_vec());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut col = vec![T::zero(); rows * cols];
        for i in 0..n {
            let xi = &xv[i * cin * cols..(i + 1) * cin * cols];
            gemm(MatRef::t(&wv, rows, cin), MatRef::new(xi, cin, cols), &mut col, T::zero());
            let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.fill(bias[oc]);
                }
            }
            col2im(&col, &geom, dst);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, vec![n, cout, ho, wo], &inputs, move |g, sink| {
            let mut gcol = vec![T::zero(); rows * cols];
            for i in 0..n {
                let gi = &g[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                im2col(gi, &geom, &mut gcol);
                if sink.wants(x) {
                    let gx = sink.buf(x);
                    let dst = &mut gx[i * cin * cols..(i + 1) * cin * cols];
                    gemm(MatRef::new(&wv, cin, rows), MatRef::new(&gcol, rows, cols), dst, T::one());
                }
                if sink.wants(w) {
                    let xi = &xv[i * cin * cols..(i + 1) * cin * cols];
                    let gw = sink.buf(w);
                    gemm(MatRef::new(xi, cin, cols), MatRef::t(&gcol, cols, rows), gw, T::one());
                }
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let gb = sink.buf(b);
                    for i in 0..n {
                        for (oc, chunk) in g[i * cout * ho * wo..(i + 1) * cout * ho * wo]
                            .chunks(ho * wo)
                            .enumerate()
                        {
                            gb[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }))
    }
}
