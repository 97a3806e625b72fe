use std::sync::Arc;

use super::graph::{Graph, Var};
use super::{c, gemm, numel, strides, MatRef, Real};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

/// Output shape plus per-operand strides (0 on broadcast axes).
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let (ta, tb) = (strides(&pa), strides(&pb));
    let mut out = Vec::with_capacity(r);
    let mut sa = Vec::with_capacity(r);
    let mut sb = Vec::with_capacity(r);
    for i in 0..r {
        let (da, db) = (pa[i], pb[i]);
        let d = match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return None,
        };
        out.push(d);
        sa.push(if da == 1 && d != 1 { 0 } else { ta[i] });
        sb.push(if db == 1 && d != 1 { 0 } else { tb[i] });
    }
    Some(Broadcast { out, sa, sb })
}

/// Calls `f(out_index, a_offset, b_offset)` in row-major output order.
fn for_each_pair(bc: &Broadcast, mut f: impl FnMut(usize, usize, usize)) {
    let r = bc.out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = bc.out[r - 1];
    let (la, lb) = (bc.sa[r - 1], bc.sb[r - 1]);
    let rows = numel(&bc.out[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..rows {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..last {
            f(o, ia, ib);
            o += 1;
            ia += la;
            ib += lb;
        }
        // odometer over the leading axes
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            oa += bc.sa[ax];
            ob += bc.sb[ax];
            if idx[ax] < bc.out[ax] {
                break;
            }
            oa -= bc.sa[ax] * idx[ax];
            ob -= bc.sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, op: Bin) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        if sa == sb {
            let out: Vec<T> = match op {
                Bin::Add => av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect(),
                Bin::Sub => av.iter().zip(bv.iter()).map(|(&x, &y)| x - y).collect(),
                Bin::Mul => av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect(),
                Bin::Div => av.iter().zip(bv.iter()).map(|(&x, &y)| x / y).collect(),
            };
            return Ok(self.push_op(out, sa, &[a, b], move |g, sink| {
                match op {
                    Bin::Add => {
                        sink.add(a, g);
                        sink.add(b, g);
                    }
                    Bin::Sub => {
                        sink.add(a, g);
                        if sink.wants(b) {
                            let gb = sink.buf(b);
                            gb.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                        }
                    }
                    Bin::Mul => {
                        if sink.wants(a) {
                            let ga = sink.buf(a);
                            for i in 0..g.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                        if sink.wants(b) {
                            let gb = sink.buf(b);
                            for i in 0..g.len() {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    }
                    Bin::Div => {
                        if sink.wants(a) {
                            let ga = sink.buf(a);
                            for i in 0..g.len() {
                                ga[i] += g[i] / bv[i];
                            }
                        }
                        if sink.wants(b) {
                            let gb = sink.buf(b);
                            for i in 0..g.len() {
                                gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                            }
                        }
                    }
                }
            }));
        }

        let bc = broadcast(&sa, &sb)
            .ok_or_else(|| dim_err!("cannot broadcast shapes {:?} and {:?}", sa, sb))?;
        let mut out = vec![T::zero(); numel(&bc.out)];
        for_each_pair(&bc, |o, ia, ib| {
            let (x, y) = (av[ia], bv[ib]);
            out[o] = match op {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
            };
        });
        let out_shape = bc.out.clone();
        Ok(self.push_op(out, out_shape, &[a, b], move |g, sink| {
            let (wa, wb) = (sink.wants(a), sink.wants(b));
            let mut ga = if wa { vec![T::zero(); av.len()] } else { Vec::new() };
            let mut gb = if wb { vec![T::zero(); bv.len()] } else { Vec::new() };
            for_each_pair(&bc, |o, ia, ib| {
                let go = g[o];
                let (da, db) = match op {
                    Bin::Add => (go, go),
                    Bin::Sub => (go, -go),
                    Bin::Mul => (go * bv[ib], go * av[ia]),
                    Bin::Div => (go / bv[ib], -go * av[ia] / (bv[ib] * bv[ib])),
                };
                if wa {
                    ga[ia] += da;
                }
                if wb {
                    gb[ib] += db;
                }
            });
            if wa {
                sink.add_owned(a, ga);
            }
            if wb {
                sink.add_owned(b, gb);
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value_arc(x);
        let y = Arc::new(xv.iter().map(|&v| f(v)).collect::<Vec<_>>());
        let yc = Arc::clone(&y);
        let shape = self.shape(x).to_vec();
        self.push_shared(y, shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for i in 0..g.len() {
                gx[i] += g[i] * df(xv[i], yc[i]);
            }
        })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k: T = c(k);
        self.unary(x, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let k: T = c(k);
        self.unary(x, move |v| v + k, |_, _| T::one())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `k - x`
    pub fn rsub_scalar(&mut self, k: f64, x: Var) -> Var {
        let k: T = c(k);
        self.unary(x, move |v| k - v, |_, _| -T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v, _| v + v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| c::<T>(0.5) / y)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let pt: T = c(p);
        self.unary(
            x,
            move |v| v.powf(pt),
            move |v, _| {
                if v == T::zero() {
                    if p >= 1.0 {
                        T::zero()
                    } else {
                        T::infinity()
                    }
                } else {
                    pt * v.powf(pt - T::one())
                }
            },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v, _| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s: T = c(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            move |v, _| if v > T::zero() { T::one() } else { s },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (c(lo), c(hi));
        self.unary(
            x,
            move |v| v.max(l).min(h),
            move |v, _| if v > l && v < h { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.push_op(vec![s], vec![], &[x], move |g, sink| {
            let g0 = g[0];
            sink.buf(x).iter_mut().for_each(|v| *v += g0);
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push_op(out, out_shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err!("axis {axis} out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Same data, new shape. Shares the forward buffer.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(old) != numel(shape) {
            return Err(dim_err!("cannot reshape {:?} into {:?}", old, shape));
        }
        let v = self.value_arc(x);
        Ok(self.push_shared(v, shape.to_vec(), &[x], move |g, sink| sink.add(x, g)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {:?} for shape {:?}", perm, shape));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let index = Arc::new(strided_index(&out_shape, &src_strides));
        Ok(self.gather_arc(x, index, out_shape))
    }

    /// `out[i] = x[index[i]]`; gradients scatter-add back.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, out_shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if index.len() != numel(&out_shape) {
            return Err(dim_err!(
                "gather index has {} entries for output shape {:?}",
                index.len(),
                out_shape
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(dim_err!("gather index {bad} out of range for {n} elements"));
        }
        Ok(self.gather_arc(x, Arc::new(index), out_shape))
    }

    pub(crate) fn gather_arc(&mut self, x: Var, index: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = index.iter().map(|&i| xv[i as usize]).collect();
        self.push_op(out, out_shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for (&i, &gv) in index.iter().zip(g) {
                gx[i as usize] += gv;
            }
        })
    }

    /// `out[i] = Σ_k weights[i][k] · x[index[i][k]]` with fixed weights.
    pub(crate) fn sample4(
        &mut self,
        x: Var,
        index: Arc<Vec<[u32; 4]>>,
        weights: Arc<Vec<[T; 4]>>,
        out_shape: Vec<usize>,
    ) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = index
            .iter()
            .zip(weights.iter())
            .map(|(ix, w)| (0..4).map(|k| w[k] * xv[ix[k] as usize]).sum())
            .collect();
        self.push_op(out, out_shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for ((ix, w), &gv) in index.iter().zip(weights.iter()).zip(g) {
                for k in 0..4 {
                    gx[ix[k] as usize] += w[k] * gv;
                }
            }
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(dim_err!(
                    "concat along axis {axis}: shape {:?} does not match {:?}",
                    s,
                    first
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first;
        out_shape[axis] = total;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let extents: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        let mut start = 0;
        for (&x, &ext) in xs.iter().zip(&extents) {
            let xv = self.value(x);
            for o in 0..outer {
                let src = &xv[o * ext * inner..(o + 1) * ext * inner];
                let dst = (o * total + start) * inner;
                out[dst..dst + ext * inner].copy_from_slice(src);
            }
            start += ext;
        }
        let inputs = xs.to_vec();
        Ok(self.push_op(out, out_shape, xs, move |g, sink| {
            let mut start = 0;
            for (&x, &ext) in inputs.iter().zip(&extents) {
                if sink.wants(x) {
                    let gx = sink.buf(x);
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        gx[o * ext * inner..(o + 1) * ext * inner]
                            .iter_mut()
                            .zip(&g[src..src + ext * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                start += ext;
            }
        }))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                shape
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_op(out, out_shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                gx[s..s + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(d, &v)| *d += v);
            }
        }))
    }

    /// Batched product of `[.., m, k]` and `[.., k, n]`.
    ///
    /// Batch axes must match exactly, or one operand must be a plain matrix
    /// shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a·bᵀ` for `a: [.., m, k]`, `b: [.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || {
            dim_err!(
                "matmul{} shape mismatch: {:?} x {:?}",
                if b_t { "_nt" } else { "" },
                sa,
                sb
            )
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if b_t {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch = numel(&batch_shape);
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());

        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let mut out = vec![T::zero(); batch * m * n];
        fn operand<U>(data: &[U], k: usize, n: usize, transposed: bool) -> MatRef<'_, U> {
            if transposed {
                MatRef::t(data, k, n)
            } else {
                MatRef::new(data, k, n)
            }
        }
        let bmat = |data| operand(data, k, n, b_t);
        if !a_batched && b_batched {
            for i in 0..batch {
                gemm(
                    MatRef::new(&av, m, k),
                    bmat(&bv[i * k * n..(i + 1) * k * n]),
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        } else if a_batched && !b_batched {
            // fold the batch into the row extent
            gemm(
                MatRef::new(&av, batch * m, k),
                bmat(&bv),
                &mut out,
                T::zero(),
            );
        } else {
            for i in 0..batch {
                gemm(
                    MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k),
                    bmat(&bv[i * k * n..(i + 1) * k * n]),
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        self.count_matmul(m, k, n, batch);

        let mut out_shape = batch_shape;
        out_shape.extend_from_slice(&[m, n]);
        Ok(self.push_op(out, out_shape, &[a, b], move |g, sink| {
            let a_off = |i: usize| if a_batched { i * m * k } else { 0 };
            let b_off = |i: usize| if b_batched { i * k * n } else { 0 };
            if sink.wants(a) {
                let ga = sink.buf(a);
                if a_batched && !b_batched {
                    // dA = G·Bᵀ (or G·B when b is stored transposed)
                    let bm = if b_t {
                        MatRef::new(&bv[..], n, k)
                    } else {
                        MatRef::t(&bv[..], n, k)
                    };
                    gemm(MatRef::new(g, batch * m, n), bm, ga, T::one());
                } else {
                    for i in 0..batch {
                        let bs = &bv[b_off(i)..b_off(i) + k * n];
                        let bm = if b_t {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::t(bs, n, k)
                        };
                        let go = &g[i * m * n..(i + 1) * m * n];
                        let dst = &mut ga[a_off(i)..a_off(i) + m * k];
                        gemm(MatRef::new(go, m, n), bm, dst, T::one());
                    }
                }
            }
            if sink.wants(b) {
                let gb = sink.buf(b);
                if a_batched && !b_batched {
                    if b_t {
                        // dB = Gᵀ·A over the folded batch
                        gemm(MatRef::t(g, n, batch * m), MatRef::new(&av, batch * m, k), gb, T::one());
                    } else {
                        gemm(MatRef::t(&av, k, batch * m), MatRef::new(g, batch * m, n), gb, T::one());
                    }
                } else {
                    for i in 0..batch {
                        let asl = &av[a_off(i)..a_off(i) + m * k];
                        let go = &g[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[b_off(i)..b_off(i) + k * n];
                        if b_t {
                            gemm(MatRef::t(go, n, m), MatRef::new(asl, m, k), dst, T::one());
                        } else {
                            gemm(MatRef::t(asl, k, m), MatRef::new(go, m, n), dst, T::one());
                        }
                    }
                }
            }
        }))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| xv[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..n {
                    let e = (xv[at(k)] - mx).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    y[at(k)] /= s;
                }
            }
        }
        let y = Arc::new(y);
        let yc = Arc::clone(&y);
        Ok(self.push_shared(y, shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g[at(k)] * yc[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] += yc[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }))
    }

    /// Normalizes along `axis` then applies a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("layer_norm axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} do not match channel extent {n}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x);
        let gv = self.value_arc(gamma);
        let bv = self.value(beta);
        let eps: T = c(eps);
        let nt: T = c(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| xv[at(k)]).sum::<T>() / nt;
                let var = (0..n).map(|k| (xv[at(k)] - mean).powi(2)).sum::<T>() / nt;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for k in 0..n {
                    let h = (xv[at(k)] - mean) * r;
                    xhat[at(k)] = h;
                    y[at(k)] = h * gv[k] + bv[k];
                }
            }
        }
        Ok(self.push_op(y, shape, &[x, gamma, beta], move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for k in 0..n {
                            let d = g[at(k)] * gv[k];
                            s1 += d;
                            s2 += d * xhat[at(k)];
                        }
                        let r = rstd[o * inner + i] / nt;
                        for k in 0..n {
                            let d = g[at(k)] * gv[k];
                            gx[at(k)] += r * (nt * d - s1 - xhat[at(k)] * s2);
                        }
                    }
                }
            }
            if sink.wants(gamma) {
                let gg = sink.buf(gamma);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gg[k] += (0..inner).map(|i| g[base + i] * xhat[base + i]).sum::<T>();
                    }
                }
            }
            if sink.wants(beta) {
                let gb = sink.buf(beta);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gb[k] += g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
            }
        }))
    }

    /// Averages each 2×2 block of the last two axes.
    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 2].is_multiple_of(2) || !shape[r - 1].is_multiple_of(2) {
            return Err(dim_err!("downsample2x needs even spatial extents, got {:?}", shape));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let q: T = c(0.25);
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Ok(self.push_op(out, out_shape, &[x], move |g, sink| {
            let gx = sink.buf(x);
            for p in 0..planes {
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = g[(p * ho + y) * wo + xx] * q;
                        let i = p * h * w + 2 * y * w + 2 * xx;
                        gx[i] += v;
                        gx[i + 1] += v;
                        gx[i + w] += v;
                        gx[i + w + 1] += v;
                    }
                }
            }
        }))
    }
}

/// Source offsets for reading a strided view in row-major order.
pub(crate) fn strided_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<u32> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let r = out_shape.len();
    if r == 0 {
        out.push(0);
        return out;
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off as u32);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(v: T) -> T {
    let u = c::<T>(GELU_K) * (v + c::<T>(GELU_A) * v * v * v);
    c::<T>(0.5) * v * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(v: T, _y: T) -> T {
    let u = c::<T>(GELU_K) * (v + c::<T>(GELU_A) * v * v * v);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * v * v);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * v * (T::one() - t * t) * du
}
