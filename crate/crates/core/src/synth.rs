//! Synthetic frame triplets with exact intermediate flows, and image metrics.
//!
//! A scene is a textured background translating at constant velocity plus a
//! few anti-aliased shapes that translate and rotate. Every frame is rendered
//! analytically, so the middle frame and both intermediate flows are exact.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io;
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Motion difficulty, by maximum frame-to-frame displacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionLevel {
    Easy,
    Medium,
    Hard,
    Extreme,
}

impl MotionLevel {
    pub const ALL: [MotionLevel; 4] = [MotionLevel::Easy, MotionLevel::Medium, MotionLevel::Hard, MotionLevel::Extreme];

    /// `(min, max)` displacement in pixels between the two input frames.
    pub fn range(self) -> (f64, f64) {
        match self {
            MotionLevel::Easy => (0.0, 2.0),
            MotionLevel::Medium => (2.0, 6.0),
            MotionLevel::Hard => (6.0, 12.0),
            MotionLevel::Extreme => (12.0, 24.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionLevel::Easy => "easy",
            MotionLevel::Medium => "medium",
            MotionLevel::Hard => "hard",
            MotionLevel::Extreme => "extreme",
        }
    }
}

impl fmt::Display for MotionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionLevel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown motion level {s:?}")))
    }
}

/// Two input frames, the true middle frame, and the true flows from the
/// middle frame to each input.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    /// `[3,H,W]` in `[0,1]`.
    pub i0: Tensor<f32>,
    pub it: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub flow_t0: FlowField<f32>,
    pub flow_t1: FlowField<f32>,
    /// `[H,W]`, 1 where the middle-frame pixel is visible, unblended, and
    /// inside the frame at both ends.
    pub valid: Tensor<f32>,
    pub level: MotionLevel,
    pub seed: u64,
}

impl FrameTriplet {
    pub fn height(&self) -> usize {
        self.i0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.i0.shape()[2]
    }

    /// Swaps the input frames; the flows swap with them.
    pub fn time_reversed(&self) -> Self {
        FrameTriplet {
            i0: self.i1.clone(),
            i1: self.i0.clone(),
            flow_t0: self.flow_t1.clone(),
            flow_t1: self.flow_t0.clone(),
            ..self.clone()
        }
    }

    /// Mirrors left-right; horizontal flow components change sign.
    pub fn flipped(&self) -> Self {
        let flip_img = |t: &Tensor<f32>| flip_last_axis(t, None);
        let flip_flow = |f: &FlowField<f32>| FlowField::new(flip_last_axis(f.tensor(), Some(0))).expect("flow shape");
        FrameTriplet {
            i0: flip_img(&self.i0),
            it: flip_img(&self.it),
            i1: flip_img(&self.i1),
            flow_t0: flip_flow(&self.flow_t0),
            flow_t1: flip_flow(&self.flow_t1),
            valid: flip_img(&self.valid),
            ..self.clone()
        }
    }

    /// A `size×size` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if y0 + size > h || x0 + size > w {
            return Err(dim_err!("crop {size}x{size} at ({y0},{x0}) exceeds {h}x{w}"));
        }
        let c = |t: &Tensor<f32>| crop_last2(t, y0, x0, size);
        Ok(FrameTriplet {
            i0: c(&self.i0),
            it: c(&self.it),
            i1: c(&self.i1),
            flow_t0: FlowField::new(c(self.flow_t0.tensor()))?,
            flow_t1: FlowField::new(c(self.flow_t1.tensor()))?,
            valid: c(&self.valid),
            ..self.clone()
        })
    }
}

fn flip_last_axis(t: &Tensor<f32>, negate_plane: Option<usize>) -> Tensor<f32> {
    let w = *t.shape().last().expect("non-scalar");
    let h = t.shape()[t.shape().len() - 2];
    let mut out = t.clone();
    for (r, row) in out.data_mut().chunks_mut(w).enumerate() {
        row.reverse();
        if let Some(p) = negate_plane {
            if (r / h) % 2 == p {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    out
}

fn crop_last2(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let nd = t.shape().len();
    let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let planes = t.numel() / (h * w);
    let mut data = Vec::with_capacity(planes * size * size);
    for p in 0..planes {
        for y in y0..y0 + size {
            let start = (p * h + y) * w + x0;
            data.extend_from_slice(&t.data()[start..start + size]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[nd - 2] = size;
    shape[nd - 1] = size;
    Tensor::new(shape, data).expect("crop shape")
}

/// Stacks `[C,H,W]` tensors into `[N,C,H,W]`.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Usage("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(dim_err!("cannot stack {:?} with {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

const WAVES: usize = 4;
const WAVELENGTH: std::ops::Range<f64> = 6.0..28.0;
const BASE_RANGE: std::ops::Range<f64> = 0.15..0.85;

/// Colour texture: a few plane waves per channel over a base colour.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let base = [0, 1, 2].map(|_| rng.gen_range(BASE_RANGE));
        let waves = (0..WAVES)
            .map(|_| {
                let wavelength = rng.gen_range(WAVELENGTH);
                let ang: f64 = rng.gen_range(0.0..2.0 * PI);
                let k = [ang.cos() * 2.0 * PI / wavelength, ang.sin() * 2.0 * PI / wavelength];
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = [0, 1, 2].map(|_| rng.gen_range(-amplitude..amplitude));
                (k, phase, amp)
            })
            .collect();
        Texture { base, waves }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, amp) in &self.waves {
            let s = (k[0] * x + k[1] * y + phase).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Disc { r: f64 },
    Rect { hw: f64, hh: f64 },
}

#[derive(Clone, Debug)]
struct Shape {
    outline: Outline,
    texture: Texture,
    /// Pose at the first frame.
    centre: [f64; 2],
    angle: f64,
    velocity: [f64; 2],
    spin: f64,
}

impl Shape {
    fn pose(&self, t: f64) -> ([f64; 2], f64) {
        (
            [self.centre[0] + t * self.velocity[0], self.centre[1] + t * self.velocity[1]],
            self.angle + t * self.spin,
        )
    }

    fn local(&self, t: f64, x: f64, y: f64) -> [f64; 2] {
        let (c, a) = self.pose(t);
        let (dx, dy) = (x - c[0], y - c[1]);
        let (s, co) = a.sin_cos();
        [co * dx + s * dy, -s * dx + co * dy]
    }

    fn world(&self, t: f64, l: [f64; 2]) -> [f64; 2] {
        let (c, a) = self.pose(t);
        let (s, co) = a.sin_cos();
        [c[0] + co * l[0] - s * l[1], c[1] + s * l[0] + co * l[1]]
    }

    fn contains_local(&self, l: [f64; 2]) -> bool {
        match self.outline {
            Outline::Disc { r } => l[0] * l[0] + l[1] * l[1] <= r * r,
            Outline::Rect { hw, hh } => l[0].abs() <= hw && l[1].abs() <= hh,
        }
    }

    fn radius(&self) -> f64 {
        match self.outline {
            Outline::Disc { r } => r,
            Outline::Rect { hw, hh } => hw.hypot(hh),
        }
    }
}

#[derive(Clone, Debug)]
struct Scene {
    background: Texture,
    bg_velocity: [f64; 2],
    /// Back to front.
    shapes: Vec<Shape>,
}

const SUPERSAMPLE: usize = 4;

impl Scene {
    fn random(rng: &mut ChaCha8Rng, level: MotionLevel, size: usize) -> Self {
        let (lo, hi) = level.range();
        let motion = |rng: &mut ChaCha8Rng, cap: f64| {
            let speed = rng.gen_range(lo.min(cap)..=cap);
            let dir: f64 = rng.gen_range(0.0..2.0 * PI);
            [speed * dir.cos(), speed * dir.sin()]
        };
        let background = Texture::random(rng, 0.15);
        let bg_velocity = motion(rng, hi);
        let count = rng.gen_range(2..=5);
        let s = size as f64;
        let shapes = (0..count)
            .map(|_| {
                let outline = if rng.gen_bool(0.5) {
                    Outline::Disc {
                        r: rng.gen_range(0.08..0.2) * s,
                    }
                } else {
                    Outline::Rect {
                        hw: rng.gen_range(0.06..0.18) * s,
                        hh: rng.gen_range(0.06..0.18) * s,
                    }
                };
                let mut shape = Shape {
                    outline,
                    texture: Texture::random(rng, 0.12),
                    centre: [rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s],
                    angle: rng.gen_range(0.0..2.0 * PI),
                    velocity: [0.0, 0.0],
                    spin: 0.0,
                };
                // rotation may use up to a quarter of the displacement budget
                let r = shape.radius();
                shape.spin = rng.gen_range(-0.25..=0.25) * hi / r;
                let cap = (hi - shape.spin.abs() * r).max(0.0);
                shape.velocity = motion(rng, cap);
                // centre the trajectory so the shape stays in view at t = 0.5
                shape.centre = [shape.centre[0] - 0.5 * shape.velocity[0], shape.centre[1] - 0.5 * shape.velocity[1]];
                shape
            })
            .collect();
        Scene {
            background,
            bg_velocity,
            shapes,
        }
    }

    fn background_at(&self, t: f64, x: f64, y: f64) -> [f64; 3] {
        self.background.eval(x - t * self.bg_velocity[0], y - t * self.bg_velocity[1])
    }

    /// Index of the frontmost shape covering a point, if any.
    fn owner(&self, t: f64, x: f64, y: f64) -> Option<usize> {
        (0..self.shapes.len())
            .rev()
            .find(|&k| self.shapes[k].contains_local(self.shapes[k].local(t, x, y)))
    }

    fn colour_at(&self, t: f64, x: f64, y: f64) -> [f64; 3] {
        match self.owner(t, x, y) {
            Some(k) => {
                let l = self.shapes[k].local(t, x, y);
                self.shapes[k].texture.eval(l[0], l[1])
            }
            None => self.background_at(t, x, y),
        }
    }

    /// Box-filtered render at time `t`. Pixel `(i, j)` covers
    /// `[j, j+1) × [i, i+1)` with its centre at `(j+0.5, i+0.5)`.
    fn render(&self, t: f64, size: usize) -> Tensor<f32> {
        let mut data = vec![0f32; 3 * size * size];
        let n = SUPERSAMPLE as f64;
        for i in 0..size {
            for j in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = j as f64 + (sx as f64 + 0.5) / n;
                        let y = i as f64 + (sy as f64 + 0.5) / n;
                        let c = self.colour_at(t, x, y);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    data[(ch * size + i) * size + j] = (acc[ch] / (n * n)) as f32;
                }
            }
        }
        Tensor::new(vec![3, size, size], data).expect("render shape")
    }

    /// Where the surface point seen at pixel centre `(x, y)` at `t = 0.5`
    /// sits at time `t`, and which layer it belongs to.
    fn track(&self, x: f64, y: f64, t: f64) -> ([f64; 2], Option<usize>) {
        match self.owner(0.5, x, y) {
            Some(k) => {
                let l = self.shapes[k].local(0.5, x, y);
                (self.shapes[k].world(t, l), Some(k))
            }
            None => ([x + (t - 0.5) * self.bg_velocity[0], y + (t - 0.5) * self.bg_velocity[1]], None),
        }
    }

    fn pure_pixel(&self, t: f64, i: usize, j: usize) -> bool {
        let n = SUPERSAMPLE as f64;
        let first = self.owner(t, j as f64 + 0.5 / n, i as f64 + 0.5 / n);
        (0..SUPERSAMPLE * SUPERSAMPLE).all(|s| {
            let x = j as f64 + ((s % SUPERSAMPLE) as f64 + 0.5) / n;
            let y = i as f64 + ((s / SUPERSAMPLE) as f64 + 0.5) / n;
            self.owner(t, x, y) == first
        })
    }
}

/// Renders a triplet. Same arguments, same bits.
pub fn gen_triplet(seed: u64, level: MotionLevel, size: usize) -> Result<FrameTriplet> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Input(format!("triplet size {size} must be a positive multiple of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, level, size);
    let plane = size * size;
    let mut f0 = vec![0f32; 2 * plane];
    let mut f1 = vec![0f32; 2 * plane];
    let mut valid = vec![0f32; plane];
    let edge = (size - 1) as f64;
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let (p0, k) = scene.track(x, y, 0.0);
            let (p1, _) = scene.track(x, y, 1.0);
            let p = i * size + j;
            f0[p] = (p0[0] - x) as f32;
            f0[plane + p] = (p0[1] - y) as f32;
            f1[p] = (p1[0] - x) as f32;
            f1[plane + p] = (p1[1] - y) as f32;
            let inside = |q: [f64; 2]| (0.5..=edge + 0.5).contains(&q[0]) && (0.5..=edge + 0.5).contains(&q[1]);
            let seen = |t: f64, q: [f64; 2]| scene.owner(t, q[0], q[1]) == k;
            let ok = inside(p0)
                && inside(p1)
                && seen(0.0, p0)
                && seen(1.0, p1)
                && scene.pure_pixel(0.5, i, j)
                && [p0, p1].iter().zip([0.0, 1.0]).all(|(q, t)| {
                    let (qi, qj) = ((q[1] - 0.5).round() as usize, (q[0] - 0.5).round() as usize);
                    scene.pure_pixel(t, qi.min(size - 1), qj.min(size - 1))
                });
            valid[p] = ok as u8 as f32;
        }
    }
    Ok(FrameTriplet {
        i0: scene.render(0.0, size),
        it: scene.render(0.5, size),
        i1: scene.render(1.0, size),
        flow_t0: FlowField::new(Tensor::new(vec![1, 2, size, size], f0)?)?,
        flow_t1: FlowField::new(Tensor::new(vec![1, 2, size, size], f1)?)?,
        valid: Tensor::new(vec![size, size], valid)?,
        level,
        seed,
    })
}

/// `count` `(seed, level)` pairs drawn from `seed`, cycling through the levels.
pub fn corpus_plan(seed: u64, count: usize) -> Vec<(u64, MotionLevel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| (rng.gen::<u64>(), MotionLevel::ALL[i % MotionLevel::ALL.len()]))
        .collect()
}

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)` for images in `[0,1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

/// Root-mean-square error in 8-bit units.
pub fn ie(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok(255.0 * mse(a, b)?.sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one `h×w` plane.
fn blur(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5),
/// valid region only. Leading axes are treated as channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let nd = a.shape().len();
    if nd < 2 {
        return Err(dim_err!("ssim needs at least 2 axes, got {:?}", a.shape()));
    }
    let (h, w) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let pa: Vec<f64> = a.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = blur(&pa, h, w, &k);
        let mu_b = blur(&pb, h, w, &k);
        let saa = blur(&prod(&pa, &pa), h, w, &k);
        let sbb = blur(&prod(&pb, &pb), h, w, &k);
        let sab = blur(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / planes as f64)
}

/// PSNR, SSIM and IE of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
}

impl Metrics {
    pub fn compute(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Self> {
        Ok(Metrics {
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
            ie: ie(pred, target)?,
        })
    }

    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        Metrics {
            psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
            ie: items.iter().map(|m| m.ie).sum::<f64>() / n,
        }
    }
}

/// Per-pixel mean of the two input frames.
pub fn overlay(i0: &Tensor<f32>, i1: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_same(i0, i1)?;
    let data = i0.data().iter().zip(i1.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(i0.shape().to_vec(), data)
}

/// Mean end-point error between two flow fields.
pub fn epe(a: &FlowField<f32>, b: &FlowField<f32>) -> Result<f64> {
    check_same(a.tensor(), b.tensor())?;
    let (n, h, w) = (a.batch(), a.height(), a.width());
    let mut total = 0.0;
    for k in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (au, av) = a.at(k, y, x);
                let (bu, bv) = b.at(k, y, x);
                total += ((au - bu) as f64).hypot((av - bv) as f64);
            }
        }
    }
    Ok(total / (n * h * w).max(1) as f64)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletMeta {
    seed: u64,
    level: MotionLevel,
}

/// Writes `im0.png`, `imt.png`, `im1.png`, `flow_t0.flo`, `flow_t1.flo` and
/// `meta.json` into `dir`.
pub fn save_triplet(dir: &Path, t: &FrameTriplet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
    io::write_png(&dir.join("im0.png"), &t.i0)?;
    io::write_png(&dir.join("imt.png"), &t.it)?;
    io::write_png(&dir.join("im1.png"), &t.i1)?;
    io::write_flo(&dir.join("flow_t0.flo"), &t.flow_t0)?;
    io::write_flo(&dir.join("flow_t1.flo"), &t.flow_t1)?;
    let meta = serde_json::to_string(&TripletMeta { seed: t.seed, level: t.level }).expect("meta serializes");
    let path = dir.join("meta.json");
    std::fs::write(&path, meta).map_err(|e| Error::io(path.display(), e))
}

/// Reads a triplet directory. The occlusion mask is not stored, so `valid`
/// comes back all ones.
pub fn load_triplet(dir: &Path) -> Result<FrameTriplet> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display(), e))?;
    let meta: TripletMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let i0 = io::read_png(&dir.join("im0.png"))?;
    let (h, w) = (i0.shape()[1], i0.shape()[2]);
    let t = FrameTriplet {
        it: io::read_png(&dir.join("imt.png"))?,
        i1: io::read_png(&dir.join("im1.png"))?,
        flow_t0: io::read_flo(&dir.join("flow_t0.flo"))?,
        flow_t1: io::read_flo(&dir.join("flow_t1.flo"))?,
        valid: Tensor::full(vec![h, w], 1.0),
        level: meta.level,
        seed: meta.seed,
        i0,
    };
    let sizes = [t.it.shape(), t.i1.shape()];
    if sizes.iter().any(|s| s != &t.i0.shape()) || t.flow_t0.height() != h || t.flow_t1.width() != w {
        return Err(Error::Format(format!("{}: frames and flows disagree in size", dir.display())));
    }
    Ok(t)
}

/// Generates `count` triplets of `size`² pixels under `root/NNNNN/`.
pub fn write_corpus(root: &Path, seed: u64, count: usize, size: usize) -> Result<()> {
    for (i, (s, level)) in corpus_plan(seed, count).into_iter().enumerate() {
        save_triplet(&root.join(format!("{i:05}")), &gen_triplet(s, level, size)?)?;
    }
    Ok(())
}

/// Loads every triplet directory under `root`, in name order.
pub fn load_corpus(root: &Path) -> Result<Vec<FrameTriplet>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display(), e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root.display(), e))?;
        if e.path().join("meta.json").is_file() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("{}: no triplets found", root.display())));
    }
    dirs.iter().map(|d| load_triplet(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_triplet(7, MotionLevel::Medium, 32).unwrap();
        let b = gen_triplet(7, MotionLevel::Medium, 32).unwrap();
        assert_eq!(a, b);
        let c = gen_triplet(8, MotionLevel::Medium, 32).unwrap();
        assert_ne!(a.i0, c.i0);
    }

    #[test]
    fn flow_bounded_by_level() {
        for level in MotionLevel::ALL {
            for seed in 0..4 {
                let t = gen_triplet(seed, level, 32).unwrap();
                let (_, hi) = level.range();
                assert!(t.flow_t0.max_magnitude() <= hi / 2.0 + 1e-4, "{level} {seed}");
                assert!(t.flow_t1.max_magnitude() <= hi / 2.0 + 1e-4);
                assert!(t.i0.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn warped_first_frame_matches_middle_frame() {
        for (seed, level) in corpus_plan(3, 8) {
            let t = gen_triplet(seed, level, 48).unwrap();
            for (src, flow) in [(&t.i0, &t.flow_t0), (&t.i1, &t.flow_t1)] {
                let mut g = Graph::inference();
                let s = g.constant(stack(&[src]).unwrap());
                let f = g.constant(flow.tensor().clone());
                let w = g.bilinear_warp(s, f).unwrap();
                let warped = g.value(w);
                let plane = 48 * 48;
                let (mut err, mut count) = (0.0, 0usize);
                for p in 0..plane {
                    if t.valid.data()[p] > 0.5 {
                        for c in 0..3 {
                            err += (warped[c * plane + p] - t.it.data()[c * plane + p]).abs() as f64;
                        }
                        count += 3;
                    }
                }
                assert!(count * 10 > plane * 3, "too few valid pixels ({count})");
                assert!(err / (count as f64) < 2.0 / 255.0, "{level} seed {seed}: {}", err / count as f64 * 255.0);
            }
        }
    }

    #[test]
    fn augmentations_keep_flows_consistent() {
        let t = gen_triplet(5, MotionLevel::Hard, 32).unwrap();
        let r = t.time_reversed();
        assert_eq!(r.i0, t.i1);
        assert_eq!(r.flow_t0, t.flow_t1);
        let f = t.flipped();
        assert_eq!(f.flow_t0.at(0, 3, 0).0, -t.flow_t0.at(0, 3, 31).0);
        assert_eq!(f.flow_t0.at(0, 3, 0).1, t.flow_t0.at(0, 3, 31).1);
        assert_eq!(f.flipped(), t);
        let c = t.crop(16, 0, 16).unwrap();
        assert_eq!(c.i0.shape(), &[3, 16, 16]);
        assert_eq!(c.flow_t1.at(0, 0, 5), t.flow_t1.at(0, 16, 5));
    }

    #[test]
    fn metric_closed_forms() {
        let a = Tensor::<f32>::full(vec![3, 16, 16], 0.5);
        let b = Tensor::<f32>::full(vec![3, 16, 16], 0.5 + 10.0 / 255.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(ie(&a, &a).unwrap(), 0.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0 * (255.0f64 / 10.0).log10()).abs() < 1e-4);
        assert!((ie(&a, &b).unwrap() - 10.0).abs() < 1e-3);
    }

    #[test]
    fn ssim_discriminates_inversion() {
        let t = gen_triplet(1, MotionLevel::Easy, 32).unwrap();
        let bin = Tensor::new(t.i0.shape().to_vec(), t.i0.data().iter().map(|&v| (v > 0.5) as u8 as f32).collect()).unwrap();
        let inv = Tensor::new(bin.shape().to_vec(), bin.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 1.0);
        assert!((ssim(&bin, &bin).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 11, 3, 16).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (t, (seed, level)) in loaded.iter().zip(corpus_plan(11, 3)) {
            let fresh = gen_triplet(seed, level, 16).unwrap();
            assert_eq!((t.seed, t.level), (seed, level));
            assert_eq!(t.flow_t0, fresh.flow_t0);
            assert!(psnr(&t.it, &fresh.it).unwrap() > 50.0);
        }
        assert_eq!(load_corpus(&dir.path().join("missing")).unwrap_err().category(), "io");
    }

    #[test]
    fn rejects_bad_size() {
        assert_eq!(gen_triplet(0, MotionLevel::Easy, 40).unwrap_err().category(), "input");
    }
}
