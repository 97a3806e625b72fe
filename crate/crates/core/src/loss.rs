//! Training objectives: L1 reconstruction, census, and flow distillation.

use crate::config::{CensusConfig, LossWeights};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Component losses and their weighted total, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: Var,
    pub census: Var,
    pub distill: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub census: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossReport {
    pub fn read<T: Real>(g: &Graph<T>, t: &LossTerms) -> Self {
        LossReport {
            rec: g.item(t.rec).as_f64(),
            census: g.item(t.census).as_f64(),
            distill: g.item(t.distill).as_f64(),
            total: g.item(t.total).as_f64(),
        }
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!("{step},{:e},{:e},{:e},{:e}", self.rec, self.census, self.distill, self.total)
    }
}

pub const CSV_HEADER: &str = "step,rec,census,distill,total";

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean absolute error.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "reconstruction loss")?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Per-pixel mean of `|Δu| + |Δv|` for each flow, summed over the two flows.
/// The teacher flows should be constants.
pub fn distill_loss<T: Real>(g: &mut Graph<T>, flows: (Var, Var), teacher: (Var, Var)) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (o, t) in [(flows.0, teacher.0), (flows.1, teacher.1)] {
        same_shape(g, o, t, "distillation loss")?;
        let d = g.sub(o, t)?;
        let a = g.abs(d);
        let per_pixel = g.sum_axis(a, 1)?;
        terms.push(g.mean(per_pixel));
    }
    g.add(terms[0], terms[1])
}

fn grayscale<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Input(format!("census loss expects [N,3,H,W] images, got {shape:?}")));
    }
    let w = g.constant(crate::Tensor::from_f64(vec![1, 3, 1, 1], &[0.299, 0.587, 0.114])?);
    let weighted = g.mul(img, w)?;
    let gray = g.sum_axis(weighted, 1)?;
    g.reshape(gray, &[shape[0], 1, shape[2], shape[3]])
}

/// Soft census descriptor `[N, p², H−p+1, W−p+1]` of a grayscale image.
fn census_transform<T: Real>(g: &mut Graph<T>, gray: Var, cfg: &CensusConfig) -> Result<Var> {
    let (n, h, w) = (g.shape(gray)[0], g.shape(gray)[2], g.shape(gray)[3]);
    let p = cfg.patch;
    let (oh, ow) = (h + 1 - p, w + 1 - p);
    let bits = p * p;
    let mut index = Vec::with_capacity(n * bits * oh * ow);
    for b in 0..n {
        for dy in 0..p {
            for dx in 0..p {
                for y in 0..oh {
                    for x in 0..ow {
                        index.push(((b * h + y + dy) * w + x + dx) as u32);
                    }
                }
            }
        }
    }
    let patches = g.gather(gray, index, vec![n, bits, oh, ow])?;
    let r = p / 2;
    let centre = g.narrow(gray, 2, r, oh)?;
    let centre = g.narrow(centre, 3, r, ow)?;
    let d = g.sub(patches, centre)?;
    let d2 = g.square(d);
    let den = g.add_scalar(d2, cfg.soft_eps);
    let den = g.sqrt(den);
    g.div(d, den)
}

/// Soft Hamming distance between census transforms, aggregated with a
/// generalized Charbonnier penalty and averaged over interior pixels.
pub fn census_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, cfg: &CensusConfig) -> Result<Var> {
    same_shape(g, pred, target, "census loss")?;
    let shape = g.shape(pred);
    if shape.len() == 4 && (shape[2] < cfg.patch || shape[3] < cfg.patch) {
        return Err(Error::Input(format!(
            "census loss needs at least {p}x{p} images, got {}x{}",
            shape[2],
            shape[3],
            p = cfg.patch
        )));
    }
    let gp = grayscale(g, pred)?;
    let gt = grayscale(g, target)?;
    let tp = census_transform(g, gp, cfg)?;
    let tt = census_transform(g, gt, cfg)?;
    let diff = g.sub(tp, tt)?;
    let sq = g.square(diff);
    let den = g.add_scalar(sq, cfg.rho_eps);
    let rho = g.div(sq, den)?;
    let dist = g.sum_axis(rho, 1)?;
    let eps = cfg.charbonnier_eps;
    let alpha = cfg.charbonnier_alpha;
    let d2 = g.square(dist);
    let shifted = g.add_scalar(d2, eps * eps);
    let pen = g.powf(shifted, alpha);
    let pen = g.add_scalar(pen, -(eps * eps).powf(alpha));
    Ok(g.mean(pen))
}

/// `λ_rec·rec + λ_css·census + λ_dis·distill`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, rec: Var, census: Var, distill: Var, w: &LossWeights) -> Result<LossTerms> {
    let a = g.scale(rec, w.rec);
    let b = g.scale(census, w.census);
    let c = g.scale(distill, w.distill);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms { rec, census, distill, total })
}
