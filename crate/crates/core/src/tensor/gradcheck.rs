//! Central-difference gradient checks in 64-bit precision.
//!
//! A non-scalar output is reduced as `Σ out ⊙ R` with a fixed random `R`, so
//! ops whose plain sum is constant (softmax, normalization) are still probed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over checked coordinates.
    pub rel_err: f64,
    pub coords: usize,
}

impl Report {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }
}

fn projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = g.constant(Tensor::new(shape, r)?);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn compare(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Picks up to `limit` (tensor, element) coordinates.
fn coordinates(sizes: &[usize], limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    match limit {
        Some(k) if k < all.len() => {
            rand::seq::index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    }
}

/// Checks `d out / d inputs` where `build` maps leaf vars to an output.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    step: f64,
    limit: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<Report> {
    let eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = projection(&mut g, out, seed)?;
        let value = g.item(loss);
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| gr.wrt(v).map_or_else(|| vec![0.0; t.numel()], |s| s.to_vec()))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let coords = coordinates(&sizes, limit, &mut rng);
    let mut a = Vec::with_capacity(coords.len());
    let mut num = Vec::with_capacity(coords.len());
    let mut work = inputs.to_vec();
    for &(t, i) in &coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + step;
        let (fp, _) = eval(&work, false)?;
        work[t].data_mut()[i] = orig - step;
        let (fm, _) = eval(&work, false)?;
        work[t].data_mut()[i] = orig;
        num.push((fp - fm) / (2.0 * step));
        a.push(analytic[t][i]);
    }
    finish(&a, &num)
}

/// Checks `d out / d params` for a model held in a [`ParamStore`].
pub fn check_params(
    store: &ParamStore<f64>,
    params: &[ParamId],
    step: f64,
    limit: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<Report> {
    let eval = |s: &ParamStore<f64>, grads: bool| -> Result<(f64, Option<super::Gradients<f64>>)> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        let loss = projection(&mut g, out, seed)?;
        let value = g.item(loss);
        Ok((value, if grads { Some(g.backward(loss)?) } else { None }))
    };
    let (_, gr) = eval(store, true)?;
    let gr = gr.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = params.iter().map(|&id| store.get(id).numel()).collect();
    let coords = coordinates(&sizes, limit, &mut rng);
    let mut work = store.clone();
    let mut a = Vec::with_capacity(coords.len());
    let mut num = Vec::with_capacity(coords.len());
    for &(t, i) in &coords {
        let id = params[t];
        let orig = work.get(id).value()[i];
        work.get_mut(id).value_mut()[i] = orig + step;
        let (fp, _) = eval(&work, false)?;
        work.get_mut(id).value_mut()[i] = orig - step;
        let (fm, _) = eval(&work, false)?;
        work.get_mut(id).value_mut()[i] = orig;
        num.push((fp - fm) / (2.0 * step));
        a.push(gr.param(id).map_or(0.0, |g| g[i]));
    }
    finish(&a, &num)
}

fn finish(a: &[f64], num: &[f64]) -> Result<Report> {
    if num.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("finite difference produced a non-finite value".into()));
    }
    Ok(Report {
        rel_err: compare(a, num),
        coords: a.len(),
    })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp with the derivative of x^2: must fail
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&[5], -1.0, 1.0, &mut rng);
        let rep = check_inputs(&[x], 1e-6, None, 0, |g, v| Ok(g.unary(v[0], |t| t.exp(), |t, _| 2.0 * t))).unwrap();
        assert!(!rep.passes(1e-2));
    }

    #[test]
    fn accepts_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[4, 2], -1.0, 1.0, &mut rng);
        let rep = check_inputs(&[a, b], 1e-6, None, 1, |g, v| g.matmul(v[0], v[1])).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
        assert_eq!(rep.coords, 20);
    }
}
