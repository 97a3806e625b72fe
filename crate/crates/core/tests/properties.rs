use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vfiformer::attention::{Attention, AttentionKind};
use vfiformer::config::{CensusConfig, LossWeights};
use vfiformer::loss::{census_loss, distill_loss, recon_loss, total_loss};
use vfiformer::model::synthesize;
use vfiformer::nn::Builder;
use vfiformer::synth::{gen_triplet, ie, psnr, ssim, MotionLevel};
use vfiformer::tensor::gradcheck::random_tensor;
use vfiformer::window::WindowGrid;
use vfiformer::{Graph, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = random_tensor(&[rows, cols], -scale, scale, &mut rng(seed));
        let mut g = Graph::<f64>::inference();
        let v = g.constant(x);
        let s = g.softmax(v, 1).unwrap();
        for r in g.value(s).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, hw in 2usize..6) {
        // <conv_T(y), x> == <y, conv(x)> for a stride-2 kernel-2 pair
        let mut r = rng(seed);
        let x = random_tensor(&[1, cin, 2 * hw, 2 * hw], -1.0, 1.0, &mut r);
        let w = random_tensor(&[cout, cin, 2, 2], -1.0, 1.0, &mut r);
        let y = random_tensor(&[1, cout, hw, hw], -1.0, 1.0, &mut r);
        let wt = {
            let mut t = Tensor::<f64>::zeros(vec![cout, cin, 2, 2]);
            t.data_mut().copy_from_slice(w.data());
            t
        };
        let mut g = Graph::<f64>::inference();
        let (xv, wv, yv, wtv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()), g.constant(wt));
        let cx = g.conv2d(xv, wv, None, 2, 0).unwrap();
        let ty = g.conv_transpose2d(yv, wtv, None, 2).unwrap();
        let lhs: f64 = g.value(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let x = random_tensor(&[2, 3, h, w], -1.0, 1.0, &mut rng(seed));
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let f = g.constant(Tensor::zeros(vec![2, 2, h, w]));
        let out = g.bilinear_warp(xv, f).unwrap();
        prop_assert_eq!(g.value(out), x.data());
    }

    #[test]
    fn warp_is_linear_in_the_source(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = random_tensor(&[1, 2, 6, 7], -1.0, 1.0, &mut r);
        let y = random_tensor(&[1, 2, 6, 7], -1.0, 1.0, &mut r);
        let f = random_tensor(&[1, 2, 6, 7], -4.0, 4.0, &mut r);
        let mut g = Graph::<f64>::inference();
        let (xv, yv, fv) = (g.constant(x), g.constant(y), g.constant(f));
        let (ax, by) = (g.scale(xv, a), g.scale(yv, b));
        let mix = g.add(ax, by).unwrap();
        let lhs = g.bilinear_warp(mix, fv).unwrap();
        let wx = g.bilinear_warp(xv, fv).unwrap();
        let wy = g.bilinear_warp(yv, fv).unwrap();
        let (wx, wy) = (g.scale(wx, a), g.scale(wy, b));
        let rhs = g.add(wx, wy).unwrap();
        for (p, q) in g.value(lhs).iter().zip(g.value(rhs)) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn far_outside_flow_replicates_the_border(seed in any::<u64>(), dx in prop::sample::select(vec![-10.0, 10.0]), dy in prop::sample::select(vec![-10.0, 0.0, 10.0])) {
        let x = random_tensor(&[1, 1, 5, 5], 0.0, 1.0, &mut rng(seed));
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let field: Vec<f64> = [dx, dy].iter().flat_map(|&v| std::iter::repeat_n(v, 25)).collect();
        let f = g.constant(Tensor::new(vec![1, 2, 5, 5], field).unwrap());
        let out = g.bilinear_warp(xv, f).unwrap();
        let t = g.tensor(out);
        prop_assert!(t.is_finite());
        let col = if dx > 0.0 { 4 } else { 0 };
        for i in 0..5 {
            let row = if dy > 0.0 { 4 } else if dy < 0.0 { 0 } else { i };
            prop_assert_eq!(t.at(&[0, 0, i, 0]), x.at(&[0, 0, row, col]));
        }
    }

    #[test]
    fn coarse_and_fine_grids_pair_up(hm in 1usize..5, wm in 1usize..5, m in prop::sample::select(vec![4usize, 8, 12])) {
        let (h, w) = (hm * m, wm * m);
        let fine = WindowGrid::fine(1, 4, h, w, m).unwrap();
        let coarse = WindowGrid::coarse(1, 4, h / 2, w / 2, m).unwrap();
        prop_assert_eq!(fine.num_windows(), coarse.num_windows());
        for k in 0..fine.num_windows() {
            prop_assert_eq!(coarse.fine_centre(k), fine.centre(k));
        }
    }

    #[test]
    fn partition_merge_round_trip(seed in any::<u64>(), hm in 1usize..4, wm in 1usize..4, m in prop::sample::select(vec![2usize, 4])) {
        let x = random_tensor(&[2, 3, hm * m, wm * m], -1.0, 1.0, &mut rng(seed));
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let (wins, grid) = g.partition_windows(xv, m).unwrap();
        let back = g.merge_windows(wins, &grid).unwrap();
        prop_assert_eq!(g.value(back), x.data());
    }

    #[test]
    fn synthesis_recomposes_exactly(seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut r = rng(seed);
        let head = random_tensor(&[2, 4, 5, 5], -scale, scale, &mut r);
        let a = random_tensor(&[2, 3, 5, 5], 0.0, 1.0, &mut r);
        let b = random_tensor(&[2, 3, 5, 5], 0.0, 1.0, &mut r);
        let mut g = Graph::<f64>::inference();
        let (hv, av, bv) = (g.constant(head), g.constant(a.clone()), g.constant(b.clone()));
        let s = synthesize(&mut g, hv, av, bv).unwrap();
        let (mask, res, frame) = (g.tensor(s.mask), g.tensor(s.residual), g.tensor(s.frame));
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..25 {
                    let (y, x) = (p / 5, p % 5);
                    let h = mask.at(&[n, 0, y, x]);
                    prop_assert!(h > 0.0 && h < 1.0);
                    let expect = h * a.at(&[n, c, y, x]) + (1.0 - h) * b.at(&[n, c, y, x]) + res.at(&[n, c, y, x]);
                    prop_assert_eq!(frame.at(&[n, c, y, x]), expect);
                }
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[1, 3, 9, 9], 0.0, 1.0, &mut r);
        let b = random_tensor(&[1, 3, 9, 9], 0.0, 1.0, &mut r);
        let f = random_tensor(&[1, 2, 9, 9], -3.0, 3.0, &mut r);
        let mut g = Graph::<f64>::inference();
        let (av, bv, fv) = (g.constant(a), g.constant(b), g.constant(f));
        let z = g.constant(Tensor::zeros(vec![1, 2, 9, 9]));
        let rec = recon_loss(&mut g, av, bv).unwrap();
        let css = census_loss(&mut g, av, bv, &CensusConfig::default()).unwrap();
        let dis = distill_loss(&mut g, (fv, fv), (z, z)).unwrap();
        for v in [rec, css, dis] {
            prop_assert!(g.item(v) >= 0.0);
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(rec in 0.0f64..5.0, css in 0.0f64..5.0, dis in 0.0f64..50.0, k in 0.0f64..4.0) {
        let mut g = Graph::<f64>::inference();
        let (a, b, c) = (g.scalar(rec), g.scalar(css), g.scalar(dis));
        let base = LossWeights::default();
        let t0 = { let v = total_loss(&mut g, a, b, c, &base).unwrap().total; g.item(v) };
        for which in 0..3 {
            let mut w = base;
            let (coef, val) = match which {
                0 => { w.rec *= k; (base.rec, rec) }
                1 => { w.census *= k; (base.census, css) }
                _ => { w.distill *= k; (base.distill, dis) }
            };
            let t = { let v = total_loss(&mut g, a, b, c, &w).unwrap().total; g.item(v) };
            prop_assert!((t - (t0 + (k - 1.0) * coef * val)).abs() < 1e-9 * (1.0 + t0.abs()));
        }
    }

    #[test]
    fn census_ignores_a_shared_offset(seed in any::<u64>(), offset in -0.5f64..0.5) {
        let mut r = rng(seed);
        let a = random_tensor(&[1, 3, 10, 10], 0.0, 1.0, &mut r);
        let b = random_tensor(&[1, 3, 10, 10], 0.0, 1.0, &mut r);
        let mut g = Graph::<f64>::inference();
        let (av, bv) = (g.constant(a), g.constant(b));
        let base = { let v = census_loss(&mut g, av, bv, &CensusConfig::default()).unwrap(); g.item(v) };
        let (ao, bo) = (g.add_scalar(av, offset), g.add_scalar(bv, offset));
        let moved = { let v = census_loss(&mut g, ao, bo, &CensusConfig::default()).unwrap(); g.item(v) };
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1e-12));
    }

    #[test]
    fn psnr_and_ie_agree(seed in any::<u64>(), noise in 1e-4f64..0.5) {
        let mut r = rng(seed);
        let a = random_tensor(&[3, 8, 8], 0.0, 1.0, &mut r).cast::<f32>();
        let n = random_tensor(&[3, 8, 8], -noise, noise, &mut r).cast::<f32>();
        let b = Tensor::new(vec![3, 8, 8], a.data().iter().zip(n.data()).map(|(x, y)| x + y).collect()).unwrap();
        let (p, e) = (psnr(&a, &b).unwrap(), ie(&a, &b).unwrap());
        prop_assert!((e - 255.0 * 10f64.powf(-p / 20.0)).abs() <= 1e-9 * e);
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[3, 16, 16], 0.0, 1.0, &mut r).cast::<f32>();
        let b = random_tensor(&[3, 16, 16], 0.0, 1.0, &mut r).cast::<f32>();
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(cfg(6))]

    #[test]
    fn triplets_are_determined_by_seed(seed in any::<u64>(), level in prop::sample::select(MotionLevel::ALL.to_vec())) {
        let a = gen_triplet(seed, level, 16).unwrap();
        let b = gen_triplet(seed, level, 16).unwrap();
        prop_assert_eq!(a.i0, b.i0);
        prop_assert_eq!(a.it, b.it);
        prop_assert_eq!(a.i1, b.i1);
        prop_assert_eq!(a.flow_t0.tensor(), b.flow_t0.tensor());
    }

    #[test]
    fn attention_commutes_with_batch_permutation(seed in any::<u64>(), kind in prop::sample::select(vec![AttentionKind::Window, AttentionKind::CrossScale])) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut Builder::new(&mut store, &mut r), kind, 4, 2, 4).unwrap();
        let x = random_tensor(&[3, 4, 8, 8], -1.0, 1.0, &mut r);
        let plane = 4 * 64;
        let perm = [2usize, 0, 1];
        let mut shuffled = Vec::with_capacity(x.numel());
        for &p in &perm {
            shuffled.extend_from_slice(&x.data()[p * plane..(p + 1) * plane]);
        }
        let xp = Tensor::new(vec![3, 4, 8, 8], shuffled).unwrap();
        let mut g = Graph::<f64>::inference();
        let (xv, xpv) = (g.constant(x), g.constant(xp));
        let y = attn.forward_map(&mut g, &store, xv).unwrap();
        let yp = attn.forward_map(&mut g, &store, xpv).unwrap();
        let (y, yp) = (g.value(y).to_vec(), g.value(yp).to_vec());
        for (k, &p) in perm.iter().enumerate() {
            let a = &yp[k * plane..(k + 1) * plane];
            let b = &y[p * plane..(p + 1) * plane];
            for (u, v) in a.iter().zip(b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
