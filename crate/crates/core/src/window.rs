//! Window partitioning for window attention.
//!
//! A fine map `[N, C, H, W]` splits into `H·W/M²` non-overlapping `M×M`
//! windows. Its half-resolution counterpart is reflection padded by `M/4` and
//! cut into `M×M` windows at stride `M/2`, which yields exactly one coarse
//! window per fine window, centred on it and covering a `2M×2M` fine region.
//!
//! Window tensors are `[N·nW, M², C]`: batch-major, windows row-major, tokens
//! row-major within a window.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Real, Var};
use crate::warp::reflect;

/// Layout metadata for a window tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub batch: usize,
    pub channels: usize,
    /// Extents of the (unpadded) map the windows were cut from.
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    /// Reflection padding applied on every side before cutting.
    pub pad: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    /// Non-overlapping grid over an `h×w` map.
    pub fn fine(batch: usize, channels: usize, h: usize, w: usize, m: usize) -> Result<Self> {
        if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(dim_err!(
                "{h}x{w} is not divisible by window {m}; pad by {}x{} first",
                pad_amount(h, m),
                pad_amount(w, m)
            ));
        }
        Ok(WindowGrid {
            batch,
            channels,
            height: h,
            width: w,
            window: m,
            stride: m,
            pad: 0,
            rows: h / m,
            cols: w / m,
        })
    }

    /// Overlapping grid over the half-resolution map of an `2h×2w` fine map.
    pub fn coarse(batch: usize, channels: usize, h: usize, w: usize, m: usize) -> Result<Self> {
        if m == 0 || !m.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "cross-scale windows need a window size divisible by 4, got {m}"
            )));
        }
        let (fh, fw) = (2 * h, 2 * w);
        if fh % m != 0 || fw % m != 0 {
            return Err(dim_err!(
                "coarse map {h}x{w} does not pair with window {m}: fine extents {fh}x{fw} must be multiples of {m}"
            ));
        }
        let (pad, stride) = (m / 4, m / 2);
        let rows = (h + 2 * pad - m) / stride + 1;
        let cols = (w + 2 * pad - m) / stride + 1;
        debug_assert_eq!((rows, cols), (fh / m, fw / m));
        Ok(WindowGrid {
            batch,
            channels,
            height: h,
            width: w,
            window: m,
            stride,
            pad,
            rows,
            cols,
        })
    }

    pub fn is_overlapping(&self) -> bool {
        self.stride != self.window
    }

    pub fn windows_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Shape of the window tensor.
    pub fn shape(&self) -> [usize; 3] {
        [self.num_windows(), self.tokens(), self.channels]
    }

    /// Top-left corner of window `(r, c)` in unpadded map coordinates.
    pub fn origin(&self, r: usize, c: usize) -> (isize, isize) {
        (
            (r * self.stride) as isize - self.pad as isize,
            (c * self.stride) as isize - self.pad as isize,
        )
    }

    /// Centre of window `k` (per image) in pixel-edge coordinates of its own map.
    pub fn centre(&self, k: usize) -> (f64, f64) {
        let (r, c) = (k / self.cols, k % self.cols);
        let (y, x) = self.origin(r, c);
        let half = self.window as f64 / 2.0;
        (y as f64 + half, x as f64 + half)
    }

    /// Centre of window `k` in fine-map coordinates (coarse grids are doubled).
    pub fn fine_centre(&self, k: usize) -> (f64, f64) {
        let (y, x) = self.centre(k);
        if self.is_overlapping() {
            (2.0 * y, 2.0 * x)
        } else {
            (y, x)
        }
    }

    /// Flat source index in `[N, C, H, W]` for every window element.
    fn gather_index(&self) -> Vec<u32> {
        let (h, w, m, ch) = (self.height, self.width, self.window, self.channels);
        let mut index = Vec::with_capacity(self.num_windows() * self.tokens() * ch);
        for b in 0..self.batch {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let (oy, ox) = self.origin(r, c);
                    for ty in 0..m {
                        let sy = reflect(oy + ty as isize, h);
                        for tx in 0..m {
                            let sx = reflect(ox + tx as isize, w);
                            for k in 0..ch {
                                index.push((((b * ch + k) * h + sy) * w + sx) as u32);
                            }
                        }
                    }
                }
            }
        }
        index
    }
}

/// Extra rows needed to reach the next multiple of `m`.
pub fn pad_amount(n: usize, m: usize) -> usize {
    (m - n % m) % m
}

fn map_shape(g: &Graph<impl Real>, x: Var) -> Result<[usize; 4]> {
    let s = g.shape(x);
    match s {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(dim_err!("expected an [N, C, H, W] map, got {:?}", s)),
    }
}

impl<T: Real> Graph<T> {
    /// Splits `[N, C, H, W]` into non-overlapping `m×m` windows.
    pub fn partition_windows(&mut self, x: Var, m: usize) -> Result<(Var, WindowGrid)> {
        let [n, c, h, w] = map_shape(self, x)?;
        let grid = WindowGrid::fine(n, c, h, w, m)?;
        let index = Arc::new(grid.gather_index());
        let out = self.gather_arc(x, index, grid.shape().to_vec());
        Ok((out, grid))
    }

    /// Pads the half-resolution map by `m/4` (reflection) and cuts `m×m`
    /// windows at stride `m/2`.
    pub fn partition_overlapping(&mut self, x_down: Var, m: usize) -> Result<(Var, WindowGrid)> {
        let [n, c, h, w] = map_shape(self, x_down)?;
        let grid = WindowGrid::coarse(n, c, h, w, m)?;
        let index = Arc::new(grid.gather_index());
        let out = self.gather_arc(x_down, index, grid.shape().to_vec());
        Ok((out, grid))
    }

    /// Reflection pads bottom and right edges up to multiples of `m`.
    ///
    /// Unlike [`Graph::reflection_pad`] this accepts pads longer than the map
    /// (the mirror repeats), so tiny deep feature maps still partition.
    pub fn pad_to_multiple(&mut self, x: Var, m: usize) -> Result<Var> {
        let [n, c, h, w] = map_shape(self, x)?;
        let (ph, pw) = (pad_amount(h, m), pad_amount(w, m));
        if ph == 0 && pw == 0 {
            return Ok(x);
        }
        let (ho, wo) = (h + ph, w + pw);
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for y in 0..ho {
                let sy = reflect(y as isize, h);
                for xx in 0..wo {
                    index.push((p * h * w + sy * w + reflect(xx as isize, w)) as u32);
                }
            }
        }
        Ok(self.gather_arc(x, Arc::new(index), vec![n, c, ho, wo]))
    }

    /// Inverse of [`Graph::partition_windows`].
    pub fn merge_windows(&mut self, windows: Var, grid: &WindowGrid) -> Result<Var> {
        if grid.is_overlapping() {
            return Err(Error::Usage("merge_windows called on an overlapping grid".into()));
        }
        if self.shape(windows) != grid.shape() {
            return Err(dim_err!(
                "window tensor {:?} does not match grid {:?}",
                self.shape(windows),
                grid.shape()
            ));
        }
        // Invert the partition permutation.
        let fwd = grid.gather_index();
        let mut inv = vec![0u32; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            inv[src as usize] = dst as u32;
        }
        let shape = vec![grid.batch, grid.channels, grid.height, grid.width];
        Ok(self.gather_arc(windows, Arc::new(inv), shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn counts_windows() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 8, 8]));
        let (w, grid) = g.partition_windows(x, 4).unwrap();
        assert_eq!(g.shape(w), &[4, 16, 1]);
        assert_eq!(grid.windows_per_image(), 4);
        let x = g.constant(ramp(&[1, 2, 4, 4]));
        let (_, grid) = g.partition_windows(x, 4).unwrap();
        assert_eq!(grid.num_windows(), 1);
    }

    #[test]
    fn token_layout_is_row_major() {
        let mut g = Graph::<f64>::inference();
        // one channel, 4x4, M=2: window 1 is the top-right block
        let x = g.constant(ramp(&[1, 1, 4, 4]));
        let (w, _) = g.partition_windows(x, 2).unwrap();
        assert_eq!(&g.value(w)[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn channels_become_token_features() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 3, 2, 2]));
        let (w, _) = g.partition_windows(x, 2).unwrap();
        assert_eq!(&g.value(w)[..6], &[0.0, 4.0, 8.0, 1.0, 5.0, 9.0]);
    }

    #[test]
    fn merge_inverts_partition_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut rng).cast::<f32>();
        let mut g = Graph::<f32>::inference();
        let x = g.constant(t.clone());
        let (w, grid) = g.partition_windows(x, 8).unwrap();
        let back = g.merge_windows(w, &grid).unwrap();
        assert_eq!(g.tensor(back), t);
    }

    #[test]
    fn non_divisible_names_padding() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 10, 8]));
        let err = g.partition_windows(x, 4).unwrap_err();
        assert_eq!(err.category(), "dimension");
        assert!(err.to_string().contains("2x0"), "{err}");
    }

    #[test]
    fn overlapping_count_matches_fine_count() {
        // fine 16x16, M=8: coarse 8x8, padded 12x12, four windows
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 8, 8]));
        let (w, grid) = g.partition_overlapping(x, 8).unwrap();
        assert_eq!(grid.num_windows(), 4);
        assert_eq!(g.shape(w), &[4, 64, 1]);
    }

    #[test]
    fn single_coarse_window_is_centred() {
        let grid = WindowGrid::coarse(1, 1, 4, 4, 8).unwrap();
        let fine = WindowGrid::fine(1, 1, 8, 8, 8).unwrap();
        assert_eq!(grid.num_windows(), 1);
        assert_eq!(grid.fine_centre(0), fine.centre(0));
    }

    #[test]
    fn overlapping_rejects_bad_window() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 6, 6]));
        assert_eq!(g.partition_overlapping(x, 6).unwrap_err().category(), "config");
    }

    #[test]
    fn constant_map_gives_constant_coarse_windows() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(vec![1, 2, 8, 8], 0.25));
        let (w, _) = g.partition_overlapping(x, 8).unwrap();
        assert!(g.value(w).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn coarse_window_reads_reflected_border() {
        // coarse 4x4 ramp, M=4: pad 1, first window starts at (-1,-1) -> (1,1)
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 4, 4]));
        let (w, _) = g.partition_overlapping(x, 4).unwrap();
        assert_eq!(&g.value(w)[..4], &[5.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn pad_to_multiple_mirrors_and_crops_back() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 3, 2]));
        let p = g.pad_to_multiple(x, 4).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 4, 4]);
        // rows 0,1,2 then mirrored row 1; columns 0,1 then 0,1 again (period 2)
        assert_eq!(&g.value(p)[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(&g.value(p)[12..], &[2.0, 3.0, 2.0, 3.0]);
        let c = g.crop(p, 0, 0, 3, 2).unwrap();
        assert_eq!(g.tensor(c), g.tensor(x));
    }

    #[test]
    fn merge_rejects_overlapping_grid() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(ramp(&[1, 1, 4, 4]));
        let (w, grid) = g.partition_overlapping(x, 4).unwrap();
        assert_eq!(g.merge_windows(w, &grid).unwrap_err().category(), "usage");
    }
}
