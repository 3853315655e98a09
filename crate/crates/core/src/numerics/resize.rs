//! Separable bilinear resampling of channel-last grids (`[h * w, c]`, row-major).
//!
//! Downsampling widens the triangle filter by the scale factor (area-aware, the
//! same convention as PIL's bilinear filter); upsampling is plain half-pixel
//! bilinear interpolation. Edge taps that fall outside the grid are dropped and
//! the remaining weights renormalized.

use super::Real;

/// Interpolation taps for one output coordinate.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        assert!(src > 0 && dst > 0, "resize extents must be positive");
        let scale = src as f64 / dst as f64;
        let support = scale.max(1.0);
        let taps = (0..dst)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale;
                let lo = (center - support).floor().max(0.0) as usize;
                let hi = ((center + support).ceil() as usize).min(src);
                let mut row: Vec<(usize, f64)> = (lo..hi)
                    .filter_map(|j| {
                        let x = ((j as f64 + 0.5) - center) / support;
                        let w = 1.0 - x.abs();
                        (w > 0.0).then_some((j, w))
                    })
                    .collect();
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                for (_, w) in row.iter_mut() {
                    *w /= total;
                }
                row
            })
            .collect();
        Self { taps }
    }
}

/// Precomputed plan for resizing an `(h, w)` grid to `(h2, w2)`.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub h: usize,
    pub w: usize,
    pub h2: usize,
    pub w2: usize,
    ys: AxisTaps,
    xs: AxisTaps,
}

impl ResizePlan {
    pub fn new(h: usize, w: usize, h2: usize, w2: usize) -> Self {
        Self {
            h,
            w,
            h2,
            w2,
            ys: AxisTaps::new(h, h2),
            xs: AxisTaps::new(w, w2),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.h == self.h2 && self.w == self.w2
    }

    /// Applies the plan to `c`-channel data laid out as `[h * w, c]`.
    pub fn apply<T: Real>(&self, src: &[T], c: usize) -> Vec<T> {
        debug_assert_eq!(src.len(), self.h * self.w * c);
        if self.is_identity() {
            return src.to_vec();
        }
        // horizontal pass: [h, w2, c]
        let mut tmp = vec![T::zero(); self.h * self.w2 * c];
        for y in 0..self.h {
            for (x2, taps) in self.xs.taps.iter().enumerate() {
                let out = &mut tmp[(y * self.w2 + x2) * c..(y * self.w2 + x2 + 1) * c];
                for &(x, wt) in taps {
                    let wt = T::lit(wt);
                    let row = &src[(y * self.w + x) * c..(y * self.w + x + 1) * c];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += wt * v;
                    }
                }
            }
        }
        let mut dst = vec![T::zero(); self.h2 * self.w2 * c];
        for (y2, taps) in self.ys.taps.iter().enumerate() {
            for &(y, wt) in taps {
                let wt = T::lit(wt);
                let src_row = &tmp[y * self.w2 * c..(y + 1) * self.w2 * c];
                let dst_row = &mut dst[y2 * self.w2 * c..(y2 + 1) * self.w2 * c];
                for (o, &v) in dst_row.iter_mut().zip(src_row) {
                    *o += wt * v;
                }
            }
        }
        dst
    }

    /// Adjoint of [`apply`](Self::apply): maps gradients on the output grid back to the input grid.
    pub fn apply_transpose<T: Real>(&self, grad: &[T], c: usize) -> Vec<T> {
        debug_assert_eq!(grad.len(), self.h2 * self.w2 * c);
        if self.is_identity() {
            return grad.to_vec();
        }
        let mut tmp = vec![T::zero(); self.h * self.w2 * c];
        for (y2, taps) in self.ys.taps.iter().enumerate() {
            for &(y, wt) in taps {
                let wt = T::lit(wt);
                let g_row = &grad[y2 * self.w2 * c..(y2 + 1) * self.w2 * c];
                let t_row = &mut tmp[y * self.w2 * c..(y + 1) * self.w2 * c];
                for (o, &v) in t_row.iter_mut().zip(g_row) {
                    *o += wt * v;
                }
            }
        }
        let mut out = vec![T::zero(); self.h * self.w * c];
        for y in 0..self.h {
            for (x2, taps) in self.xs.taps.iter().enumerate() {
                let g = &tmp[(y * self.w2 + x2) * c..(y * self.w2 + x2 + 1) * c];
                for &(x, wt) in taps {
                    let wt = T::lit(wt);
                    let o = &mut out[(y * self.w + x) * c..(y * self.w + x + 1) * c];
                    for (oo, &v) in o.iter_mut().zip(g) {
                        *oo += wt * v;
                    }
                }
            }
        }
        out
    }
}

/// One-shot convenience wrapper around [`ResizePlan`].
pub fn resize_grid<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    ResizePlan::new(h, w, h2, w2).apply(src, c)
}
