//! Max pooling and fixed 2x bilinear upsampling.

use super::{Feat, Scalar};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct PoolCache {
    /// Flat input index (within the plane) of the winning element, per
    /// output element. Ties go to the first window position in scan order.
    argmax: Vec<u32>,
    in_h: usize,
    in_w: usize,
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<F: Scalar>(&self, x: &Feat<F>) -> (Feat<F>, PoolCache) {
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut y = Feat::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0u32; x.n * x.c * oh * ow];
        let out_plane = oh * ow;
        y.data
            .par_chunks_mut(out_plane)
            .zip(argmax.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(pi, (y_p, am_p))| {
                let b = pi / x.c;
                let ch = pi % x.c;
                let plane = x.plane(b, ch);
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_at = 0u32;
                        for ki in 0..self.k {
                            let ih = (orow * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= x.h as isize {
                                continue;
                            }
                            for kj in 0..self.k {
                                let iw = (ocol * self.stride + kj) as isize - self.pad as isize;
                                if iw < 0 || iw >= x.w as isize {
                                    continue;
                                }
                                let at = ih as usize * x.w + iw as usize;
                                let v = plane[at];
                                if v > best {
                                    best = v;
                                    best_at = at as u32;
                                }
                            }
                        }
                        y_p[orow * ow + ocol] = best;
                        am_p[orow * ow + ocol] = best_at;
                    }
                }
            });
        (
            y,
            PoolCache {
                argmax,
                in_h: x.h,
                in_w: x.w,
            },
        )
    }

    pub fn backward<F: Scalar>(&self, cache: &PoolCache, dy: &Feat<F>) -> Feat<F> {
        let mut dx = Feat::zeros(dy.n, dy.c, cache.in_h, cache.in_w);
        let out_plane = dy.plane_len();
        let in_plane = cache.in_h * cache.in_w;
        dx.data
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(pi, dx_p)| {
                let b = pi / dy.c;
                let ch = pi % dy.c;
                let dy_p = dy.plane(b, ch);
                let am_p = &cache.argmax[pi * out_plane..(pi + 1) * out_plane];
                for (o, &g) in dy_p.iter().enumerate() {
                    dx_p[am_p[o] as usize] += g;
                }
            });
        dx
    }
}

/// Per-axis stencil for doubling a length with bilinear interpolation,
/// voxel centers aligned (align_corners = false).
fn stencil2x(len_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len_in)
        .map(|o| {
            let src = (o as f64 + 0.5) * 0.5 - 0.5;
            let f = src.floor();
            let w = src - f;
            let a = (f.max(0.0) as usize).min(len_in - 1);
            let b = ((f + 1.0).max(0.0) as usize).min(len_in - 1);
            (a, b, w)
        })
        .collect()
}

pub fn upsample2x_forward<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let rows = stencil2x(x.h);
    let cols = stencil2x(x.w);
    let mut y = Feat::zeros(x.n, x.c, oh, ow);
    let out_plane = oh * ow;
    y.data
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(pi, y_p)| {
            let b = pi / x.c;
            let ch = pi % x.c;
            let plane = x.plane(b, ch);
            for orow in 0..oh {
                let (r0, r1, wr) = rows[orow];
                let wr = F::from_f64(wr);
                let one_wr = F::one() - wr;
                for ocol in 0..ow {
                    let (c0, c1, wc) = cols[ocol];
                    let wc = F::from_f64(wc);
                    let one_wc = F::one() - wc;
                    let v = one_wr * (one_wc * plane[r0 * x.w + c0] + wc * plane[r0 * x.w + c1])
                        + wr * (one_wc * plane[r1 * x.w + c0] + wc * plane[r1 * x.w + c1]);
                    y_p[orow * ow + ocol] = v;
                }
            }
        });
    y
}

/// Adjoint of [`upsample2x_forward`]; `dy` has even height/width.
pub fn upsample2x_backward<F: Scalar>(dy: &Feat<F>) -> Feat<F> {
    assert!(dy.h.is_multiple_of(2) && dy.w.is_multiple_of(2));
    let (ih, iw) = (dy.h / 2, dy.w / 2);
    let rows = stencil2x(ih);
    let cols = stencil2x(iw);
    let mut dx = Feat::zeros(dy.n, dy.c, ih, iw);
    let in_plane = ih * iw;
    dx.data
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(pi, dx_p)| {
            let b = pi / dy.c;
            let ch = pi % dy.c;
            let dy_p = dy.plane(b, ch);
            for orow in 0..dy.h {
                let (r0, r1, wr) = rows[orow];
                let wr = F::from_f64(wr);
                let one_wr = F::one() - wr;
                for ocol in 0..dy.w {
                    let (c0, c1, wc) = cols[ocol];
                    let wc = F::from_f64(wc);
                    let one_wc = F::one() - wc;
                    let g = dy_p[orow * dy.w + ocol];
                    dx_p[r0 * iw + c0] += one_wr * one_wc * g;
                    dx_p[r0 * iw + c1] += one_wr * wc * g;
                    dx_p[r1 * iw + c0] += wr * one_wc * g;
                    dx_p[r1 * iw + c1] += wr * wc * g;
                }
            }
        });
    dx
}
