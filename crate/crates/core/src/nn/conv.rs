//! 2D convolution via im2col + GEMM, with explicit backward.
//!
//! The unfolded input is materialized once per pass as a single
//! K x (B * P) matrix so each GEMM spans the whole batch (weight panels are
//! packed once per layer, not once per sample). Work is split over row
//! blocks; every output element is reduced serially inside one GEMM call, so
//! results do not depend on the thread count.

use super::{Feat, Param, Scalar};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    /// [c_out, c_in * kh * kw], row-major.
    pub weight: Param<F>,
    /// [c_out]
    pub bias: Param<F>,
}

pub struct ConvCache<F> {
    x: Feat<F>,
}

impl<F: Scalar> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        ph: usize,
        pw: usize,
        rng: &mut Rng,
    ) -> Self {
        let k = c_in * kh * kw;
        // He fan-in initialization; biases start at zero.
        let std = (2.0 / k as f64).sqrt();
        let weight: Vec<F> = (0..c_out * k)
            .map(|_| F::from_f64(rng.normal() * std))
            .collect();
        Conv2d {
            c_in,
            c_out,
            kh,
            kw,
            stride,
            ph,
            pw,
            weight: Param::new(vec![c_out, c_in, kh, kw], weight, true),
            bias: Param::zeros(vec![c_out], true),
        }
    }

    /// Square-kernel convenience constructor.
    pub fn square(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        Conv2d::new(c_in, c_out, k, k, stride, pad, pad, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.ph)
            .checked_sub(self.kh)
            .map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.pw)
            .checked_sub(self.kw)
            .map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::ShapeMismatch(format!(
                "input {h}x{w} too small for kernel {}x{} stride {} padding ({}, {})",
                self.kh, self.kw, self.stride, self.ph, self.pw
            ))),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// A 1x1 stride-1 convolution reads the input layout directly; nothing
    /// needs unfolding.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    /// Narrow-output stride-1 convolutions (skip connectors, refine blocks,
    /// the classifier) are computed directly: their unfolded matrices would
    /// dwarf the actual arithmetic.
    fn is_narrow_direct(&self) -> bool {
        self.stride == 1 && self.c_out <= 4 && !self.is_pointwise()
    }

    fn forward_direct(&self, x: &Feat<F>) -> Result<Feat<F>> {
        let (oh, ow) = self.out_hw(x.h, x.w)?;
        let mut y = Feat::zeros(x.n, self.c_out, oh, ow);
        let plane = oh * ow;
        let (h, w) = (x.h, x.w);
        let k_per_in = self.kh * self.kw;
        y.data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(pi, out_plane)| {
                let b = pi / self.c_out;
                let co = pi % self.c_out;
                let bias = self.bias.data[co];
                for v in out_plane.iter_mut() {
                    *v = bias;
                }
                for ci in 0..self.c_in {
                    let x_plane = x.plane(b, ci);
                    let w_base = (co * self.c_in + ci) * k_per_in;
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = self.weight.data[w_base + ki * self.kw + kj];
                            if wv == F::zero() {
                                continue;
                            }
                            // contiguous run of columns with in-range input
                            let c_lo = self.pw.saturating_sub(kj);
                            let c_hi = (w + self.pw).saturating_sub(kj).min(ow);
                            if c_lo >= c_hi {
                                continue;
                            }
                            for orow in 0..oh {
                                let ih = (orow + ki) as isize - self.ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let src_row = &x_plane[ih as usize * w..(ih as usize + 1) * w];
                                let dst = &mut out_plane[orow * ow + c_lo..orow * ow + c_hi];
                                let src = &src_row[c_lo + kj - self.pw..c_hi + kj - self.pw];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            });
        Ok(y)
    }

    fn backward_direct(&mut self, x: &Feat<F>, dy: &Feat<F>) -> Feat<F> {
        let (oh, ow) = (dy.h, dy.w);
        let (h, w) = (x.h, x.w);
        let k_per_in = self.kh * self.kw;

        // bias gradient
        for co in 0..self.c_out {
            let mut acc = F::zero();
            for b in 0..x.n {
                for &v in dy.plane(b, co) {
                    acc += v;
                }
            }
            self.bias.grad[co] += acc;
        }

        // weight gradient, parallel over (c_out, c_in) kernel cells
        self.weight
            .grad
            .par_chunks_mut(k_per_in)
            .enumerate()
            .for_each(|(cell, dw)| {
                let co = cell / self.c_in;
                let ci = cell % self.c_in;
                for b in 0..x.n {
                    let x_plane = x.plane(b, ci);
                    let dy_plane = dy.plane(b, co);
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let c_lo = self.pw.saturating_sub(kj);
                            let c_hi = (w + self.pw).saturating_sub(kj).min(ow);
                            if c_lo >= c_hi {
                                continue;
                            }
                            let mut acc = F::zero();
                            for orow in 0..oh {
                                let ih = (orow + ki) as isize - self.ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let g = &dy_plane[orow * ow + c_lo..orow * ow + c_hi];
                                let s = &x_plane[ih as usize * w + c_lo + kj - self.pw
                                    ..ih as usize * w + c_hi + kj - self.pw];
                                for (&gv, &sv) in g.iter().zip(s) {
                                    acc += gv * sv;
                                }
                            }
                            dw[ki * self.kw + kj] += acc;
                        }
                    }
                }
            });

        // input gradient, parallel over (b, c_in) planes
        let mut dx = Feat::zeros(x.n, self.c_in, h, w);
        let in_plane = h * w;
        dx.data
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(pi, dx_plane)| {
                let b = pi / self.c_in;
                let ci = pi % self.c_in;
                for co in 0..self.c_out {
                    let dy_plane = dy.plane(b, co);
                    let w_base = (co * self.c_in + ci) * k_per_in;
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = self.weight.data[w_base + ki * self.kw + kj];
                            if wv == F::zero() {
                                continue;
                            }
                            let c_lo = self.pw.saturating_sub(kj);
                            let c_hi = (w + self.pw).saturating_sub(kj).min(ow);
                            if c_lo >= c_hi {
                                continue;
                            }
                            for orow in 0..oh {
                                let ih = (orow + ki) as isize - self.ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let g = &dy_plane[orow * ow + c_lo..orow * ow + c_hi];
                                let d = &mut dx_plane[ih as usize * w + c_lo + kj - self.pw
                                    ..ih as usize * w + c_hi + kj - self.pw];
                                for (dv, &gv) in d.iter_mut().zip(g) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
        dx
    }

    /// Fill the batched unfolded matrix: row r = (ci, ki, kj), columns are
    /// (sample, output position) blocks.
    fn im2col_batched(&self, x: &Feat<F>, oh: usize, ow: usize, cols: &mut [F]) {
        let p = oh * ow;
        let bp = x.n * p;
        let (h, w) = (x.h, x.w);
        debug_assert_eq!(cols.len(), self.k() * bp);
        cols.par_chunks_mut(bp).enumerate().for_each(|(row, out)| {
            let kj = row % self.kw;
            let ki = (row / self.kw) % self.kh;
            let ci = row / (self.kw * self.kh);
            for b in 0..x.n {
                let plane = x.plane(b, ci);
                let dst_sample = &mut out[b * p..(b + 1) * p];
                for orow in 0..oh {
                    let ih = (orow * self.stride + ki) as isize - self.ph as isize;
                    let dst = &mut dst_sample[orow * ow..(orow + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        for d in dst.iter_mut() {
                            *d = F::zero();
                        }
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if self.stride == 1 && self.kw == 1 && self.pw == 0 {
                        dst.copy_from_slice(src);
                        continue;
                    }
                    for (ocol, d) in dst.iter_mut().enumerate() {
                        let iw = (ocol * self.stride + kj) as isize - self.pw as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            F::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        });
    }

    /// Scatter-add the batched unfolded gradient back onto the input grid.
    fn col2im_batched(&self, dcols: &[F], dx: &mut Feat<F>, oh: usize, ow: usize) {
        let p = oh * ow;
        let bp = dx.n * p;
        let (h, w) = (dx.h, dx.w);
        let sample_len = dx.sample_len();
        let kw = self.kw;
        let kh = self.kh;
        let stride = self.stride;
        let (ph, pw) = (self.ph, self.pw);
        dx.data
            .par_chunks_mut(sample_len)
            .enumerate()
            .for_each(|(b, dx_b)| {
                for ci in 0..self.c_in {
                    let target = &mut dx_b[ci * h * w..(ci + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let row = (ci * kh + ki) * kw + kj;
                            let src = &dcols[row * bp + b * p..row * bp + (b + 1) * p];
                            for orow in 0..oh {
                                let ih = (orow * stride + ki) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = ih as usize * w;
                                for ocol in 0..ow {
                                    let iw = (ocol * stride + kj) as isize - pw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    target[base + iw as usize] += src[orow * ow + ocol];
                                }
                            }
                        }
                    }
                }
            });
    }

    /// Gather activations as a (c, sample-major columns) matrix.
    fn to_channel_major(x: &Feat<F>) -> Vec<F> {
        let p = x.plane_len();
        let bp = x.n * p;
        let mut out = vec![F::zero(); x.c * bp];
        out.par_chunks_mut(bp).enumerate().for_each(|(c, row)| {
            for b in 0..x.n {
                row[b * p..(b + 1) * p].copy_from_slice(x.plane(b, c));
            }
        });
        out
    }

    fn from_channel_major(mat: &[F], n: usize, c: usize, h: usize, w: usize) -> Feat<F> {
        let p = h * w;
        let bp = n * p;
        let mut out = Feat::zeros(n, c, h, w);
        let sample_len = out.sample_len();
        out.data
            .par_chunks_mut(sample_len)
            .enumerate()
            .for_each(|(b, sample)| {
                for ch in 0..c {
                    sample[ch * p..(ch + 1) * p]
                        .copy_from_slice(&mat[ch * bp + b * p..ch * bp + (b + 1) * p]);
                }
            });
        out
    }

    pub fn forward(&self, x: &Feat<F>) -> Result<(Feat<F>, ConvCache<F>)> {
        assert_eq!(x.c, self.c_in, "conv input channel mismatch");
        if self.is_narrow_direct() {
            let y = self.forward_direct(x)?;
            return Ok((y, ConvCache { x: x.clone() }));
        }
        let (oh, ow) = self.out_hw(x.h, x.w)?;
        let p = oh * ow;
        let bp = x.n * p;
        let k = self.k();

        let cols_store;
        let cols: &[F] = if self.is_pointwise() {
            cols_store = Self::to_channel_major(x);
            &cols_store
        } else {
            let mut buf = vec![F::zero(); k * bp];
            self.im2col_batched(x, oh, ow, &mut buf);
            cols_store = buf;
            &cols_store
        };

        // out_mat = W (c_out x K) * cols (K x BP)
        let mut out_mat = vec![F::zero(); self.c_out * bp];
        unsafe {
            F::gemm(
                self.c_out,
                k,
                bp,
                F::one(),
                self.weight.data.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                bp as isize,
                1,
                F::zero(),
                out_mat.as_mut_ptr(),
                bp as isize,
                1,
            );
        }
        out_mat
            .par_chunks_mut(bp)
            .enumerate()
            .for_each(|(co, out_row)| {
                let bias = self.bias.data[co];
                for v in out_row.iter_mut() {
                    *v += bias;
                }
            });
        let y = Self::from_channel_major(&out_mat, x.n, self.c_out, oh, ow);
        Ok((y, ConvCache { x: x.clone() }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Feat<F>) -> Feat<F> {
        if self.is_narrow_direct() {
            let x = cache.x.clone();
            return self.backward_direct(&x, dy);
        }
        let x = &cache.x;
        let (oh, ow) = (dy.h, dy.w);
        let p = oh * ow;
        let bp = x.n * p;
        let k = self.k();

        let cols_store;
        let cols: &[F] = if self.is_pointwise() {
            cols_store = Self::to_channel_major(x);
            &cols_store
        } else {
            let mut buf = vec![F::zero(); k * bp];
            self.im2col_batched(x, oh, ow, &mut buf);
            cols_store = buf;
            &cols_store
        };
        let dy_mat = Self::to_channel_major(dy);

        // dW (c_out x K) += dy_mat (c_out x BP) * cols^T (BP x K)
        unsafe {
            F::gemm(
                self.c_out,
                bp,
                k,
                F::one(),
                dy_mat.as_ptr(),
                bp as isize,
                1,
                cols.as_ptr(),
                1,
                bp as isize,
                F::one(),
                self.weight.grad.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for (co, row) in dy_mat.chunks(bp).enumerate() {
            let mut acc = F::zero();
            for &v in row {
                acc += v;
            }
            self.bias.grad[co] += acc;
        }

        // dcols (K x BP) = W^T (K x c_out) * dy_mat (c_out x BP)
        let mut dcols = vec![F::zero(); k * bp];
        unsafe {
            F::gemm(
                k,
                self.c_out,
                bp,
                F::one(),
                self.weight.data.as_ptr(),
                1,
                k as isize,
                dy_mat.as_ptr(),
                bp as isize,
                1,
                F::zero(),
                dcols.as_mut_ptr(),
                bp as isize,
                1,
            );
        }

        if self.is_pointwise() {
            Self::from_channel_major(&dcols, x.n, self.c_in, x.h, x.w)
        } else {
            let mut dx = Feat::zeros(x.n, self.c_in, x.h, x.w);
            self.col2im_batched(&dcols, &mut dx, oh, ow);
            dx
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: super::ParamVisitor<F>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
