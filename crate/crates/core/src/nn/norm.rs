//! Batch normalization over [N, C, H, W], per-channel statistics.
//!
//! Training mode normalizes with per-batch statistics and maintains running
//! averages (momentum 0.1, matching the usual convention of `new = (1 - m) *
//! old + m * batch`); inference mode normalizes with the running averages.

use super::{Feat, Param, Scalar};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub c: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<F> {
    xhat: Feat<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            c,
            gamma: Param::new(vec![c], vec![F::one(); c], true),
            beta: Param::zeros(vec![c], true),
            running_mean: Param::zeros(vec![c], false),
            running_var: Param::new(vec![c], vec![F::one(); c], false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    /// Training-mode forward. Updates running statistics unless
    /// `update_running` is false (used by gradient checks to stay pure).
    pub fn forward_train(&mut self, x: &Feat<F>, update_running: bool) -> (Feat<F>, BnCache<F>) {
        assert_eq!(x.c, self.c);
        let n_per_c = (x.n * x.h * x.w) as f64;
        let plane = x.plane_len();
        let mut y = Feat::zeros(x.n, self.c, x.h, x.w);
        let mut xhat = Feat::zeros(x.n, self.c, x.h, x.w);
        let mut inv_std = vec![F::zero(); self.c];
        let mut means = vec![F::zero(); self.c];
        let mut vars_biased = vec![0.0f64; self.c];

        // Per-channel statistics; channels are independent so the parallel
        // split cannot reorder any reduction.
        let stats: Vec<(F, F, f64)> = (0..self.c)
            .into_par_iter()
            .map(|ch| {
                let mut sum = F::zero();
                for b in 0..x.n {
                    for &v in x.plane(b, ch) {
                        sum += v;
                    }
                }
                let mean = sum / F::from_f64(n_per_c);
                let mut sq = F::zero();
                for b in 0..x.n {
                    for &v in x.plane(b, ch) {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq.to_f64() / n_per_c;
                (mean, F::from_f64(1.0 / (var + self.eps).sqrt()), var)
            })
            .collect();
        for (ch, &(mean, istd, var)) in stats.iter().enumerate() {
            means[ch] = mean;
            inv_std[ch] = istd;
            vars_biased[ch] = var;
        }

        {
            let xh = &mut xhat.data;
            let yd = &mut y.data;
            xh.par_chunks_mut(plane)
                .zip(yd.par_chunks_mut(plane))
                .enumerate()
                .for_each(|(pi, (xh_p, y_p))| {
                    let ch = pi % self.c;
                    let b = pi / self.c;
                    let g = self.gamma.data[ch];
                    let be = self.beta.data[ch];
                    let m = means[ch];
                    let istd = inv_std[ch];
                    for ((xh_v, y_v), &v) in
                        xh_p.iter_mut().zip(y_p.iter_mut()).zip(x.plane(b, ch))
                    {
                        let h = (v - m) * istd;
                        *xh_v = h;
                        *y_v = g * h + be;
                    }
                });
        }

        if update_running {
            let m = self.momentum;
            let unbias = if n_per_c > 1.0 { n_per_c / (n_per_c - 1.0) } else { 1.0 };
            for ch in 0..self.c {
                let rm = self.running_mean.data[ch].to_f64();
                let rv = self.running_var.data[ch].to_f64();
                self.running_mean.data[ch] =
                    F::from_f64((1.0 - m) * rm + m * means[ch].to_f64());
                self.running_var.data[ch] =
                    F::from_f64((1.0 - m) * rv + m * vars_biased[ch] * unbias);
            }
        }

        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Feat<F>) -> Feat<F> {
        assert_eq!(x.c, self.c);
        let plane = x.plane_len();
        let scale: Vec<F> = (0..self.c)
            .map(|ch| {
                let rv = self.running_var.data[ch].to_f64();
                F::from_f64(self.gamma.data[ch].to_f64() / (rv + self.eps).sqrt())
            })
            .collect();
        let shift: Vec<F> = (0..self.c)
            .map(|ch| self.beta.data[ch] - scale[ch] * self.running_mean.data[ch])
            .collect();
        let mut y = Feat::zeros(x.n, self.c, x.h, x.w);
        y.data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(pi, y_p)| {
                let ch = pi % self.c;
                let b = pi / self.c;
                let s = scale[ch];
                let t = shift[ch];
                for (y_v, &v) in y_p.iter_mut().zip(x.plane(b, ch)) {
                    *y_v = s * v + t;
                }
            });
        y
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Feat<F>) -> Feat<F> {
        let xhat = &cache.xhat;
        assert!(dy.same_shape(xhat));
        let n_per_c = F::from_f64((dy.n * dy.h * dy.w) as f64);
        let mut dx = Feat::zeros(dy.n, dy.c, dy.h, dy.w);

        let sums: Vec<(F, F)> = (0..self.c)
            .into_par_iter()
            .map(|ch| {
                let mut s_dy = F::zero();
                let mut s_dy_xhat = F::zero();
                for b in 0..dy.n {
                    for (&g, &h) in dy.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                        s_dy += g;
                        s_dy_xhat += g * h;
                    }
                }
                (s_dy, s_dy_xhat)
            })
            .collect();

        for (ch, &(s_dy, s_dy_xhat)) in sums.iter().enumerate() {
            self.beta.grad[ch] += s_dy;
            self.gamma.grad[ch] += s_dy_xhat;
        }

        let plane = dy.plane_len();
        dx.data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(pi, dx_p)| {
                let ch = pi % self.c;
                let b = pi / self.c;
                let (s_dy, s_dy_xhat) = sums[ch];
                let coef = self.gamma.data[ch] * cache.inv_std[ch] / n_per_c;
                for ((d, &g), &h) in dx_p
                    .iter_mut()
                    .zip(dy.plane(b, ch))
                    .zip(xhat.plane(b, ch))
                {
                    *d = coef * (n_per_c * g - s_dy - h * s_dy_xhat);
                }
            });
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: super::ParamVisitor<F>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}
