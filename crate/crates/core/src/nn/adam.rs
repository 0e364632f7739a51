//! Adam optimizer with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
//!
//! `step` consumes and zeroes the gradients of the parameters it is given.
//! State vectors are keyed by position, so callers must pass parameters in a
//! fixed order on every step.

use super::{Param, Scalar};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        self.step_visit(|f| {
            for p in params.iter_mut() {
                f("", p);
            }
        });
    }

    /// Step over parameters supplied through a visitor walk. The walk must
    /// yield the same parameters in the same order on every step.
    pub fn step_visit(&mut self, walk: impl FnOnce(&mut dyn FnMut(&str, &mut Param<F>))) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let first = self.m.is_empty();
        let m_all = &mut self.m;
        let v_all = &mut self.v;
        let mut idx = 0usize;
        walk(&mut |_name, p| {
            if first {
                let len = if p.trainable { p.numel() } else { 0 };
                m_all.push(vec![F::zero(); len]);
                v_all.push(vec![F::zero(); len]);
            }
            assert!(idx < m_all.len(), "parameter walk grew between steps");
            if p.trainable {
                let m = &mut m_all[idx];
                let v = &mut v_all[idx];
                for ((x, g), (mi, vi)) in p
                    .data
                    .iter_mut()
                    .zip(p.grad.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = b1 * *mi + (one - b1) * *g;
                    *vi = b2 * *vi + (one - b2) * *g * *g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + eps);
                }
                p.zero_grad();
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges() {
        // minimize f(x) = (x - 3)^2
        let mut p = Param::<f64>::new(vec![1], vec![0.0], true);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.data[0] - 3.0);
            opt.step(&mut [&mut p]);
        }
        assert!((p.data[0] - 3.0).abs() < 1e-3, "got {}", p.data[0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Param::<f64>::new(vec![1], vec![1.0], true);
        let mut opt = Adam::new(1e-3);
        p.grad[0] = 0.42;
        opt.step(&mut [&mut p]);
        // bias-corrected first step is lr * g / (|g| + eps') ~= lr
        assert!((p.data[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert_eq!(p.grad[0], 0.0, "step zeroes the gradient");
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        let mut p = Param::<f64>::new(vec![1], vec![5.0], false);
        let mut opt = Adam::new(0.1);
        p.grad[0] = 1.0;
        opt.step(&mut [&mut p]);
        assert_eq!(p.data[0], 5.0);
    }
}
