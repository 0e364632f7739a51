//! Elementwise activations with explicit backward passes.

use super::{Feat, Scalar};
use rayon::prelude::*;

pub fn relu_forward<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let mut y = x.clone();
    y.data.par_iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v = F::zero();
        }
    });
    y
}

/// Backward through ReLU given the forward *output*: passes gradient where
/// the output is strictly positive.
pub fn relu_backward<F: Scalar>(y: &Feat<F>, dy: &Feat<F>) -> Feat<F> {
    assert!(y.same_shape(dy));
    let mut dx = dy.clone();
    dx.data
        .par_iter_mut()
        .zip(y.data.par_iter())
        .for_each(|(g, &v)| {
            if v <= F::zero() {
                *g = F::zero();
            }
        });
    dx
}

pub fn leaky_relu_forward<F: Scalar>(x: &Feat<F>, slope: f64) -> Feat<F> {
    let s = F::from_f64(slope);
    let mut y = x.clone();
    y.data.par_iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v *= s;
        }
    });
    y
}

/// Backward through leaky ReLU given the forward output (the slope is
/// positive, so the output sign matches the input sign).
pub fn leaky_relu_backward<F: Scalar>(y: &Feat<F>, dy: &Feat<F>, slope: f64) -> Feat<F> {
    assert!(y.same_shape(dy));
    let s = F::from_f64(slope);
    let mut dx = dy.clone();
    dx.data
        .par_iter_mut()
        .zip(y.data.par_iter())
        .for_each(|(g, &v)| {
            if v <= F::zero() {
                *g *= s;
            }
        });
    dx
}

pub fn sigmoid_forward<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let mut y = x.clone();
    y.data
        .par_iter_mut()
        .for_each(|v| *v = F::one() / (F::one() + (-*v).exp()));
    y
}

pub fn sigmoid_backward<F: Scalar>(y: &Feat<F>, dy: &Feat<F>) -> Feat<F> {
    assert!(y.same_shape(dy));
    let mut dx = dy.clone();
    dx.data
        .par_iter_mut()
        .zip(y.data.par_iter())
        .for_each(|(g, &v)| *g = *g * v * (F::one() - v));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_and_gates() {
        let x = Feat::from_vec(1, 1, 1, 4, vec![-1.0f64, 0.0, 0.5, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 0.5, 2.0]);
        let dy = Feat::from_vec(1, 1, 1, 4, vec![1.0; 4]);
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx.data, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn leaky_relu_scales_negatives() {
        let x = Feat::from_vec(1, 1, 1, 3, vec![-2.0f64, 0.0, 3.0]);
        let y = leaky_relu_forward(&x, 0.2);
        assert_eq!(y.data, vec![-0.4, 0.0, 3.0]);
        let dy = Feat::from_vec(1, 1, 1, 3, vec![1.0; 3]);
        let dx = leaky_relu_backward(&y, &dy, 0.2);
        assert_eq!(dx.data, vec![0.2, 0.2, 1.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Feat::from_vec(1, 1, 1, 1, vec![0.0f64]);
        let y = sigmoid_forward(&x);
        assert_eq!(y.data[0], 0.5);
        let dy = Feat::from_vec(1, 1, 1, 1, vec![1.0]);
        let dx = sigmoid_backward(&y, &dy);
        assert_eq!(dx.data[0], 0.25);
    }
}
