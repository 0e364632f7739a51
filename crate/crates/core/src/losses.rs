//! Training objectives: batch-level Dice loss, least-squares adversarial
//! losses for the discriminator and generator, and the gated combination
//! driving the generator update.

use crate::error::{Error, Result};
use crate::nn::Scalar;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

/// Loss hyperparameters. `lambda` weighs the adversarial term against the
/// Dice term, and the adversarial machinery runs only on batch indices that
/// are multiples of `gate_period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub gate_period: u64,
    /// Least-squares targets: fake, real, and the generator's target.
    pub lsgan_targets: (f64, f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-7,
            lambda: 0.01,
            gate_period: 100,
            lsgan_targets: (0.0, 1.0, 1.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.gate_period == 0 {
            return Err(Error::InvalidConfig("gate_period must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_dice_inputs<F: Scalar>(p: &ArrayView2<F>, t: &ArrayView2<F>) -> Result<()> {
    if p.dim() != t.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction shape {:?} does not match target shape {:?}",
            p.dim(),
            t.dim()
        )));
    }
    if p.is_empty() {
        return Err(Error::ShapeMismatch("empty prediction".into()));
    }
    for &v in p.iter() {
        if !(v >= F::zero() && v <= F::one()) {
            return Err(Error::InvalidConfig(format!(
                "prediction outside [0, 1]: {v}"
            )));
        }
    }
    for &v in t.iter() {
        if !(v == F::zero() || v == F::one()) {
            return Err(Error::InvalidConfig(format!("target outside {{0, 1}}: {v}")));
        }
    }
    Ok(())
}

/// Soft Dice loss pooled over every slice and voxel of the batch jointly:
/// -(2 * sum(T * P) + eps) / (sum(T^2) + sum(P^2) + eps). The joint pooling
/// keeps slices without foreground from destabilizing the ratio.
pub fn batch_dice_loss<F: Scalar>(
    predictions: ArrayView2<F>,
    targets: ArrayView2<F>,
    epsilon: f64,
) -> Result<F> {
    check_dice_inputs(&predictions, &targets)?;
    let eps = F::from_f64(epsilon);
    let mut inter = F::zero();
    let mut sum_t2 = F::zero();
    let mut sum_p2 = F::zero();
    for (&p, &t) in predictions.iter().zip(targets.iter()) {
        inter += t * p;
        sum_t2 += t * t;
        sum_p2 += p * p;
    }
    let two = F::from_f64(2.0);
    Ok(-(two * inter + eps) / (sum_t2 + sum_p2 + eps))
}

/// Gradient of [`batch_dice_loss`] with respect to the predictions.
pub fn batch_dice_loss_grad<F: Scalar>(
    predictions: ArrayView2<F>,
    targets: ArrayView2<F>,
    epsilon: f64,
) -> Result<Array2<F>> {
    check_dice_inputs(&predictions, &targets)?;
    let eps = F::from_f64(epsilon);
    let two = F::from_f64(2.0);
    let mut inter = F::zero();
    let mut sum_t2 = F::zero();
    let mut sum_p2 = F::zero();
    for (&p, &t) in predictions.iter().zip(targets.iter()) {
        inter += t * p;
        sum_t2 += t * t;
        sum_p2 += p * p;
    }
    let num = two * inter + eps;
    let den = sum_t2 + sum_p2 + eps;
    // d/dP_i of -(num/den) = -(2 T_i * den - num * 2 P_i) / den^2
    let den2 = den * den;
    let mut grad = Array2::from_elem(predictions.dim(), F::zero());
    for ((g, &p), &t) in grad.iter_mut().zip(predictions.iter()).zip(targets.iter()) {
        *g = -(two * t * den - num * two * p) / den2;
    }
    Ok(grad)
}

fn check_scores<F: Scalar>(scores: &Array3<F>) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::ShapeMismatch("empty score map".into()));
    }
    Ok(())
}

/// Least-squares discriminator objective:
/// 0.5 * mean((real - b)^2) + 0.5 * mean((fake - a)^2), means taken over all
/// batch entries and patch positions of each map.
pub fn lsgan_discriminator_loss<F: Scalar>(
    scores_real: &Array3<F>,
    scores_fake: &Array3<F>,
    a: f64,
    b: f64,
) -> Result<F> {
    check_scores(scores_real)?;
    check_scores(scores_fake)?;
    let half = F::from_f64(0.5);
    let ta = F::from_f64(a);
    let tb = F::from_f64(b);
    let mut real = F::zero();
    for &s in scores_real.iter() {
        let d = s - tb;
        real += d * d;
    }
    let mut fake = F::zero();
    for &s in scores_fake.iter() {
        let d = s - ta;
        fake += d * d;
    }
    Ok(half * real / F::from_f64(scores_real.len() as f64)
        + half * fake / F::from_f64(scores_fake.len() as f64))
}

/// Gradients of [`lsgan_discriminator_loss`] with respect to both score maps.
pub fn lsgan_discriminator_loss_grad<F: Scalar>(
    scores_real: &Array3<F>,
    scores_fake: &Array3<F>,
    a: f64,
    b: f64,
) -> Result<(Array3<F>, Array3<F>)> {
    check_scores(scores_real)?;
    check_scores(scores_fake)?;
    let ta = F::from_f64(a);
    let tb = F::from_f64(b);
    let nr = F::from_f64(scores_real.len() as f64);
    let nf = F::from_f64(scores_fake.len() as f64);
    let dreal = scores_real.mapv(|s| (s - tb) / nr);
    let dfake = scores_fake.mapv(|s| (s - ta) / nf);
    Ok((dreal, dfake))
}

/// Least-squares generator objective: 0.5 * mean((fake - c)^2).
pub fn lsgan_generator_loss<F: Scalar>(scores_fake: &Array3<F>, c: f64) -> Result<F> {
    check_scores(scores_fake)?;
    let tc = F::from_f64(c);
    let mut acc = F::zero();
    for &s in scores_fake.iter() {
        let d = s - tc;
        acc += d * d;
    }
    Ok(F::from_f64(0.5) * acc / F::from_f64(scores_fake.len() as f64))
}

/// Gradient of [`lsgan_generator_loss`] with respect to the scores.
pub fn lsgan_generator_loss_grad<F: Scalar>(scores_fake: &Array3<F>, c: f64) -> Result<Array3<F>> {
    check_scores(scores_fake)?;
    let tc = F::from_f64(c);
    let n = F::from_f64(scores_fake.len() as f64);
    Ok(scores_fake.mapv(|s| (s - tc) / n))
}

/// Indicator gate: 1 exactly when the 1-based batch index is a multiple of
/// `k`, so the adversarial term participates once every `k` batches.
pub fn gan_gate(batch_index: u64, k: u64) -> u64 {
    debug_assert!(batch_index >= 1);
    debug_assert!(k >= 1);
    u64::from(batch_index.is_multiple_of(k))
}

/// The generator's training objective: Dice plus the gated, weighted
/// adversarial term. With `lambda = 0` this reduces exactly to the Dice-only
/// objective.
pub fn combined_generator_loss(
    dice: f64,
    gan_generator: f64,
    cfg: &LossConfig,
    batch_index: u64,
) -> f64 {
    dice + cfg.lambda * gan_generator * gan_gate(batch_index, cfg.gate_period) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::{Array2, Array3};

    /// Scalar-loop oracle for the batch Dice loss.
    fn dice_oracle(p: &Array2<f64>, t: &Array2<f64>, eps: f64) -> f64 {
        let (b, n) = p.dim();
        let mut inter = 0.0;
        let mut t2 = 0.0;
        let mut p2 = 0.0;
        for bi in 0..b {
            for i in 0..n {
                inter += t[[bi, i]] * p[[bi, i]];
                t2 += t[[bi, i]] * t[[bi, i]];
                p2 += p[[bi, i]] * p[[bi, i]];
            }
        }
        -(2.0 * inter + eps) / (t2 + p2 + eps)
    }

    #[test]
    fn dice_perfect_match_is_minus_one() {
        let t = Array2::from_shape_fn((2, 8), |(b, i)| f64::from((b + i) % 3 == 0));
        assert!(t.sum() > 0.0);
        let loss = batch_dice_loss(t.view(), t.view(), 1e-7).unwrap();
        assert_eq!(loss, -1.0);
    }

    #[test]
    fn dice_all_empty_is_minus_one() {
        let z = Array2::<f64>::zeros((2, 5));
        let loss = batch_dice_loss(z.view(), z.view(), 1e-7).unwrap();
        assert_eq!(loss, -1.0); // -eps/eps
    }

    #[test]
    fn dice_disjoint_single_voxels() {
        let mut p = Array2::<f64>::zeros((1, 4));
        let mut t = Array2::<f64>::zeros((1, 4));
        p[[0, 1]] = 1.0;
        t[[0, 2]] = 1.0;
        let loss = batch_dice_loss(p.view(), t.view(), 1e-7).unwrap();
        let expect = -(1e-7) / (2.0 + 1e-7);
        assert!((loss - expect).abs() < 1e-18);
        assert!((loss - -5.0e-8).abs() < 1e-9);
    }

    #[test]
    fn dice_matches_oracle_on_random_instances() {
        let mut rng = Rng::new(42);
        for _ in 0..50 {
            let b = 1 + rng.below(3) as usize;
            let n = 4 + rng.below(13) as usize;
            let p = Array2::from_shape_fn((b, n), |_| rng.uniform());
            let t = Array2::from_shape_fn((b, n), |_| f64::from(rng.uniform() < 0.4));
            let loss = batch_dice_loss(p.view(), t.view(), 1e-7).unwrap();
            let oracle = dice_oracle(&p, &t, 1e-7);
            let rel = (loss - oracle).abs() / oracle.abs().max(1e-30);
            assert!(rel < 1e-12, "rel {rel}");
        }
    }

    #[test]
    fn dice_range_and_validation() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let p = Array2::from_shape_fn((2, 9), |_| rng.uniform());
            let t = Array2::from_shape_fn((2, 9), |_| f64::from(rng.uniform() < 0.5));
            let loss = batch_dice_loss(p.view(), t.view(), 1e-7).unwrap();
            assert!((-1.0..0.0).contains(&loss), "loss {loss}");
        }
        let p = Array2::from_elem((1, 2), 1.5);
        let t = Array2::<f64>::zeros((1, 2));
        assert!(batch_dice_loss(p.view(), t.view(), 1e-7).is_err());
        let p = Array2::<f64>::zeros((1, 3));
        assert!(batch_dice_loss(p.view(), t.view(), 1e-7).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let b = 2;
        let n = 9;
        let p = Array2::from_shape_fn((b, n), |_| 0.05 + 0.9 * rng.uniform());
        let t = Array2::from_shape_fn((b, n), |_| f64::from(rng.uniform() < 0.5));
        let grad = batch_dice_loss_grad(p.view(), t.view(), 1e-7).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for bi in 0..b {
            for i in 0..n {
                let mut pp = p.clone();
                pp[[bi, i]] += h;
                let lp = batch_dice_loss(pp.view(), t.view(), 1e-7).unwrap();
                pp[[bi, i]] -= 2.0 * h;
                let lm = batch_dice_loss(pp.view(), t.view(), 1e-7).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[[bi, i]] - fd).abs() / fd.abs().max(grad[[bi, i]].abs()).max(1e-12);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn dice_is_permutation_invariant_bitwise_on_dyadic_inputs() {
        // Values on a 1/128 grid sum exactly in f64, so reordering is exact.
        let mut rng = Rng::new(13);
        let flat_p: Vec<f64> = (0..24).map(|_| rng.below(129) as f64 / 128.0).collect();
        let flat_t: Vec<f64> = (0..24).map(|_| f64::from(rng.uniform() < 0.5)).collect();
        let p = Array2::from_shape_vec((3, 8), flat_p.clone()).unwrap();
        let t = Array2::from_shape_vec((3, 8), flat_t.clone()).unwrap();
        let mut order: Vec<usize> = (0..24).collect();
        rng.shuffle(&mut order);
        let p2 = Array2::from_shape_vec((3, 8), order.iter().map(|&i| flat_p[i]).collect()).unwrap();
        let t2 = Array2::from_shape_vec((3, 8), order.iter().map(|&i| flat_t[i]).collect()).unwrap();
        let a = batch_dice_loss(p.view(), t.view(), 1e-7).unwrap();
        let b = batch_dice_loss(p2.view(), t2.view(), 1e-7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dice_batch_pooling_tolerates_an_empty_slice() {
        // 11 well-predicted slices plus one empty-mask slice with spurious
        // foreground: the pooled ratio barely moves.
        let n = 16;
        let mut p = Array2::<f64>::zeros((12, n));
        let mut t = Array2::<f64>::zeros((12, n));
        for b in 0..11 {
            for i in 0..6 {
                p[[b, i]] = 1.0;
                t[[b, i]] = 1.0;
            }
        }
        let well = batch_dice_loss(p.slice(ndarray::s![..11, ..]), t.slice(ndarray::s![..11, ..]), 1e-7)
            .unwrap();
        // the appended slice has an empty mask but nonzero predictions
        p[[11, 3]] = 0.8;
        p[[11, 7]] = 0.6;
        let full = batch_dice_loss(p.view(), t.view(), 1e-7).unwrap();
        assert!(full.is_finite());
        assert!((full - well).abs() < 0.5, "batch loss moved by {}", (full - well).abs());
    }

    /// Scalar-loop oracles for the least-squares objectives.
    fn lsgan_d_oracle(r: &Array3<f64>, f: &Array3<f64>, a: f64, b: f64) -> f64 {
        let mut sr = 0.0;
        for &s in r.iter() {
            sr += (s - b) * (s - b);
        }
        let mut sf = 0.0;
        for &s in f.iter() {
            sf += (s - a) * (s - a);
        }
        0.5 * sr / r.len() as f64 + 0.5 * sf / f.len() as f64
    }

    #[test]
    fn lsgan_discriminator_closed_forms() {
        let ones = Array3::from_elem((2, 3, 3), 1.0);
        let zeros = Array3::from_elem((2, 3, 3), 0.0);
        assert_eq!(lsgan_discriminator_loss(&ones, &zeros, 0.0, 1.0).unwrap(), 0.0);
        let half = Array3::from_elem((1, 4, 4), 0.5);
        let loss = lsgan_discriminator_loss(&half, &half, 0.0, 1.0).unwrap();
        assert_eq!(loss, 0.25);
    }

    #[test]
    fn lsgan_matches_oracle_on_random_maps() {
        let mut rng = Rng::new(21);
        for _ in 0..50 {
            let r = Array3::from_shape_fn((2, 3, 4), |_| rng.uniform());
            let f = Array3::from_shape_fn((1, 5, 2), |_| rng.uniform());
            let ours = lsgan_discriminator_loss(&r, &f, 0.0, 1.0).unwrap();
            let oracle = lsgan_d_oracle(&r, &f, 0.0, 1.0);
            assert!((ours - oracle).abs() / oracle.abs().max(1e-30) < 1e-12);

            let g = lsgan_generator_loss(&f, 1.0).unwrap();
            let g_oracle: f64 =
                f.iter().map(|&s| (s - 1.0) * (s - 1.0)).sum::<f64>() * 0.5 / f.len() as f64;
            assert!((g - g_oracle).abs() / g_oracle.abs().max(1e-30) < 1e-12);
        }
    }

    #[test]
    fn lsgan_generator_closed_forms() {
        let c_map = Array3::from_elem((1, 2, 2), 1.0);
        assert_eq!(lsgan_generator_loss(&c_map, 1.0).unwrap(), 0.0);
        let zeros = Array3::from_elem((3, 2, 2), 0.0);
        assert_eq!(lsgan_generator_loss(&zeros, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn lsgan_rejects_empty_maps() {
        let empty = Array3::<f64>::zeros((0, 2, 2));
        let ok = Array3::from_elem((1, 2, 2), 0.5);
        assert!(lsgan_discriminator_loss(&empty, &ok, 0.0, 1.0).is_err());
        assert!(lsgan_generator_loss(&empty, 1.0).is_err());
    }

    #[test]
    fn gate_fires_on_multiples_only() {
        assert_eq!(gan_gate(100, 100), 1);
        assert_eq!(gan_gate(99, 100), 0);
        assert_eq!(gan_gate(1, 100), 0);
        assert_eq!(gan_gate(200, 100), 1);
        let fired: u64 = (1..=1000).map(|b| gan_gate(b, 100)).sum();
        assert_eq!(fired, 10);
    }

    #[test]
    fn combined_loss_applies_gate_and_lambda() {
        let cfg = LossConfig::default();
        let on = combined_generator_loss(-0.9, 0.5, &cfg, 100);
        assert!((on - -0.895).abs() < 1e-15);
        let off = combined_generator_loss(-0.9, 0.5, &cfg, 50);
        assert_eq!(off, -0.9);
        let no_gan = LossConfig { lambda: 0.0, ..LossConfig::default() };
        for b in [1u64, 50, 100, 1000] {
            assert_eq!(combined_generator_loss(-0.7, 123.0, &no_gan, b), -0.7);
        }
    }

    #[test]
    fn lsgan_gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        let r = Array3::from_shape_fn((1, 3, 3), |_| rng.uniform());
        let f = Array3::from_shape_fn((1, 3, 3), |_| rng.uniform());
        let (dr, df) = lsgan_discriminator_loss_grad(&r, &f, 0.0, 1.0).unwrap();
        let dg = lsgan_generator_loss_grad(&f, 1.0).unwrap();
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [0, 1, 2], [0, 2, 1]] {
            let mut rp = r.clone();
            rp[idx] += h;
            let lp = lsgan_discriminator_loss(&rp, &f, 0.0, 1.0).unwrap();
            rp[idx] -= 2.0 * h;
            let lm = lsgan_discriminator_loss(&rp, &f, 0.0, 1.0).unwrap();
            assert!((dr[idx] - (lp - lm) / (2.0 * h)).abs() < 1e-9);

            let mut fp = f.clone();
            fp[idx] += h;
            let lp = lsgan_discriminator_loss(&r, &fp, 0.0, 1.0).unwrap();
            let gp = lsgan_generator_loss(&fp, 1.0).unwrap();
            fp[idx] -= 2.0 * h;
            let lm = lsgan_discriminator_loss(&r, &fp, 0.0, 1.0).unwrap();
            let gm = lsgan_generator_loss(&fp, 1.0).unwrap();
            assert!((df[idx] - (lp - lm) / (2.0 * h)).abs() < 1e-9);
            assert!((dg[idx] - (gp - gm) / (2.0 * h)).abs() < 1e-9);
        }
    }
}
