//! Network construction and evaluation: the segmentation generator and the
//! conditional patch discriminator.

pub mod blocks;
pub mod discriminator;
pub mod generator;

pub use blocks::{KernelMode, SkipConnector};
pub use discriminator::{Discriminator, DiscriminatorCache};
pub use generator::{Generator, GeneratorCache, GeneratorConfig};

use crate::error::{Error, Result};
use crate::nn::{Feat, Scalar};
use ndarray::{Array3, Array4};

/// Patch-score map, one value in (0, 1) per batch entry and patch position.
pub type ScoreMap<F> = Array3<F>;

pub fn build_generator(config: GeneratorConfig, seed: u64) -> Result<Generator<f32>> {
    Generator::new(config, seed)
}

pub fn build_discriminator(seed: u64) -> Discriminator<f32> {
    Discriminator::new(seed)
}

/// Convert a batch of channel-last images [B, H, W, C] into the internal
/// channel-first layout.
pub fn feat_from_bhwc<F: Scalar>(x: &Array4<F>) -> Feat<F> {
    let (n, h, w, c) = x.dim();
    let mut feat = Feat::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let plane = feat.plane_mut(b, ch);
            for r in 0..h {
                for col in 0..w {
                    plane[r * w + col] = x[[b, r, col, ch]];
                }
            }
        }
    }
    feat
}

/// Convert the internal channel-first layout back to channel-last.
pub fn bhwc_from_feat<F: Scalar>(x: &Feat<F>) -> Array4<F> {
    let mut out = Array4::from_elem((x.n, x.h, x.w, x.c), F::zero());
    for b in 0..x.n {
        for ch in 0..x.c {
            let plane = x.plane(b, ch);
            for r in 0..x.h {
                for col in 0..x.w {
                    out[[b, r, col, ch]] = plane[r * x.w + col];
                }
            }
        }
    }
    out
}

/// Replicate single-channel masks into a [background, foreground] one-hot
/// channel pair, the conditional layout the discriminator consumes.
pub fn onehot_pair<F: Scalar>(masks: &Array3<F>) -> Feat<F> {
    let (n, h, w) = masks.dim();
    let mut feat = Feat::zeros(n, 2, h, w);
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                let m = masks[[b, r, c]];
                feat.plane_mut(b, 0)[r * w + c] = F::one() - m;
                feat.plane_mut(b, 1)[r * w + c] = m;
            }
        }
    }
    feat
}

/// Stack image channels with segmentation channels into the discriminator's
/// 5-channel conditional input.
pub fn concat_channels<F: Scalar>(images: &Feat<F>, seg: &Feat<F>) -> Feat<F> {
    assert_eq!(images.n, seg.n);
    assert_eq!(images.h, seg.h);
    assert_eq!(images.w, seg.w);
    let c = images.c + seg.c;
    let mut out = Feat::zeros(images.n, c, images.h, images.w);
    for b in 0..images.n {
        for ch in 0..images.c {
            out.plane_mut(b, ch).copy_from_slice(images.plane(b, ch));
        }
        for ch in 0..seg.c {
            out.plane_mut(b, images.c + ch).copy_from_slice(seg.plane(b, ch));
        }
    }
    out
}

/// Split a gradient over the 5-channel stack back into image/segmentation
/// parts, returning only the segmentation part (the image is data).
pub fn split_seg_grad<F: Scalar>(dstack: &Feat<F>, image_channels: usize) -> Feat<F> {
    let seg_c = dstack.c - image_channels;
    let mut out = Feat::zeros(dstack.n, seg_c, dstack.h, dstack.w);
    for b in 0..dstack.n {
        for ch in 0..seg_c {
            out.plane_mut(b, ch)
                .copy_from_slice(dstack.plane(b, image_channels + ch));
        }
    }
    out
}

/// Inference-mode generator forward: [B, S, S, 3] images to [B, S, S, 2]
/// logits.
pub fn generator_forward<F: Scalar>(gen: &Generator<F>, images: &Array4<F>) -> Result<Array4<F>> {
    let x = feat_from_bhwc(images);
    if let Some(bad) = x.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume(format!(
            "non-finite network input: {bad}"
        )));
    }
    let logits = gen.forward_eval(&x)?;
    Ok(bhwc_from_feat(&logits))
}

/// Softmax foreground probability of two-class logits [B, H, W, 2].
pub fn foreground_probability<F: Scalar>(logits: &Array4<F>) -> Result<Array3<F>> {
    let (n, h, w, c) = logits.dim();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "foreground probability requires exactly 2 classes, got {c}"
        )));
    }
    let mut out = Array3::from_elem((n, h, w), F::zero());
    for b in 0..n {
        for r in 0..h {
            for col in 0..w {
                let z = logits[[b, r, col, 1]] - logits[[b, r, col, 0]];
                out[[b, r, col]] = F::one() / (F::one() + (-z).exp());
            }
        }
    }
    Ok(out)
}

/// Softmax probability pair (background, foreground) over channel-first
/// two-class logits, as fed to the discriminator for generated masks.
pub fn softmax_pair<F: Scalar>(logits: &Feat<F>) -> Feat<F> {
    assert_eq!(logits.c, 2);
    let mut out = Feat::zeros(logits.n, 2, logits.h, logits.w);
    let plane = logits.plane_len();
    for b in 0..logits.n {
        for i in 0..plane {
            let l0 = logits.plane(b, 0)[i];
            let l1 = logits.plane(b, 1)[i];
            let p1 = F::one() / (F::one() + (l0 - l1).exp());
            let p0 = F::one() / (F::one() + (l1 - l0).exp());
            out.plane_mut(b, 0)[i] = p0;
            out.plane_mut(b, 1)[i] = p1;
        }
    }
    out
}

/// Chain a gradient on the softmax pair back to the two logit channels.
pub fn softmax_pair_backward<F: Scalar>(probs: &Feat<F>, dprobs: &Feat<F>) -> Feat<F> {
    assert_eq!(probs.c, 2);
    assert!(probs.same_shape(dprobs));
    let mut dlogits = Feat::zeros(probs.n, 2, probs.h, probs.w);
    let plane = probs.plane_len();
    for b in 0..probs.n {
        for i in 0..plane {
            let p0 = probs.plane(b, 0)[i];
            let p1 = probs.plane(b, 1)[i];
            let g0 = dprobs.plane(b, 0)[i];
            let g1 = dprobs.plane(b, 1)[i];
            // dL/dz with z = l1 - l0; p1 = sigmoid(z), p0 = sigmoid(-z)
            let dz = p0 * p1 * (g1 - g0);
            dlogits.plane_mut(b, 1)[i] = dz;
            dlogits.plane_mut(b, 0)[i] = -dz;
        }
    }
    dlogits
}

/// Inference-mode conditional discriminator forward over channel-last inputs:
/// images [B, H, W, 3] and segmentation probabilities/one-hots [B, H, W, 2].
pub fn discriminator_forward<F: Scalar>(
    disc: &Discriminator<F>,
    images: &Array4<F>,
    seg: &Array4<F>,
) -> Result<ScoreMap<F>> {
    let (n, h, w, c) = images.dim();
    let (n2, h2, w2, c2) = seg.dim();
    if c != 3 || c2 != 2 || n != n2 || h != h2 || w != w2 || h != w {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects square Bx3xSxS images with Bx2xSxS segmentation, got \
             images {:?} seg {:?}",
            images.dim(),
            seg.dim()
        )));
    }
    let stack = concat_channels(&feat_from_bhwc(images), &feat_from_bhwc(seg));
    let scores = disc.forward_eval(&stack)?;
    let mut out = Array3::from_elem((n, scores.h, scores.w), F::zero());
    for b in 0..n {
        let plane = scores.plane(b, 0);
        for r in 0..scores.h {
            for col in 0..scores.w {
                out[[b, r, col]] = plane[r * scores.w + col];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tiny_config(side: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: 2,
            kernel_mode: KernelMode::Real7,
            input_side: side,
            encoder_stage_channels: [8, 16, 32, 64, 128],
        }
    }

    fn random_images(n: usize, side: usize, seed: u64) -> Array4<f32> {
        let mut rng = Rng::new(seed);
        Array4::from_shape_fn((n, side, side, 3), |_| rng.uniform() as f32)
    }

    #[test]
    fn generator_output_shape_matches_input() {
        let gen = Generator::<f32>::new(tiny_config(32), 7).unwrap();
        let images = random_images(2, 32, 1);
        let logits = generator_forward(&gen, &images).unwrap();
        assert_eq!(logits.dim(), (2, 32, 32, 2));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_classifier_probability_is_half_everywhere() {
        let mut gen = Generator::<f32>::new(tiny_config(32), 7).unwrap();
        gen.zero_classifier();
        let images = random_images(1, 32, 2);
        let logits = generator_forward(&gen, &images).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let p = foreground_probability(&logits).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_is_per_sample_independent() {
        let gen = Generator::<f32>::new(tiny_config(32), 3).unwrap();
        let one = random_images(1, 32, 5);
        let mut two = Array4::zeros((2, 32, 32, 3));
        for b in 0..2 {
            two.index_axis_mut(ndarray::Axis(0), b).assign(&one.index_axis(ndarray::Axis(0), 0));
        }
        let l1 = generator_forward(&gen, &one).unwrap();
        let l2 = generator_forward(&gen, &two).unwrap();
        for b in 0..2 {
            assert_eq!(
                l2.index_axis(ndarray::Axis(0), b),
                l1.index_axis(ndarray::Axis(0), 0)
            );
        }
    }

    #[test]
    fn same_seed_builds_identical_generators() {
        let mut a = Generator::<f32>::new(tiny_config(32), 11).unwrap();
        let mut b = Generator::<f32>::new(tiny_config(32), 11).unwrap();
        let mut va = Vec::new();
        a.visit_params(&mut |_, p| va.extend_from_slice(&p.data));
        let mut vb = Vec::new();
        b.visit_params(&mut |_, p| vb.extend_from_slice(&p.data));
        assert_eq!(va, vb);
        let mut c = Generator::<f32>::new(tiny_config(32), 12).unwrap();
        let mut vc = Vec::new();
        c.visit_params(&mut |_, p| vc.extend_from_slice(&p.data));
        assert_ne!(va, vc);
    }

    #[test]
    fn encoder_stage_channels_default_match_bottleneck_arithmetic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(&cfg.encoder_stage_channels[1..], &[256, 512, 1024, 2048]);
    }

    #[test]
    fn foreground_probability_properties() {
        // symmetric logits -> 0.5
        let logits = Array4::<f64>::zeros((1, 2, 2, 2));
        let p = foreground_probability(&logits).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        // saturation
        let mut logits = Array4::<f64>::zeros((1, 1, 1, 2));
        logits[[0, 0, 0, 0]] = -1000.0;
        logits[[0, 0, 0, 1]] = 1000.0;
        let p = foreground_probability(&logits).unwrap();
        assert!((p[[0, 0, 0]] - 1.0).abs() < 1e-12);
        // shift invariance (exact for dyadic values)
        let mut a = Array4::<f64>::zeros((1, 1, 1, 2));
        a[[0, 0, 0, 0]] = 0.75;
        a[[0, 0, 0, 1]] = -1.25;
        let mut b = a.clone();
        b[[0, 0, 0, 0]] += 4.0;
        b[[0, 0, 0, 1]] += 4.0;
        assert_eq!(
            foreground_probability(&a).unwrap(),
            foreground_probability(&b).unwrap()
        );
        // wrong class count
        let bad = Array4::<f64>::zeros((1, 1, 1, 3));
        assert!(foreground_probability(&bad).is_err());
    }

    #[test]
    fn kernel_mode_parameter_counts_differ_as_per_formulas() {
        let mut real = Generator::<f32>::new(
            GeneratorConfig { input_side: 32, ..Default::default() },
            1,
        )
        .unwrap();
        let mut pseudo = Generator::<f32>::new(
            GeneratorConfig {
                input_side: 32,
                kernel_mode: KernelMode::Pseudo7,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let taps = [64usize, 256, 512, 1024, 2048];
        let formula = |mode: KernelMode| -> usize {
            taps.iter()
                .map(|&c| SkipConnector::<f32>::parameter_count_formula(mode, c, 2))
                .sum()
        };
        assert_eq!(real.skip_parameter_count(), formula(KernelMode::Real7));
        assert_eq!(pseudo.skip_parameter_count(), formula(KernelMode::Pseudo7));
        let diff = real.parameter_count() as i64 - pseudo.parameter_count() as i64;
        assert_eq!(
            diff,
            formula(KernelMode::Real7) as i64 - formula(KernelMode::Pseudo7) as i64
        );
        // the small-kernel baseline degenerates to plain 3x3 skips
        let small = Generator::<f32>::new(
            GeneratorConfig {
                input_side: 32,
                kernel_mode: KernelMode::Small3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(small.skip_parameter_count(), formula(KernelMode::Small3));
    }
}
