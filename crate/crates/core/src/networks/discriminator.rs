//! Conditional patch discriminator: five stride-2/stride-1 convolutions over
//! the image/segmentation channel stack, scoring overlapping patches through
//! a final sigmoid.

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu_backward, leaky_relu_forward, sigmoid_backward, sigmoid_forward, BatchNorm2d,
    BnCache, Conv2d, ConvCache, Feat, ParamVisitor, Scalar,
};
use crate::rng::{self, Rng};

const LEAKY_SLOPE: f64 = 0.2;

/// (in_channels, out_channels, stride) of the five layers; all kernels are
/// 4x4 with padding 1. Layers 2-4 carry batch normalization.
const LAYERS: [(usize, usize, usize); 5] =
    [(5, 64, 2), (64, 128, 2), (128, 256, 2), (256, 512, 1), (512, 1, 1)];

pub struct Discriminator<F> {
    convs: Vec<Conv2d<F>>,
    norms: Vec<BatchNorm2d<F>>, // for layers 1..=3 (0-indexed)
}

pub struct DiscriminatorCache<F> {
    convs: Vec<ConvCache<F>>,
    norms: Vec<BnCache<F>>,
    acts: Vec<Feat<F>>, // leaky-relu outputs of layers 0..=3
    scores: Feat<F>,    // sigmoid output
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::from_path(seed, &[rng::stream::DISCRIMINATOR_INIT]);
        let convs = LAYERS
            .iter()
            .map(|&(ci, co, s)| Conv2d::square(ci, co, 4, s, 1, &mut rng))
            .collect();
        let norms = LAYERS[1..4]
            .iter()
            .map(|&(_, co, _)| BatchNorm2d::new(co))
            .collect();
        Discriminator { convs, norms }
    }

    /// Score-map side for a square input, or an error when the stride chain
    /// shrinks some layer below one pixel.
    pub fn score_side(side: usize) -> Result<usize> {
        let mut s = side;
        for (i, &(_, _, stride)) in LAYERS.iter().enumerate() {
            let padded = s + 2;
            if padded < 4 {
                return Err(Error::ShapeMismatch(format!(
                    "input side {side} collapses at discriminator layer {}",
                    i + 1
                )));
            }
            s = (padded - 4) / stride + 1;
            if s == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "input side {side} collapses at discriminator layer {}",
                    i + 1
                )));
            }
        }
        Ok(s)
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                total += p.numel();
            }
        });
        total
    }

    /// Closed-form trainable parameter count from the layer table.
    pub fn parameter_count_formula() -> usize {
        let convs: usize = LAYERS.iter().map(|&(ci, co, _)| 16 * ci * co + co).sum();
        let norms: usize = LAYERS[1..4].iter().map(|&(_, co, _)| 2 * co).sum();
        convs + norms
    }

    pub fn forward_train(
        &mut self,
        x: &Feat<F>,
        update_running: bool,
    ) -> Result<(Feat<F>, DiscriminatorCache<F>)> {
        Self::score_side(x.h.max(x.w))?;
        let mut convs = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(3);
        let mut acts = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(&cur)?;
            convs.push(cache);
            cur = y;
            if i == 4 {
                break;
            }
            if i >= 1 {
                let (y, cache) = self.norms[i - 1].forward_train(&cur, update_running);
                norms.push(cache);
                cur = y;
            }
            cur = leaky_relu_forward(&cur, LEAKY_SLOPE);
            acts.push(cur.clone());
        }
        let scores = sigmoid_forward(&cur);
        Ok((
            scores.clone(),
            DiscriminatorCache {
                convs,
                norms,
                acts,
                scores,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Feat<F>) -> Result<Feat<F>> {
        Self::score_side(x.h.max(x.w))?;
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, _) = conv.forward(&cur)?;
            cur = y;
            if i == 4 {
                break;
            }
            if i >= 1 {
                cur = self.norms[i - 1].forward_eval(&cur);
            }
            cur = leaky_relu_forward(&cur, LEAKY_SLOPE);
        }
        Ok(sigmoid_forward(&cur))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the 5-channel input stack.
    pub fn backward(&mut self, cache: &DiscriminatorCache<F>, dscores: &Feat<F>) -> Feat<F> {
        let mut d = sigmoid_backward(&cache.scores, dscores);
        for i in (0..5).rev() {
            if i < 4 {
                d = leaky_relu_backward(&cache.acts[i], &d, LEAKY_SLOPE);
                if i >= 1 {
                    d = self.norms[i - 1].backward(&cache.norms[i - 1], &d);
                }
            }
            d = self.convs[i].backward(&cache.convs[i], &d);
        }
        d
    }

    pub fn visit_params(&mut self, f: ParamVisitor<F>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("disc.conv{}", i + 1), f);
        }
        for (i, norm) in self.norms.iter_mut().enumerate() {
            norm.visit_params(&format!("disc.bn{}", i + 2), f);
        }
    }

    /// Zero the final layer so every patch score is exactly sigmoid(0) = 0.5.
    pub fn zero_final_layer(&mut self) {
        let conv = &mut self.convs[4];
        for v in conv.weight.data.iter_mut().chain(conv.bias.data.iter_mut()) {
            *v = F::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_side_follows_the_stride_chain() {
        // 512 -> 256 -> 128 -> 64 -> 63 -> 62
        assert_eq!(Discriminator::<f32>::score_side(512).unwrap(), 62);
        // 64 -> 32 -> 16 -> 8 -> 7 -> 6
        assert_eq!(Discriminator::<f32>::score_side(64).unwrap(), 6);
        assert_eq!(Discriminator::<f32>::score_side(32).unwrap(), 2);
        assert!(Discriminator::<f32>::score_side(16).is_err());
    }

    #[test]
    fn parameter_count_matches_formula() {
        let mut d = Discriminator::<f32>::new(0);
        assert_eq!(d.parameter_count(), Discriminator::<f32>::parameter_count_formula());
    }

    #[test]
    fn zeroed_final_layer_scores_half() {
        let mut d = Discriminator::<f64>::new(1);
        d.zero_final_layer();
        let x = Feat::from_vec(
            1,
            5,
            32,
            32,
            (0..5 * 32 * 32).map(|i| (i % 13) as f64 / 13.0).collect(),
        );
        let (scores, _) = d.forward_train(&x, false).unwrap();
        assert_eq!((scores.c, scores.h, scores.w), (1, 2, 2));
        assert!(scores.data.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = Discriminator::<f32>::new(9);
        let mut b = Discriminator::<f32>::new(9);
        let mut va = Vec::new();
        a.visit_params(&mut |_, p| va.extend_from_slice(&p.data));
        let mut vb = Vec::new();
        b.visit_params(&mut |_, p| vb.extend_from_slice(&p.data));
        assert_eq!(va, vb);
    }
}
