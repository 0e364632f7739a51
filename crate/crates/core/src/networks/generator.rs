//! The segmentation generator: a bottleneck encoder, five large-kernel skip
//! connectors, and a refine/upsample decoder emitting per-class logits at
//! input resolution.

use super::blocks::{
    Bottleneck, BottleneckCache, KernelMode, RefineBlock, RefineCache, SkipCache, SkipConnector,
};
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_forward, upsample2x_backward, upsample2x_forward, BatchNorm2d, BnCache,
    Conv2d, ConvCache, Feat, MaxPool2d, ParamVisitor, PoolCache, Scalar,
};
use crate::rng::{self, Rng};
use serde::{Deserialize, Serialize};

/// Bottleneck counts of the four encoder stages.
const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const POOL: MaxPool2d = MaxPool2d { k: 3, stride: 2, pad: 1 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub kernel_mode: KernelMode,
    /// Input slices are square with this side; five stride-2 reductions
    /// require a multiple of 32.
    pub input_side: usize,
    /// Channel widths after the stem and after each of the four stages.
    pub encoder_stage_channels: [usize; 5],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 2,
            kernel_mode: KernelMode::Real7,
            input_side: 512,
            encoder_stage_channels: [64, 256, 512, 1024, 2048],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(32) {
            return Err(Error::InvalidConfig(format!(
                "input_side must be a positive multiple of 32, got {}",
                self.input_side
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        for (i, &c) in self.encoder_stage_channels.iter().enumerate() {
            if c == 0 || (i > 0 && c % 4 != 0) {
                return Err(Error::InvalidConfig(format!(
                    "encoder stage channels must be positive (stages 1..4 divisible by 4), got {:?}",
                    self.encoder_stage_channels
                )));
            }
        }
        Ok(())
    }
}

pub struct Generator<F> {
    pub config: GeneratorConfig,
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    blocks: [Vec<Bottleneck<F>>; 4],
    skips: Vec<SkipConnector<F>>,
    refines: Vec<RefineBlock<F>>,
    classifier: Conv2d<F>,
}

pub struct GeneratorCache<F> {
    c1: ConvCache<F>,
    b1: BnCache<F>,
    r1: Feat<F>,
    pool: PoolCache,
    blocks: [Vec<BottleneckCache<F>>; 4],
    skips: Vec<SkipCache<F>>,
    refines: Vec<RefineCache<F>>,
    classifier: ConvCache<F>,
}

impl<F: Scalar> Generator<F> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::from_path(seed, &[rng::stream::GENERATOR_INIT]);
        let ch = config.encoder_stage_channels;
        let nc = config.num_classes;

        let conv1 = Conv2d::square(3, ch[0], 7, 2, 3, &mut rng);
        let bn1 = BatchNorm2d::new(ch[0]);

        let mut blocks: [Vec<Bottleneck<F>>; 4] = [vec![], vec![], vec![], vec![]];
        for stage in 0..4 {
            let c_in = ch[stage];
            let c_out = ch[stage + 1];
            let stride = if stage == 0 { 1 } else { 2 };
            let mut stage_blocks = Vec::with_capacity(STAGE_BLOCKS[stage]);
            stage_blocks.push(Bottleneck::new(c_in, c_out, stride, true, &mut rng));
            for _ in 1..STAGE_BLOCKS[stage] {
                stage_blocks.push(Bottleneck::new(c_out, c_out, 1, false, &mut rng));
            }
            blocks[stage] = stage_blocks;
        }

        // Skip taps: the pooled stem output plus the four stage outputs.
        let skips = (0..5)
            .map(|i| SkipConnector::new(config.kernel_mode, ch[i], nc, &mut rng))
            .collect();

        let refines = (0..10).map(|_| RefineBlock::new(nc, &mut rng)).collect();
        let classifier = Conv2d::square(nc, nc, 3, 1, 1, &mut rng);

        Ok(Generator {
            config,
            conv1,
            bn1,
            blocks,
            skips,
            refines,
            classifier,
        })
    }

    fn check_input(&self, x: &Feat<F>) -> Result<()> {
        if x.c != 3 || x.h != self.config.input_side || x.w != self.config.input_side {
            return Err(Error::ShapeMismatch(format!(
                "generator expects Bx3x{side}x{side} input, got {}x{}x{}x{}",
                x.n,
                x.c,
                x.h,
                x.w,
                side = self.config.input_side
            )));
        }
        if x.n == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch-statistics normalization).
    pub fn forward_train(
        &mut self,
        x: &Feat<F>,
        update_running: bool,
    ) -> Result<(Feat<F>, GeneratorCache<F>)> {
        self.check_input(x)?;
        let (c1, c1_cache) = self.conv1.forward(x)?;
        let (b1, b1_cache) = self.bn1.forward_train(&c1, update_running);
        let r1 = relu_forward(&b1);
        let (e0, pool_cache) = POOL.forward(&r1);

        let mut taps: Vec<Feat<F>> = Vec::with_capacity(5);
        let mut block_caches: [Vec<BottleneckCache<F>>; 4] = [vec![], vec![], vec![], vec![]];
        let mut cur = e0;
        taps.push(cur.clone());
        for (stage_blocks, stage_caches) in self.blocks.iter_mut().zip(block_caches.iter_mut()) {
            let mut caches = Vec::with_capacity(stage_blocks.len());
            for block in stage_blocks.iter_mut() {
                let (next, cache) = block.forward_train(&cur, update_running);
                caches.push(cache);
                cur = next;
            }
            *stage_caches = caches;
            taps.push(cur.clone());
        }

        let mut skip_caches = Vec::with_capacity(5);
        let mut skip_outs = Vec::with_capacity(5);
        for (skip, tap) in self.skips.iter().zip(taps.iter()) {
            let (out, cache) = skip.forward_train(tap);
            skip_outs.push(out);
            skip_caches.push(cache);
        }

        // Decoder: walk the pyramid from the deepest tap, then two final
        // upsample/refine stages back to input resolution.
        let mut refine_caches = Vec::with_capacity(10);
        let mut refine_idx = 0;
        let mut apply_refine = |d: &Feat<F>, refines: &[RefineBlock<F>]| {
            let (out, cache) = refines[refine_idx].forward_train(d);
            refine_idx += 1;
            (out, cache)
        };

        let mut d = skip_outs[4].clone();
        for tap in [3usize, 2, 1] {
            let (out, cache) = apply_refine(&d, &self.refines);
            refine_caches.push(cache);
            d = upsample2x_forward(&out);
            d.add_assign(&skip_outs[tap]);
            let (out, cache) = apply_refine(&d, &self.refines);
            refine_caches.push(cache);
            d = out;
        }
        // The shallowest tap shares the stride of the previous one, so it is
        // merged without an upsample in between.
        let (out, cache) = apply_refine(&d, &self.refines);
        refine_caches.push(cache);
        d = out;
        d.add_assign(&skip_outs[0]);
        let (out, cache) = apply_refine(&d, &self.refines);
        refine_caches.push(cache);
        d = upsample2x_forward(&out);
        let (out, cache) = apply_refine(&d, &self.refines);
        refine_caches.push(cache);
        d = upsample2x_forward(&out);
        let (out, cache) = apply_refine(&d, &self.refines);
        refine_caches.push(cache);
        d = out;

        let (logits, classifier_cache) = self.classifier.forward(&d)?;
        Ok((
            logits,
            GeneratorCache {
                c1: c1_cache,
                b1: b1_cache,
                r1,
                pool: pool_cache,
                blocks: block_caches,
                skips: skip_caches,
                refines: refine_caches,
                classifier: classifier_cache,
            },
        ))
    }

    /// Inference-mode forward pass (running-statistics normalization).
    pub fn forward_eval(&self, x: &Feat<F>) -> Result<Feat<F>> {
        self.check_input(x)?;
        let (c1, _) = self.conv1.forward(x)?;
        let r1 = relu_forward(&self.bn1.forward_eval(&c1));
        let (e0, _) = POOL.forward(&r1);

        let mut taps: Vec<Feat<F>> = Vec::with_capacity(5);
        let mut cur = e0;
        taps.push(cur.clone());
        for stage in 0..4 {
            for block in &self.blocks[stage] {
                cur = block.forward_eval(&cur);
            }
            taps.push(cur.clone());
        }
        let skip_outs: Vec<Feat<F>> = self
            .skips
            .iter()
            .zip(taps.iter())
            .map(|(skip, tap)| skip.forward_eval(tap))
            .collect();

        let mut refine_idx = 0;
        let mut apply_refine = |d: &Feat<F>, refines: &[RefineBlock<F>]| {
            let out = refines[refine_idx].forward_eval(d);
            refine_idx += 1;
            out
        };
        let mut d = skip_outs[4].clone();
        for tap in [3usize, 2, 1] {
            d = apply_refine(&d, &self.refines);
            d = upsample2x_forward(&d);
            d.add_assign(&skip_outs[tap]);
            d = apply_refine(&d, &self.refines);
        }
        d = apply_refine(&d, &self.refines);
        d.add_assign(&skip_outs[0]);
        d = apply_refine(&d, &self.refines);
        d = upsample2x_forward(&d);
        d = apply_refine(&d, &self.refines);
        d = upsample2x_forward(&d);
        d = apply_refine(&d, &self.refines);

        Ok(self.classifier.forward(&d)?.0)
    }

    /// Accumulates parameter gradients for a training-mode forward pass and
    /// returns the gradient with respect to the input batch.
    pub fn backward(&mut self, cache: &GeneratorCache<F>, dlogits: &Feat<F>) -> Feat<F> {
        let mut d = self.classifier.backward(&cache.classifier, dlogits);

        // Decoder reverse walk; gradient into each skip output is collected.
        let mut dskips: Vec<Option<Feat<F>>> = vec![None, None, None, None, None];
        let mut idx = cache.refines.len(); // 10
        let back_refine = |d: &Feat<F>, refines: &mut [RefineBlock<F>], idx: &mut usize, caches: &[RefineCache<F>]| {
            *idx -= 1;
            refines[*idx].backward(&caches[*idx], d)
        };
        d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
        d = upsample2x_backward(&d);
        d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
        d = upsample2x_backward(&d);
        d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
        dskips[0] = Some(d.clone());
        d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
        for tap in [1usize, 2, 3] {
            d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
            dskips[tap] = Some(d.clone());
            d = upsample2x_backward(&d);
            d = back_refine(&d, &mut self.refines, &mut idx, &cache.refines);
        }
        dskips[4] = Some(d);
        debug_assert_eq!(idx, 0);

        // Encoder taps receive gradient from their skip connector plus, for
        // all but the deepest, from the next stage's first block.
        let mut dtap = self.skips[4].backward(&cache.skips[4], dskips[4].as_ref().unwrap());
        for stage in (0..4).rev() {
            for (block, bcache) in self.blocks[stage]
                .iter_mut()
                .rev()
                .zip(cache.blocks[stage].iter().rev())
            {
                dtap = block.backward(bcache, &dtap);
            }
            let dskip = self.skips[stage].backward(&cache.skips[stage], dskips[stage].as_ref().unwrap());
            dtap.add_assign(&dskip);
        }

        let d = POOL.backward(&cache.pool, &dtap);
        let d = relu_backward(&cache.r1, &d);
        let d = self.bn1.backward(&cache.b1, &d);
        self.conv1.backward(&cache.c1, &d)
    }

    pub fn visit_params(&mut self, f: ParamVisitor<F>) {
        self.conv1.visit_params("encoder.conv1", f);
        self.bn1.visit_params("encoder.bn1", f);
        for stage in 0..4 {
            for (i, block) in self.blocks[stage].iter_mut().enumerate() {
                block.visit_params(&format!("encoder.block{}.{}", stage + 1, i), f);
            }
        }
        for (i, skip) in self.skips.iter_mut().enumerate() {
            skip.visit_params(&format!("skip.lck{}", i + 1), f);
        }
        for (i, refine) in self.refines.iter_mut().enumerate() {
            refine.visit_params(&format!("decoder.refine{i}"), f);
        }
        self.classifier.visit_params("decoder.classifier", f);
    }

    /// Total trainable parameter count.
    pub fn parameter_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                total += p.numel();
            }
        });
        total
    }

    /// Trainable parameters in the five skip connectors only.
    pub fn skip_parameter_count(&self) -> usize {
        self.skips.iter().map(|s| s.parameter_count()).sum()
    }

    /// Channel widths of the five encoder taps feeding the skip connectors.
    pub fn skip_input_channels(&self) -> [usize; 5] {
        self.config.encoder_stage_channels
    }

    /// Zero the decoder head so every logit is exactly zero: used by tests
    /// exercising the symmetric-output case.
    pub fn zero_classifier(&mut self) {
        for v in self
            .classifier
            .weight
            .data
            .iter_mut()
            .chain(self.classifier.bias.data.iter_mut())
        {
            *v = F::zero();
        }
    }
}
