//! The alternating training schedule, per-view training runs, slice-wise
//! volume prediction, and subject-grouped fold splitting.
//!
//! Every batch takes one Adam step on the generator's combined objective.
//! When the batch index hits a gate multiple (and the adversarial weight is
//! nonzero), the discriminator first takes one Adam step on its least-squares
//! objective, and the generator's update then carries the adversarial term
//! evaluated through the freshly updated discriminator.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    batch_dice_loss, batch_dice_loss_grad, gan_gate, lsgan_discriminator_loss,
    lsgan_discriminator_loss_grad, lsgan_generator_loss, lsgan_generator_loss_grad, LossConfig,
};
use crate::metrics::dice_coefficient;
use crate::networks::{
    concat_channels, feat_from_bhwc, onehot_pair, softmax_pair, softmax_pair_backward,
    split_seg_grad, Discriminator, Generator, GeneratorConfig,
};
use crate::nn::{Adam, Feat};
use crate::rng::{self, derive_seed};
use crate::slices::{extract_slices, stack_to_volume};
use crate::stream::{make_training_stream, SliceBatch};
use crate::volume::{IntensityVolume, LabelVolume, Modality, ViewAxis, VolumeHeader};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Slices per forward pass during prediction; inference is per-sample
/// independent, so the chunk size never changes results.
const PREDICT_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub view: ViewAxis,
    pub seed: u64,
    pub cube_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 12,
            epochs: 50,
            loss: LossConfig::default(),
            view: ViewAxis::Axial,
            seed: 0,
            cube_side: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Per-batch bookkeeping. The adversarial fields are present exactly when
/// the gate fired (gate multiple with a nonzero adversarial weight).
#[derive(Debug, Clone)]
pub struct StepReport {
    pub batch_index: u64,
    pub dice_loss: f64,
    pub gan_generator_loss: Option<f64>,
    pub discriminator_loss: Option<f64>,
    pub discriminator_updated: bool,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: u32,
    pub mean_dice_loss: f64,
    pub val_median_dsc: Option<f64>,
}

pub enum TrainEvent<'a> {
    Step(&'a StepReport),
    Epoch(&'a EpochReport),
}

/// Owns both networks and their optimizer state for one training run.
pub struct Trainer {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub config: TrainConfig,
    adam_g: Adam<f32>,
    adam_d: Adam<f32>,
    discriminator_updates: u64,
}

impl Trainer {
    pub fn new(gen_config: GeneratorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        gen_config.validate()?;
        if gen_config.input_side != config.cube_side {
            return Err(Error::InvalidConfig(format!(
                "generator input_side {} must equal cube_side {}",
                gen_config.input_side, config.cube_side
            )));
        }
        let net_seed = derive_seed(
            config.seed,
            &[rng::stream::VIEW, config.view.normal_axis() as u64],
        );
        Ok(Trainer {
            generator: Generator::new(gen_config, net_seed)?,
            discriminator: Discriminator::new(net_seed),
            adam_g: Adam::new(config.learning_rate),
            adam_d: Adam::new(config.learning_rate),
            config,
            discriminator_updates: 0,
        })
    }

    pub fn discriminator_updates(&self) -> u64 {
        self.discriminator_updates
    }

    /// One training batch: always a generator step, plus a discriminator
    /// step first whenever the gate fires.
    pub fn step(&mut self, batch: &SliceBatch) -> Result<StepReport> {
        let b = batch.batch_index;
        let x = feat_from_bhwc(&batch.images);
        let (logits, gen_cache) = self.generator.forward_train(&x, true)?;
        let probs = softmax_pair(&logits);

        let (bsz, h, w) = batch.masks.dim();
        let n = h * w;
        let p1 = Array2::from_shape_fn((bsz, n), |(bi, i)| probs.plane(bi, 1)[i]);
        let targets = batch
            .masks
            .to_shape((bsz, n))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?
            .to_owned();

        let eps = self.config.loss.epsilon;
        let dice = batch_dice_loss(p1.view(), targets.view(), eps)? as f64;
        if !dice.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch_index: b,
                detail: format!("dice loss = {dice}"),
            });
        }
        let dice_grad = batch_dice_loss_grad(p1.view(), targets.view(), eps)?;

        // Dice acts on the foreground channel only.
        let mut dprobs = Feat::zeros(bsz, 2, h, w);
        for bi in 0..bsz {
            dprobs.plane_mut(bi, 1).copy_from_slice(
                dice_grad
                    .row(bi)
                    .as_slice()
                    .expect("contiguous gradient row"),
            );
        }
        let mut dlogits = softmax_pair_backward(&probs, &dprobs);

        let lambda = self.config.loss.lambda;
        let gate_on = gan_gate(b, self.config.loss.gate_period) == 1 && lambda > 0.0;
        let mut gan_generator_loss = None;
        let mut discriminator_loss = None;

        if gate_on {
            let (a_t, b_t, c_t) = self.config.loss.lsgan_targets;

            // Discriminator step on (real mask, current prediction held
            // constant); its gradients are consumed by this update.
            self.discriminator.visit_params(&mut |_, p| p.zero_grad());
            let real_stack = concat_channels(&x, &onehot_pair(&batch.masks));
            let fake_stack = concat_channels(&x, &probs);
            let (s_real, cache_real) = self.discriminator.forward_train(&real_stack, true)?;
            let (s_fake, cache_fake) = self.discriminator.forward_train(&fake_stack, true)?;
            let real_arr = score_array(&s_real);
            let fake_arr = score_array(&s_fake);
            let d_loss = lsgan_discriminator_loss(&real_arr, &fake_arr, a_t, b_t)? as f64;
            if !d_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch_index: b,
                    detail: format!("discriminator loss = {d_loss}"),
                });
            }
            let (dreal, dfake) = lsgan_discriminator_loss_grad(&real_arr, &fake_arr, a_t, b_t)?;
            self.discriminator.backward(&cache_real, &score_feat(&dreal));
            self.discriminator.backward(&cache_fake, &score_feat(&dfake));
            let disc = &mut self.discriminator;
            self.adam_d.step_visit(|f| disc.visit_params(f));
            self.discriminator_updates += 1;

            // Adversarial term for the generator, evaluated through the
            // updated critic; discriminator parameters stay fixed here.
            let (s_fake2, cache_fake2) = self.discriminator.forward_train(&fake_stack, true)?;
            let fake2_arr = score_array(&s_fake2);
            let g_loss = lsgan_generator_loss(&fake2_arr, c_t)? as f64;
            if !g_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch_index: b,
                    detail: format!("adversarial generator loss = {g_loss}"),
                });
            }
            let dscores = lsgan_generator_loss_grad(&fake2_arr, c_t)?;
            let dstack = self.discriminator.backward(&cache_fake2, &score_feat(&dscores));
            // That backward also scribbled into discriminator gradients;
            // drop them so the next gated update starts clean.
            self.discriminator.visit_params(&mut |_, p| p.zero_grad());
            let dseg = split_seg_grad(&dstack, 3);
            let dlogits_gan = softmax_pair_backward(&probs, &dseg);
            let lam = lambda as f32;
            for (d, g) in dlogits.data.iter_mut().zip(dlogits_gan.data.iter()) {
                *d += lam * g;
            }
            gan_generator_loss = Some(g_loss);
            discriminator_loss = Some(d_loss);
        }

        self.generator.backward(&gen_cache, &dlogits);
        let gen = &mut self.generator;
        self.adam_g.step_visit(|f| gen.visit_params(f));

        Ok(StepReport {
            batch_index: b,
            dice_loss: dice,
            gan_generator_loss,
            discriminator_loss,
            discriminator_updated: gate_on,
        })
    }
}

/// The generator's full objective at one batch — Dice plus the gated,
/// weighted adversarial term through a fixed discriminator — with optional
/// gradient accumulation into the generator's parameters. Exists so the
/// 64-bit gradient verification exercises the same composite the training
/// step optimizes. Normalization running statistics are left untouched.
pub fn generator_objective<F: crate::nn::Scalar>(
    gen: &mut Generator<F>,
    disc: &mut Discriminator<F>,
    images: &ndarray::Array4<F>,
    masks: &Array3<F>,
    cfg: &LossConfig,
    batch_index: u64,
    accumulate_grads: bool,
) -> Result<f64> {
    let x = feat_from_bhwc(images);
    let (logits, gen_cache) = gen.forward_train(&x, false)?;
    let probs = softmax_pair(&logits);
    let (bsz, h, w) = masks.dim();
    let n = h * w;
    let p1 = Array2::from_shape_fn((bsz, n), |(bi, i)| probs.plane(bi, 1)[i]);
    let targets = masks
        .to_shape((bsz, n))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?
        .to_owned();
    let dice = batch_dice_loss(p1.view(), targets.view(), cfg.epsilon)?;

    let gate_on = gan_gate(batch_index, cfg.gate_period) == 1 && cfg.lambda > 0.0;
    let mut gan_term = 0.0f64;
    let mut dlogits_gan: Option<Feat<F>> = None;
    if gate_on {
        let fake_stack = concat_channels(&x, &probs);
        let (s_fake, cache_fake) = disc.forward_train(&fake_stack, false)?;
        let fake_arr = ndarray::Array3::from_shape_fn((s_fake.n, s_fake.h, s_fake.w), |(b, r, c)| {
            s_fake.plane(b, 0)[r * s_fake.w + c]
        });
        let g_loss = lsgan_generator_loss(&fake_arr, cfg.lsgan_targets.2)?;
        gan_term = g_loss.to_f64();
        if accumulate_grads {
            let dscores = lsgan_generator_loss_grad(&fake_arr, cfg.lsgan_targets.2)?;
            let mut ds = Feat::zeros(s_fake.n, 1, s_fake.h, s_fake.w);
            for b in 0..s_fake.n {
                let plane = ds.plane_mut(b, 0);
                for r in 0..s_fake.h {
                    for c in 0..s_fake.w {
                        plane[r * s_fake.w + c] = dscores[[b, r, c]];
                    }
                }
            }
            let dstack = disc.backward(&cache_fake, &ds);
            disc.visit_params(&mut |_, p| p.zero_grad());
            let dseg = split_seg_grad(&dstack, 3);
            dlogits_gan = Some(softmax_pair_backward(&probs, &dseg));
        }
    }

    if accumulate_grads {
        let dice_grad = batch_dice_loss_grad(p1.view(), targets.view(), cfg.epsilon)?;
        let mut dprobs = Feat::zeros(bsz, 2, h, w);
        for bi in 0..bsz {
            dprobs.plane_mut(bi, 1).copy_from_slice(
                dice_grad.row(bi).as_slice().expect("contiguous gradient row"),
            );
        }
        let mut dlogits = softmax_pair_backward(&probs, &dprobs);
        if let Some(g) = dlogits_gan {
            let lam = F::from_f64(cfg.lambda);
            for (d, gv) in dlogits.data.iter_mut().zip(g.data.iter()) {
                *d += lam * *gv;
            }
        }
        gen.backward(&gen_cache, &dlogits);
    }

    Ok(dice.to_f64() + cfg.lambda * gan_term * gan_gate(batch_index, cfg.gate_period) as f64)
}

fn score_array(scores: &Feat<f32>) -> Array3<f32> {
    debug_assert_eq!(scores.c, 1);
    Array3::from_shape_fn((scores.n, scores.h, scores.w), |(b, r, c)| {
        scores.plane(b, 0)[r * scores.w + c]
    })
}

fn score_feat(arr: &Array3<f32>) -> Feat<f32> {
    let (n, h, w) = arr.dim();
    let mut f = Feat::zeros(n, 1, h, w);
    for b in 0..n {
        let plane = f.plane_mut(b, 0);
        for r in 0..h {
            for c in 0..w {
                plane[r * w + c] = arr[[b, r, c]];
            }
        }
    }
    f
}

fn check_cohort(
    cohort: &[(IntensityVolume, LabelVolume)],
    cube_side: usize,
) -> Result<()> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    for (img, lab) in cohort {
        if img.side()? != cube_side || lab.side()? != cube_side {
            return Err(Error::ShapeMismatch(format!(
                "cohort volume dims {:?}/{:?} do not match cube_side {cube_side}",
                img.header.dims, lab.header.dims
            )));
        }
    }
    Ok(())
}

/// Train one view for the configured number of epochs, reporting per-step
/// and per-epoch events, and capture a checkpoint at the end. When a
/// validation cohort is supplied, each epoch records the median Dice of
/// cube-resolution predictions over it.
pub fn train_view_with(
    train: &[(IntensityVolume, LabelVolume)],
    validation: Option<&[(IntensityVolume, LabelVolume)]>,
    gen_config: &GeneratorConfig,
    config: &TrainConfig,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<(Checkpoint, Vec<EpochReport>)> {
    check_cohort(train, config.cube_side)?;
    if let Some(val) = validation {
        check_cohort(val, config.cube_side)?;
    }
    let mut trainer = Trainer::new(gen_config.clone(), config.clone())?;
    let mut stream =
        make_training_stream(train, config.view, config.batch_size, config.seed)?;
    let bpe = stream.batches_per_epoch();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut batch_counter = 0u64;
    for epoch in 1..=config.epochs as u32 {
        let mut dice_sum = 0.0;
        for _ in 0..bpe {
            let batch = stream.next().expect("stream cycles forever");
            let report = trainer.step(&batch)?;
            batch_counter = report.batch_index;
            dice_sum += report.dice_loss;
            on_event(&TrainEvent::Step(&report));
        }
        let val_median_dsc = match validation {
            Some(val) => Some(validation_median_dsc(&trainer.generator, val, config.view)?),
            None => None,
        };
        let report = EpochReport {
            epoch,
            mean_dice_loss: dice_sum / bpe as f64,
            val_median_dsc,
        };
        on_event(&TrainEvent::Epoch(&report));
        reports.push(report);
    }
    let checkpoint = Checkpoint::capture(
        &mut trainer.generator,
        &mut trainer.discriminator,
        config,
        config.epochs as u32,
        batch_counter,
    );
    Ok((checkpoint, reports))
}

pub fn train_view(
    train: &[(IntensityVolume, LabelVolume)],
    validation: Option<&[(IntensityVolume, LabelVolume)]>,
    gen_config: &GeneratorConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochReport>)> {
    train_view_with(train, validation, gen_config, config, |_| {})
}

fn validation_median_dsc(
    gen: &Generator<f32>,
    validation: &[(IntensityVolume, LabelVolume)],
    view: ViewAxis,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(validation.len());
    for (img, lab) in validation {
        let pred = predict_cube(gen, img, view)?;
        scores.push(dice_coefficient(&pred, lab)?);
    }
    scores.sort_by(f64::total_cmp);
    Ok(scores[(scores.len() - 1) / 2])
}

/// Slice-wise inference over a preprocessed cube: per-voxel argmax of the
/// two logit channels, ties resolved to background, slices stacked back into
/// a cube mask.
pub fn predict_cube(
    gen: &Generator<f32>,
    volume: &IntensityVolume,
    view: ViewAxis,
) -> Result<LabelVolume> {
    let side = volume.side()?;
    if side != gen.config.input_side {
        return Err(Error::ShapeMismatch(format!(
            "volume side {side} does not match generator input_side {}",
            gen.config.input_side
        )));
    }
    let planes = extract_slices(&volume.data, view)?;
    let mut mask_slices: Vec<ndarray::Array2<u8>> = Vec::with_capacity(planes.len());
    for chunk in planes.chunks(PREDICT_CHUNK) {
        let bsz = chunk.len();
        let mut x = Feat::zeros(bsz, 3, side, side);
        for (bi, plane) in chunk.iter().enumerate() {
            for ch in 0..3 {
                let dst = x.plane_mut(bi, ch);
                for r in 0..side {
                    for c in 0..side {
                        dst[r * side + c] = plane[[r, c]];
                    }
                }
            }
        }
        let logits = gen.forward_eval(&x)?;
        for bi in 0..bsz {
            let bg = logits.plane(bi, 0);
            let fg = logits.plane(bi, 1);
            let mut mask = ndarray::Array2::<u8>::zeros((side, side));
            for r in 0..side {
                for c in 0..side {
                    let at = r * side + c;
                    mask[[r, c]] = u8::from(fg[at] > bg[at]);
                }
            }
            mask_slices.push(mask);
        }
    }
    let data = stack_to_volume(&mask_slices, view)?;
    LabelVolume::new(
        VolumeHeader {
            dims: [side; 3],
            spacing: volume.header.spacing,
            modality: volume.header.modality,
        },
        data,
    )
}

/// Full prediction path: cube inference followed by nearest-neighbor
/// resampling to the original scan geometry.
pub fn predict_volume(
    gen: &Generator<f32>,
    volume: &IntensityVolume,
    view: ViewAxis,
    original: &VolumeHeader,
) -> Result<LabelVolume> {
    let cube = predict_cube(gen, volume, view)?;
    crate::preprocess::resample_to_original(&cube, original)
}

/// One scan row of a cohort manifest, as consumed by the fold splitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub scan_id: String,
    pub subject_id: String,
    pub modality: Modality,
}

/// Deterministic subject-grouped k-fold assignment. Scans of one subject
/// never straddle folds; fold sizes and per-modality counts are balanced
/// greedily (largest subjects placed first into the lightest fold).
pub fn kfold_split(manifest: &[ScanMeta], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::InvalidSplit(format!("k must be >= 2, got {k}")));
    }
    let mut by_subject: std::collections::BTreeMap<&str, Vec<&ScanMeta>> =
        std::collections::BTreeMap::new();
    for scan in manifest {
        if scan.subject_id.is_empty() {
            return Err(Error::InvalidSplit(format!(
                "scan {:?} has no subject id",
                scan.scan_id
            )));
        }
        by_subject.entry(&scan.subject_id).or_default().push(scan);
    }
    if by_subject.len() < k {
        return Err(Error::InvalidSplit(format!(
            "k = {k} exceeds subject count {}",
            by_subject.len()
        )));
    }

    let mut subjects: Vec<(usize, Vec<&ScanMeta>)> = by_subject.into_values()
        .map(|scans| (scans.len(), scans))
        .collect();
    // Seeded tie-break order, then largest-first for balance.
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut rng = crate::rng::Rng::from_path(seed, &[rng::stream::KFOLD]);
    rng.shuffle(&mut order);
    let mut ranked: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .map(|(pos, &subj)| (subj, pos))
        .collect();
    ranked.sort_by_key(|&(subj, pos)| (std::cmp::Reverse(subjects[subj].0), pos));

    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut totals = vec![0usize; k];
    let mut t1 = vec![0i64; k];
    let mut t2 = vec![0i64; k];
    for (subj, _) in ranked {
        let scans = std::mem::take(&mut subjects[subj].1);
        let add_t1 = scans.iter().filter(|s| s.modality == Modality::T1w).count() as i64;
        let add_t2 = scans.iter().filter(|s| s.modality == Modality::T2w).count() as i64;
        let best = (0..k)
            .min_by_key(|&f| {
                (
                    totals[f] + scans.len(),
                    (t1[f] + add_t1 - t2[f] - add_t2).abs(),
                    f,
                )
            })
            .expect("k >= 2");
        totals[best] += scans.len();
        t1[best] += add_t1;
        t2[best] += add_t2;
        folds[best].extend(scans.iter().map(|s| s.scan_id.clone()));
    }
    Ok(folds)
}
