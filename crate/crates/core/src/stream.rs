//! Deterministic training-batch streaming.
//!
//! Each epoch visits every (scan, slice) pair of the requested view exactly
//! once, in a seeded random order. Batch indices are 1-based and increase
//! monotonically across epochs, so epoch 2 starts at `batches_per_epoch + 1`.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::volume::{IntensityVolume, LabelVolume, ViewAxis};
use ndarray::{Array3, Array4};

/// A batch of replicated-channel 2D slices with their masks.
#[derive(Debug, Clone)]
pub struct SliceBatch {
    /// B x H x W x 3, values in [0, 1]; the three channels are identical.
    pub images: Array4<f32>,
    /// B x H x W, values in {0, 1}.
    pub masks: Array3<f32>,
    /// 1-based, monotonically increasing over a training run.
    pub batch_index: u64,
    pub views: Vec<ViewAxis>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded slice stream over a preprocessed cohort. Implements `Iterator`
/// and cycles through epochs indefinitely; callers bound it by epochs via
/// [`TrainingStream::batches_per_epoch`].
pub struct TrainingStream<'a> {
    cohort: &'a [(IntensityVolume, LabelVolume)],
    view: ViewAxis,
    batch_size: usize,
    seed: u64,
    side: usize,
    epoch: u64,
    order: Vec<(usize, usize)>,
    cursor: usize,
    next_batch_index: u64,
}

pub fn make_training_stream<'a>(
    cohort: &'a [(IntensityVolume, LabelVolume)],
    view: ViewAxis,
    batch_size: usize,
    seed: u64,
) -> Result<TrainingStream<'a>> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let side = cohort[0].0.side()?;
    for (img, lab) in cohort {
        if img.side()? != side || lab.side()? != side {
            return Err(Error::ShapeMismatch(format!(
                "cohort volumes must share one cube side; expected {side}, got {:?}/{:?}",
                img.header.dims, lab.header.dims
            )));
        }
    }
    let mut stream = TrainingStream {
        cohort,
        view,
        batch_size,
        seed,
        side,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
        next_batch_index: 1,
    };
    stream.reshuffle();
    Ok(stream)
}

impl<'a> TrainingStream<'a> {
    pub fn batches_per_epoch(&self) -> u64 {
        let slices = (self.cohort.len() * self.side) as u64;
        slices.div_ceil(self.batch_size as u64)
    }

    pub fn view(&self) -> ViewAxis {
        self.view
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.cohort.len())
            .flat_map(|scan| (0..self.side).map(move |slice| (scan, slice)))
            .collect();
        let mut rng = Rng::from_path(
            self.seed,
            &[rng::stream::BATCH_SHUFFLE, self.view.normal_axis() as u64, self.epoch],
        );
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn fill_batch(&self, picks: &[(usize, usize)], batch_index: u64) -> SliceBatch {
        let s = self.side;
        let b = picks.len();
        let mut images = Array4::<f32>::zeros((b, s, s, 3));
        let mut masks = Array3::<f32>::zeros((b, s, s));
        for (bi, &(scan, idx)) in picks.iter().enumerate() {
            let (img, lab) = &self.cohort[scan];
            // Inline single-slice extraction along the view's normal axis.
            for r in 0..s {
                for c in 0..s {
                    let (i, j, k) = match self.view {
                        ViewAxis::Axial => (r, c, idx),
                        ViewAxis::Coronal => (r, idx, c),
                        ViewAxis::Sagittal => (idx, r, c),
                    };
                    let x = img.data[[i, j, k]];
                    images[[bi, r, c, 0]] = x;
                    images[[bi, r, c, 1]] = x;
                    images[[bi, r, c, 2]] = x;
                    masks[[bi, r, c]] = lab.data[[i, j, k]] as f32;
                }
            }
        }
        SliceBatch {
            images,
            masks,
            batch_index,
            views: vec![self.view; b],
        }
    }
}

impl<'a> Iterator for TrainingStream<'a> {
    type Item = SliceBatch;

    fn next(&mut self) -> Option<SliceBatch> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks: Vec<(usize, usize)> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let batch = self.fill_batch(&picks, self.next_batch_index);
        self.next_batch_index += 1;
        Some(batch)
    }
}
