//! Per-view slice extraction and stacking for cubic volumes.
//!
//! The two operations form an exact bijection per view: stacking the slices
//! extracted along a view reproduces the volume bit for bit.

use crate::error::{Error, Result};
use crate::volume::ViewAxis;
use ndarray::{Array2, Array3};

/// Extract all slices of a cube along the view's normal axis, in increasing
/// index order. For a cube of side S this yields S square S-by-S slices.
///
/// Slice layout per view (rows, cols) in volume axes:
/// axial (normal 2) -> (0, 1); coronal (normal 1) -> (0, 2);
/// sagittal (normal 0) -> (1, 2).
pub fn extract_slices<T: Copy + num_traits::Zero>(
    volume: &Array3<T>,
    view: ViewAxis,
) -> Result<Vec<Array2<T>>> {
    let (d0, d1, d2) = volume.dim();
    if d0 != d1 || d1 != d2 {
        return Err(Error::InvalidVolume(format!(
            "expected cubic volume, got dims ({d0}, {d1}, {d2})"
        )));
    }
    let s = d0;
    let mut slices = Vec::with_capacity(s);
    for idx in 0..s {
        let mut plane = Array2::<T>::zeros((s, s));
        match view {
            ViewAxis::Axial => {
                for i in 0..s {
                    for j in 0..s {
                        plane[[i, j]] = volume[[i, j, idx]];
                    }
                }
            }
            ViewAxis::Coronal => {
                for i in 0..s {
                    for k in 0..s {
                        plane[[i, k]] = volume[[i, idx, k]];
                    }
                }
            }
            ViewAxis::Sagittal => {
                for j in 0..s {
                    for k in 0..s {
                        plane[[j, k]] = volume[[idx, j, k]];
                    }
                }
            }
        }
        slices.push(plane);
    }
    Ok(slices)
}

/// Inverse of [`extract_slices`] for the same view.
pub fn stack_to_volume<T: Copy + num_traits::Zero>(
    slices: &[Array2<T>],
    view: ViewAxis,
) -> Result<Array3<T>> {
    if slices.is_empty() {
        return Err(Error::InvalidVolume("no slices to stack".into()));
    }
    let (h, w) = slices[0].dim();
    if h != w {
        return Err(Error::ShapeMismatch(format!(
            "slices must be square, got {h}x{w}"
        )));
    }
    if slices.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "need {h} slices of {h}x{h} to form a cube, got {}",
            slices.len()
        )));
    }
    for (idx, sl) in slices.iter().enumerate() {
        if sl.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "slice {idx} has shape {:?}, expected ({h}, {w})",
                sl.dim()
            )));
        }
    }
    let s = h;
    let mut volume = Array3::<T>::zeros((s, s, s));
    for (idx, plane) in slices.iter().enumerate() {
        match view {
            ViewAxis::Axial => {
                for i in 0..s {
                    for j in 0..s {
                        volume[[i, j, idx]] = plane[[i, j]];
                    }
                }
            }
            ViewAxis::Coronal => {
                for i in 0..s {
                    for k in 0..s {
                        volume[[i, idx, k]] = plane[[i, k]];
                    }
                }
            }
            ViewAxis::Sagittal => {
                for j in 0..s {
                    for k in 0..s {
                        volume[[idx, j, k]] = plane[[j, k]];
                    }
                }
            }
        }
    }
    Ok(volume)
}
