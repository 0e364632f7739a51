//! Intensity normalization and isotropic-cube resampling.

use crate::error::{Error, Result};
use crate::volume::{IntensityVolume, LabelVolume, VolumeHeader};
use ndarray::Array3;
use rayon::prelude::*;

/// Smallest cube side the downstream networks accept.
pub const MIN_CUBE_SIDE: usize = 8;

/// Linear-interpolation percentile over the sorted flattened values.
/// `p` is in [0, 100]; `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Percentile-clipped min-max normalization to [0, 1].
///
/// Values at or below the `low_pct` percentile map to 0, values at or above
/// the `high_pct` percentile map to 1, and everything between is scaled
/// linearly. A constant (or near-constant) volume has no usable range and is
/// rejected rather than silently flattened.
pub fn normalize_intensity(
    v: &IntensityVolume,
    low_pct: f64,
    high_pct: f64,
) -> Result<IntensityVolume> {
    if !(0.0..=100.0).contains(&low_pct)
        || !(0.0..=100.0).contains(&high_pct)
        || low_pct >= high_pct
    {
        return Err(Error::InvalidConfig(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got ({low_pct}, {high_pct})"
        )));
    }
    let mut sorted: Vec<f32> = v.data.iter().copied().collect();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile(&sorted, low_pct);
    let hi = percentile(&sorted, high_pct);
    if hi <= lo {
        return Err(Error::DegenerateIntensityRange { value: lo });
    }
    let range = hi - lo;
    let data = v
        .data
        .mapv(|x| (((x as f64 - lo) / range).clamp(0.0, 1.0)) as f32);
    IntensityVolume::new(v.header.clone(), data)
}

pub const DEFAULT_LOW_PCT: f64 = 2.5;
pub const DEFAULT_HIGH_PCT: f64 = 97.5;

/// Source coordinate for output index `i` when resampling a length-`s_in`
/// axis to length `s_out`, with voxel centers aligned.
#[inline]
fn source_coord(i: usize, s_in: usize, s_out: usize) -> f64 {
    (i as f64 + 0.5) * (s_in as f64 / s_out as f64) - 0.5
}

/// Nearest source index: round half up, clamped to the grid.
#[inline]
fn nearest_index(i: usize, s_in: usize, s_out: usize) -> usize {
    let x = source_coord(i, s_in, s_out);
    let r = (x + 0.5).floor();
    (r.max(0.0) as usize).min(s_in - 1)
}

fn cube_header(header: &VolumeHeader, side: usize) -> VolumeHeader {
    let extent = header.extent_mm();
    VolumeHeader {
        dims: [side, side, side],
        spacing: [
            extent[0] / side as f64,
            extent[1] / side as f64,
            extent[2] / side as f64,
        ],
        modality: header.modality,
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < MIN_CUBE_SIDE {
        return Err(Error::InvalidConfig(format!(
            "cube side {side} is below the minimum of {MIN_CUBE_SIDE}"
        )));
    }
    Ok(())
}

/// Resample an intensity volume to `side`^3 with trilinear interpolation.
pub fn resample_cube_intensity(v: &IntensityVolume, side: usize) -> Result<IntensityVolume> {
    check_side(side)?;
    let dims = v.header.dims;
    if dims == [side, side, side] {
        return Ok(IntensityVolume {
            header: cube_header(&v.header, side),
            data: v.data.clone(),
        });
    }
    let src = &v.data;
    let mut out = Array3::<f32>::zeros((side, side, side));
    // Per-axis interpolation stencils, precomputed once.
    let stencil = |s_in: usize| -> Vec<(usize, usize, f64)> {
        (0..side)
            .map(|i| {
                let x = source_coord(i, s_in, side);
                let x0 = x.floor();
                let frac = x - x0;
                let a = (x0.max(0.0) as usize).min(s_in - 1);
                let b = ((x0 + 1.0).max(0.0) as usize).min(s_in - 1);
                (a, b, frac)
            })
            .collect()
    };
    let sx = stencil(dims[0]);
    let sy = stencil(dims[1]);
    let sz = stencil(dims[2]);

    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(side * side)
        .enumerate()
        .for_each(|(i, plane)| {
            let (x0, x1, fx) = sx[i];
            for j in 0..side {
                let (y0, y1, fy) = sy[j];
                for (k, o) in plane[j * side..(j + 1) * side].iter_mut().enumerate() {
                    let (z0, z1, fz) = sz[k];
                    let c000 = src[[x0, y0, z0]] as f64;
                    let c001 = src[[x0, y0, z1]] as f64;
                    let c010 = src[[x0, y1, z0]] as f64;
                    let c011 = src[[x0, y1, z1]] as f64;
                    let c100 = src[[x1, y0, z0]] as f64;
                    let c101 = src[[x1, y0, z1]] as f64;
                    let c110 = src[[x1, y1, z0]] as f64;
                    let c111 = src[[x1, y1, z1]] as f64;
                    let c00 = c000 + fz * (c001 - c000);
                    let c01 = c010 + fz * (c011 - c010);
                    let c10 = c100 + fz * (c101 - c100);
                    let c11 = c110 + fz * (c111 - c110);
                    let c0 = c00 + fy * (c01 - c00);
                    let c1 = c10 + fy * (c11 - c10);
                    *o = (c0 + fx * (c1 - c0)) as f32;
                }
            }
        });
    IntensityVolume::new(cube_header(&v.header, side), out)
}

/// Resample a label volume to `side`^3 with nearest-neighbor interpolation.
pub fn resample_cube_label(v: &LabelVolume, side: usize) -> Result<LabelVolume> {
    check_side(side)?;
    let dims = v.header.dims;
    if dims == [side, side, side] {
        return Ok(LabelVolume {
            header: cube_header(&v.header, side),
            data: v.data.clone(),
        });
    }
    let data = resample_nearest(&v.data, dims, [side, side, side]);
    LabelVolume::new(cube_header(&v.header, side), data)
}

fn resample_nearest(src: &Array3<u8>, dims: [usize; 3], target: [usize; 3]) -> Array3<u8> {
    let ix: Vec<usize> = (0..target[0])
        .map(|i| nearest_index(i, dims[0], target[0]))
        .collect();
    let iy: Vec<usize> = (0..target[1])
        .map(|j| nearest_index(j, dims[1], target[1]))
        .collect();
    let iz: Vec<usize> = (0..target[2])
        .map(|k| nearest_index(k, dims[2], target[2]))
        .collect();
    let mut out = Array3::<u8>::zeros((target[0], target[1], target[2]));
    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(target[1] * target[2])
        .enumerate()
        .for_each(|(i, plane)| {
            let si = ix[i];
            for j in 0..target[1] {
                let sj = iy[j];
                for (k, o) in plane[j * target[2]..(j + 1) * target[2]].iter_mut().enumerate() {
                    *o = src[[si, sj, iz[k]]];
                }
            }
        });
    out
}

/// Map a cubic segmentation back to the dimensions and spacing of the
/// original scan, with nearest-neighbor interpolation.
pub fn resample_to_original(seg: &LabelVolume, original: &VolumeHeader) -> Result<LabelVolume> {
    original.validate()?;
    let side = seg.side()?;
    if original.dims == [side, side, side] {
        return Ok(LabelVolume {
            header: original.clone(),
            data: seg.data.clone(),
        });
    }
    let data = resample_nearest(&seg.data, seg.header.dims, original.dims);
    LabelVolume::new(original.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use ndarray::Array3;

    fn header(dims: [usize; 3]) -> VolumeHeader {
        VolumeHeader::new(dims, [1.0; 3], Modality::Unknown).unwrap()
    }

    fn intensity_from_fn(
        dims: [usize; 3],
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> IntensityVolume {
        let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| f(i, j, k));
        IntensityVolume::new(header(dims), data).unwrap()
    }

    /// Independent percentile computation used as the test oracle.
    fn oracle_percentile(values: &[f32], p: f64) -> f64 {
        let mut s: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        s.sort_by(f64::total_cmp);
        let rank = p / 100.0 * (s.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn normalize_uniform_ramp_clips_tails() {
        // 0..=1000 laid out over an 11x13x7 grid
        let dims = [11, 13, 7];
        let v = intensity_from_fn(dims, |i, j, k| (i * 13 * 7 + j * 7 + k) as f32);
        let n = v.header.voxel_count();
        assert_eq!(n, 1001);
        let out = normalize_intensity(&v, 2.5, 97.5).unwrap();

        let values: Vec<f32> = v.data.iter().copied().collect();
        let lo = oracle_percentile(&values, 2.5);
        let hi = oracle_percentile(&values, 97.5);
        assert_eq!(lo, 25.0);
        assert_eq!(hi, 975.0);

        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for ((i, j, k), &y) in out.data.indexed_iter() {
            let x = v.data[[i, j, k]] as f64;
            let expect = ((x - lo) / (hi - lo)).clamp(0.0, 1.0) as f32;
            assert_eq!(y, expect);
            min = min.min(y);
            max = max.max(y);
        }
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        // tails clamp to exactly 0 / 1
        assert_eq!(out.data.iter().filter(|&&y| y == 0.0).count(), 26);
        assert_eq!(out.data.iter().filter(|&&y| y == 1.0).count(), 26);
    }

    #[test]
    fn normalize_full_range_is_identity_on_unit_data() {
        let v = intensity_from_fn([4, 4, 4], |i, j, k| ((i + 4 * j + 16 * k) as f32) / 63.0);
        let out = normalize_intensity(&v, 0.0, 100.0).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn normalize_is_idempotent_with_full_percentiles() {
        let v = intensity_from_fn([5, 6, 7], |i, j, k| (i as f32) * 7.5 - (j * k) as f32);
        let once = normalize_intensity(&v, 2.5, 97.5).unwrap();
        let twice = normalize_intensity(&once, 0.0, 100.0).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn normalize_rejects_constant_volume() {
        let v = intensity_from_fn([4, 4, 4], |_, _, _| 3.25);
        let err = normalize_intensity(&v, 2.5, 97.5).unwrap_err();
        assert!(err.to_string().contains("degenerate intensity range"));
    }

    #[test]
    fn resample_identity_when_sides_match() {
        let v = intensity_from_fn([8, 8, 8], |i, j, k| (i + j + k) as f32);
        let out = resample_cube_intensity(&v, 8).unwrap();
        assert_eq!(out.data, v.data);
        assert_eq!(out.header.dims, [8, 8, 8]);
    }

    #[test]
    fn resample_constant_volume_stays_constant() {
        let v = intensity_from_fn([5, 9, 13], |_, _, _| 0.625);
        let out = resample_cube_intensity(&v, 16).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.625));
        // spacing = extent / side
        assert!((out.header.spacing[0] - 5.0 / 16.0).abs() < 1e-12);
        assert!((out.header.spacing[1] - 9.0 / 16.0).abs() < 1e-12);
        assert!((out.header.spacing[2] - 13.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn resample_intensity_stays_within_input_range() {
        let v = intensity_from_fn([6, 7, 9], |i, j, k| ((i * 31 + j * 17 + k * 5) % 13) as f32);
        let (lo, hi) = v
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| {
                (a.min(x), b.max(x))
            });
        let out = resample_cube_intensity(&v, 12).unwrap();
        for &x in out.data.iter() {
            assert!(x >= lo && x <= hi);
        }
    }

    /// Exhaustive per-voxel nearest-source oracle for label upsampling.
    fn oracle_nearest(src: &Array3<u8>, dims: [usize; 3], side: usize) -> Array3<u8> {
        Array3::from_shape_fn((side, side, side), |(i, j, k)| {
            let pick = |o: usize, s_in: usize| -> usize {
                let x = (o as f64 + 0.5) * (s_in as f64 / side as f64) - 0.5;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for cand in 0..s_in {
                    let d = (cand as f64 - x).abs();
                    // ties round up, matching the implementation's rule
                    if d < best_d - 1e-12 || d <= best_d + 1e-12 {
                        best = cand;
                        best_d = d.min(best_d);
                    }
                }
                best
            };
            src[[pick(i, dims[0]), pick(j, dims[1]), pick(k, dims[2])]]
        })
    }

    #[test]
    fn label_upsample_matches_nearest_oracle() {
        let data = Array3::from_shape_fn((2, 2, 2), |(i, j, k)| ((i ^ j ^ k) & 1) as u8);
        let v = LabelVolume::new(header([2, 2, 2]), data).unwrap();
        let out = resample_cube_label(&v, 8).unwrap();
        let expect = oracle_nearest(&v.data, [2, 2, 2], 8);
        assert_eq!(out.data, expect);
        assert!(out.data.iter().all(|&x| x <= 1));
    }

    #[test]
    fn resample_to_original_identity_and_zero() {
        let data = Array3::from_shape_fn((8, 8, 8), |(i, j, k)| ((i + j + k) % 2) as u8);
        let v = LabelVolume::new(header([8, 8, 8]), data).unwrap();
        let out = resample_to_original(&v, &header([8, 8, 8])).unwrap();
        assert_eq!(out.data, v.data);

        let zero = LabelVolume::new(header([4, 4, 4]), Array3::zeros((4, 4, 4))).unwrap();
        let out = resample_to_original(&zero, &header([7, 9, 3])).unwrap();
        assert_eq!(out.header.dims, [7, 9, 3]);
        assert!(out.data.iter().all(|&x| x == 0));
    }

    #[test]
    fn resample_to_original_checkerboard_matches_oracle() {
        let data = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i + j + k) % 2) as u8);
        let v = LabelVolume::new(header([4, 4, 4]), data).unwrap();
        let out = resample_to_original(&v, &header([8, 8, 8])).unwrap();
        let expect = oracle_nearest(&v.data, [4, 4, 4], 8);
        assert_eq!(out.data, expect);
    }

    #[test]
    fn small_side_is_rejected() {
        let v = intensity_from_fn([8, 8, 8], |i, _, _| i as f32);
        assert!(resample_cube_intensity(&v, 4).is_err());
    }
}
