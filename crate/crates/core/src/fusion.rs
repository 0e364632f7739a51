//! Multi-view mask fusion: union of the per-view segmentations followed by
//! morphological opening and closing with a discrete Euclidean ball.
//!
//! Voxels outside the grid are background, so erosion shrinks masks at the
//! volume border. The ball operations are computed through an exact squared
//! distance transform, which is equivalent to sliding the ball directly.

use crate::dist::sedt3;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;
use ndarray::Array3;

/// Discrete Euclidean ball: voxel offsets within `radius` of the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    pub radius: u32,
}

impl StructuringElement {
    pub fn ball(radius: u32) -> Self {
        assert!(radius >= 1, "structuring element radius must be positive");
        StructuringElement { radius }
    }

    /// All offsets (di, dj, dk) with squared norm <= radius^2; contains the
    /// center and is symmetric about it.
    pub fn offsets(&self) -> Vec<[i64; 3]> {
        let r = self.radius as i64;
        let r2 = r * r;
        let mut out = Vec::new();
        for di in -r..=r {
            for dj in -r..=r {
                for dk in -r..=r {
                    if di * di + dj * dj + dk * dk <= r2 {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }
}

/// Default fusion radius, in voxels at the resampled cube grid.
pub const FUSION_RADIUS: u32 = 3;

fn check_same_grid(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.header.dims != b.header.dims {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} vs {:?}",
            a.header.dims, b.header.dims
        )));
    }
    if a.header.spacing != b.header.spacing {
        return Err(Error::ShapeMismatch(format!(
            "mask spacing {:?} vs {:?}",
            a.header.spacing, b.header.spacing
        )));
    }
    Ok(())
}

/// Elementwise logical OR over one or more same-grid masks.
pub fn union_masks(masks: &[&LabelVolume]) -> Result<LabelVolume> {
    let first = masks.first().ok_or(Error::EmptyCohort)?;
    for other in &masks[1..] {
        check_same_grid(first, other)?;
    }
    let mut data = first.data.clone();
    for other in &masks[1..] {
        for (d, &o) in data.iter_mut().zip(other.data.iter()) {
            *d |= o;
        }
    }
    LabelVolume::new(first.header.clone(), data)
}

/// Squared distance from each voxel to the nearest out-of-grid position.
fn border_dist2(dims: [usize; 3]) -> impl Fn(usize, usize, usize) -> f64 {
    move |i, j, k| {
        let d = [
            (i + 1).min(dims[0] - i),
            (j + 1).min(dims[1] - j),
            (k + 1).min(dims[2] - k),
        ];
        let m = *d.iter().min().unwrap() as f64;
        m * m
    }
}

/// Erosion by a Euclidean ball: a voxel survives when every ball offset lands
/// on foreground (out-of-grid counts as background).
pub fn binary_erode(mask: &LabelVolume, se: StructuringElement) -> Result<LabelVolume> {
    let dims = mask.header.dims;
    let r2 = (se.radius * se.radius) as f64;
    let data = &mask.data;
    let bg_dist = sedt3(
        |i, j, k| data[[i, j, k]] == 0,
        dims,
        [1.0, 1.0, 1.0],
    );
    let border = border_dist2(dims);
    let out = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
        let keep = data[[i, j, k]] == 1
            && bg_dist[(i * dims[1] + j) * dims[2] + k] > r2
            && border(i, j, k) > r2;
        u8::from(keep)
    });
    LabelVolume::new(mask.header.clone(), out)
}

/// Dilation by a Euclidean ball: every voxel within `radius` of foreground.
pub fn binary_dilate(mask: &LabelVolume, se: StructuringElement) -> Result<LabelVolume> {
    let dims = mask.header.dims;
    let r2 = (se.radius * se.radius) as f64;
    let data = &mask.data;
    let fg_dist = sedt3(
        |i, j, k| data[[i, j, k]] == 1,
        dims,
        [1.0, 1.0, 1.0],
    );
    let out = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
        u8::from(fg_dist[(i * dims[1] + j) * dims[2] + k] <= r2)
    });
    LabelVolume::new(mask.header.clone(), out)
}

/// Opening: erosion then dilation. Removes components smaller than the ball.
/// Erosion already keeps every surviving ball inside the grid, so the plain
/// composition is exact and both anti-extensive and idempotent.
pub fn binary_open(mask: &LabelVolume, se: StructuringElement) -> Result<LabelVolume> {
    binary_dilate(&binary_erode(mask, se)?, se)
}

/// Closing: dilation then erosion, computed on a grid virtually padded by
/// the radius and cropped afterwards. The padding lets the dilated set
/// extend past the volume border before eroding, which is what makes
/// closing extensive (x is a subset of close(x)) and idempotent even for
/// masks touching the border.
pub fn binary_close(mask: &LabelVolume, se: StructuringElement) -> Result<LabelVolume> {
    let dims = mask.header.dims;
    let r = se.radius as usize;
    let r2 = (se.radius * se.radius) as f64;
    let pdims = [dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r];
    let data = &mask.data;
    let in_mask = |i: usize, j: usize, k: usize| -> bool {
        i >= r
            && j >= r
            && k >= r
            && i - r < dims[0]
            && j - r < dims[1]
            && k - r < dims[2]
            && data[[i - r, j - r, k - r]] == 1
    };
    let fg_dist = sedt3(in_mask, pdims, [1.0, 1.0, 1.0]);
    // dilated set on the padded grid
    let dilated: Vec<bool> = fg_dist.iter().map(|&d| d <= r2).collect();
    let bg_dist = sedt3(
        |i, j, k| !dilated[(i * pdims[1] + j) * pdims[2] + k],
        pdims,
        [1.0, 1.0, 1.0],
    );
    // For in-grid voxels the padded border is farther than the radius, so
    // only the distance to the dilated set's background matters.
    let out = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
        let p = ((i + r) * pdims[1] + (j + r)) * pdims[2] + (k + r);
        u8::from(dilated[p] && bg_dist[p] > r2)
    });
    LabelVolume::new(mask.header.clone(), out)
}

/// Fuse the three per-view masks: union, then open, then close, with the
/// default radius-3 ball.
pub fn fuse_multiview(
    axial: &LabelVolume,
    coronal: &LabelVolume,
    sagittal: &LabelVolume,
) -> Result<LabelVolume> {
    let se = StructuringElement::ball(FUSION_RADIUS);
    let merged = union_masks(&[axial, coronal, sagittal])?;
    binary_close(&binary_open(&merged, se)?, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::volume::{Modality, VolumeHeader};

    fn mask_from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> LabelVolume {
        let header = VolumeHeader::new(dims, [1.0; 3], Modality::Unknown).unwrap();
        let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(i, j, k)| {
            u8::from(f(i, j, k))
        });
        LabelVolume::new(header, data).unwrap()
    }

    fn random_mask(dims: [usize; 3], fill: f64, rng: &mut Rng) -> LabelVolume {
        mask_from_fn(dims, |_, _, _| rng.uniform() < fill)
    }

    /// Direct sliding-ball morphology, the oracle.
    fn erode_oracle(mask: &LabelVolume, se: StructuringElement) -> LabelVolume {
        let dims = mask.header.dims;
        let offs = se.offsets();
        mask_from_fn(dims, |i, j, k| {
            mask.data[[i, j, k]] == 1
                && offs.iter().all(|o| {
                    let p = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
                    p.iter().zip(dims.iter()).all(|(&x, &d)| x >= 0 && x < d as i64)
                        && mask.data[[p[0] as usize, p[1] as usize, p[2] as usize]] == 1
                })
        })
    }

    fn dilate_oracle(mask: &LabelVolume, se: StructuringElement) -> LabelVolume {
        let dims = mask.header.dims;
        let offs = se.offsets();
        mask_from_fn(dims, |i, j, k| {
            offs.iter().any(|o| {
                let p = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
                p.iter().zip(dims.iter()).all(|(&x, &d)| x >= 0 && x < d as i64)
                    && mask.data[[p[0] as usize, p[1] as usize, p[2] as usize]] == 1
            })
        })
    }

    fn open_oracle(mask: &LabelVolume, se: StructuringElement) -> LabelVolume {
        dilate_oracle(&erode_oracle(mask, se), se)
    }

    /// Brute-force closing on a radius-padded grid, cropped back afterwards.
    fn close_oracle(mask: &LabelVolume, se: StructuringElement) -> LabelVolume {
        let dims = mask.header.dims;
        let r = se.radius as usize;
        let pdims = [dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r];
        let padded = mask_from_fn(pdims, |i, j, k| {
            i >= r
                && j >= r
                && k >= r
                && i - r < dims[0]
                && j - r < dims[1]
                && k - r < dims[2]
                && mask.data[[i - r, j - r, k - r]] == 1
        });
        let closed = erode_oracle(&dilate_oracle(&padded, se), se);
        mask_from_fn(dims, |i, j, k| closed.data[[i + r, j + r, k + r]] == 1)
    }

    #[test]
    fn ball_offsets_are_symmetric_and_contain_center() {
        let se = StructuringElement::ball(3);
        let offs = se.offsets();
        assert!(offs.contains(&[0, 0, 0]));
        for o in &offs {
            assert!(offs.contains(&[-o[0], -o[1], -o[2]]));
        }
        assert_eq!(offs.len(), 123);
    }

    #[test]
    fn erode_dilate_match_oracle_on_random_masks() {
        let mut rng = Rng::new(5);
        for _ in 0..30 {
            let dims = [
                3 + rng.below(8) as usize,
                3 + rng.below(8) as usize,
                3 + rng.below(8) as usize,
            ];
            let r = 1 + rng.below(3) as u32;
            let se = StructuringElement::ball(r);
            let mask = random_mask(dims, 0.55, &mut rng);
            assert_eq!(binary_erode(&mask, se).unwrap().data, erode_oracle(&mask, se).data);
            assert_eq!(binary_dilate(&mask, se).unwrap().data, dilate_oracle(&mask, se).data);
        }
    }

    #[test]
    fn erosion_dilation_duality_under_complement() {
        let mut rng = Rng::new(6);
        let se = StructuringElement::ball(2);
        for _ in 0..10 {
            let mask = random_mask([7, 6, 8], 0.5, &mut rng);
            // Compare on the interior band where out-of-grid padding cannot
            // leak in: dilate(x) == !erode(!x) away from the border.
            let dil = binary_dilate(&mask, se).unwrap();
            let comp = mask_from_fn([7, 6, 8], |i, j, k| mask.data[[i, j, k]] == 0);
            let ero_comp = binary_erode(&comp, se).unwrap();
            for i in 2..5 {
                for j in 2..4 {
                    for k in 2..6 {
                        assert_eq!(
                            dil.data[[i, j, k]],
                            1 - ero_comp.data[[i, j, k]],
                            "at ({i},{j},{k})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_isolated_voxel_is_removed_by_opening() {
        let mask = mask_from_fn([9, 9, 9], |i, j, k| (i, j, k) == (4, 4, 4));
        let opened = binary_open(&mask, StructuringElement::ball(3)).unwrap();
        assert_eq!(opened.foreground_count(), 0);
    }

    #[test]
    fn opening_is_anti_extensive_and_idempotent() {
        let mut rng = Rng::new(7);
        let se = StructuringElement::ball(3);
        for _ in 0..10 {
            let mask = random_mask([9, 9, 9], 0.6, &mut rng);
            let open1 = binary_open(&mask, se).unwrap();
            for (o, m) in open1.data.iter().zip(mask.data.iter()) {
                assert!(o <= m, "open(x) must be a subset of x");
            }
            let open2 = binary_open(&open1, se).unwrap();
            assert_eq!(open1.data, open2.data);
        }
    }

    #[test]
    fn closing_is_extensive_idempotent_and_fills_holes() {
        let se = StructuringElement::ball(3);
        // solid 9^3 cube with one interior voxel removed
        let holed = mask_from_fn([9, 9, 9], |i, j, k| (i, j, k) != (4, 4, 4));
        let closed = binary_close(&holed, se).unwrap();
        assert_eq!(closed.data[[4, 4, 4]], 1, "cavity filled");
        for (c, m) in closed.data.iter().zip(holed.data.iter()) {
            assert!(c >= m, "close(x) must be a superset of x");
        }
        let closed2 = binary_close(&closed, se).unwrap();
        assert_eq!(closed.data, closed2.data);
        // all-ones stays all-ones
        let ones = mask_from_fn([6, 6, 6], |_, _, _| true);
        assert_eq!(binary_close(&ones, se).unwrap().data, ones.data);
        // all-zero opens to all-zero
        let zeros = mask_from_fn([6, 6, 6], |_, _, _| false);
        assert_eq!(binary_open(&zeros, se).unwrap().foreground_count(), 0);
    }

    #[test]
    fn closing_matches_padded_oracle_and_stays_extensive_on_random_masks() {
        let mut rng = Rng::new(23);
        for _ in 0..15 {
            let dims = [
                4 + rng.below(8) as usize,
                4 + rng.below(8) as usize,
                4 + rng.below(8) as usize,
            ];
            let r = 1 + rng.below(3) as u32;
            let se = StructuringElement::ball(r);
            let mask = random_mask(dims, 0.5, &mut rng);
            let closed = binary_close(&mask, se).unwrap();
            assert_eq!(closed.data, close_oracle(&mask, se).data);
            for (c, m) in closed.data.iter().zip(mask.data.iter()) {
                assert!(c >= m, "close(x) must be a superset of x");
            }
            let closed2 = binary_close(&closed, se).unwrap();
            assert_eq!(closed.data, closed2.data, "closing is idempotent");
        }
    }

    #[test]
    fn union_is_idempotent_and_monotone() {
        let mut rng = Rng::new(8);
        let a = random_mask([5, 5, 5], 0.3, &mut rng);
        let b = random_mask([5, 5, 5], 0.3, &mut rng);
        let zero = mask_from_fn([5, 5, 5], |_, _, _| false);
        assert_eq!(union_masks(&[&a, &a, &a]).unwrap().data, a.data);
        assert_eq!(union_masks(&[&a, &zero]).unwrap().data, a.data);
        let u = union_masks(&[&a, &b]).unwrap();
        assert!(u.foreground_count() >= a.foreground_count().max(b.foreground_count()));
    }

    #[test]
    fn union_rejects_mismatched_grids() {
        let a = mask_from_fn([4, 4, 4], |_, _, _| true);
        let b = mask_from_fn([4, 4, 5], |_, _, _| true);
        assert!(union_masks(&[&a, &b]).is_err());
    }

    #[test]
    fn fuse_multiview_matches_composed_oracle() {
        let mut rng = Rng::new(9);
        let se = StructuringElement::ball(3);
        for _ in 0..10 {
            let dims = [
                6 + rng.below(7) as usize,
                6 + rng.below(7) as usize,
                6 + rng.below(7) as usize,
            ];
            let a = random_mask(dims, 0.45, &mut rng);
            let c = random_mask(dims, 0.45, &mut rng);
            let s = random_mask(dims, 0.45, &mut rng);
            let fused = fuse_multiview(&a, &c, &s).unwrap();
            let merged = union_masks(&[&a, &c, &s]).unwrap();
            let oracle = close_oracle(&open_oracle(&merged, se), se);
            assert_eq!(fused.data, oracle.data, "dims {dims:?}");
        }
    }

    #[test]
    fn fuse_removes_single_view_speck_and_keeps_solid_ellipsoid() {
        let dims = [16, 16, 16];
        let ellipsoid = |i: usize, j: usize, k: usize| {
            let x = (i as f64 - 8.0) / 6.5;
            let y = (j as f64 - 8.0) / 5.5;
            let z = (k as f64 - 8.0) / 6.0;
            x * x + y * y + z * z <= 1.0
        };
        let a = mask_from_fn(dims, ellipsoid);
        let c = mask_from_fn(dims, ellipsoid);
        // one view adds an isolated speck far from the solid
        let s = mask_from_fn(dims, |i, j, k| ellipsoid(i, j, k) || (i, j, k) == (1, 1, 1));
        let fused = fuse_multiview(&a, &c, &s).unwrap();
        assert_eq!(fused.data[[1, 1, 1]], 0, "speck removed");
        // smooth solid passes through open/close (checked against oracle)
        let se = StructuringElement::ball(3);
        let oracle = close_oracle(&open_oracle(&a, se), se);
        assert_eq!(fused.data, oracle.data);
        // all-empty inputs stay empty
        let zero = mask_from_fn(dims, |_, _, _| false);
        assert_eq!(fuse_multiview(&zero, &zero, &zero).unwrap().foreground_count(), 0);
    }
}
