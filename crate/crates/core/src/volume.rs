//! Core volumetric types: headers, intensity volumes, and binary label volumes.
//!
//! Axis convention, fixed everywhere in this crate: axis 0 is the
//! sagittal-normal direction, axis 1 the coronal-normal, axis 2 the
//! axial-normal. In-memory layout is row-major with axis 2 fastest.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T2w,
    Unknown,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
            Modality::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Modality {
        match s {
            "T1w" => Modality::T1w,
            "T2w" => Modality::T2w,
            _ => Modality::Unknown,
        }
    }
}

/// Grid dimensions and physical spacing of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// Voxels per axis.
    pub dims: [usize; 3],
    /// Millimetres per voxel per axis.
    pub spacing: [f64; 3],
    pub modality: Modality,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], modality: Modality) -> Result<Self> {
        let header = VolumeHeader {
            dims,
            spacing,
            modality,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "zero dimension: dims = {:?}",
                self.dims
            )));
        }
        for &s in &self.spacing {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidVolume(format!(
                    "non-positive spacing: spacing = {:?}",
                    self.spacing
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Physical extent per axis in millimetres.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    pub fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }
}

/// A scalar 3D image with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    pub header: VolumeHeader,
    pub data: Array3<f32>,
}

impl IntensityVolume {
    pub fn new(header: VolumeHeader, data: Array3<f32>) -> Result<Self> {
        header.validate()?;
        if data.dim() != (header.dims[0], header.dims[1], header.dims[2]) {
            return Err(Error::ShapeMismatch(format!(
                "header dims {:?} do not match data shape {:?}",
                header.dims,
                data.dim()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite intensity value: {bad}"
            )));
        }
        Ok(IntensityVolume { header, data })
    }

    pub fn side(&self) -> Result<usize> {
        if !self.header.is_cube() {
            return Err(Error::InvalidVolume(format!(
                "expected cubic volume, got dims {:?}",
                self.header.dims
            )));
        }
        Ok(self.header.dims[0])
    }
}

/// A binary 3D mask. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub header: VolumeHeader,
    pub data: Array3<u8>,
}

impl LabelVolume {
    pub fn new(header: VolumeHeader, data: Array3<u8>) -> Result<Self> {
        header.validate()?;
        if data.dim() != (header.dims[0], header.dims[1], header.dims[2]) {
            return Err(Error::ShapeMismatch(format!(
                "header dims {:?} do not match data shape {:?}",
                header.dims,
                data.dim()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidVolume(format!(
                "label value outside {{0, 1}}: {bad}"
            )));
        }
        Ok(LabelVolume { header, data })
    }

    pub fn side(&self) -> Result<usize> {
        if !self.header.is_cube() {
            return Err(Error::InvalidVolume(format!(
                "expected cubic volume, got dims {:?}",
                self.header.dims
            )));
        }
        Ok(self.header.dims[0])
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Either flavour of volume, as returned by the file loader.
#[derive(Debug, Clone)]
pub enum Volume {
    Intensity(IntensityVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn header(&self) -> &VolumeHeader {
        match self {
            Volume::Intensity(v) => &v.header,
            Volume::Label(v) => &v.header,
        }
    }

    pub fn into_intensity(self) -> Result<IntensityVolume> {
        match self {
            Volume::Intensity(v) => Ok(v),
            Volume::Label(_) => Err(Error::InvalidVolume(
                "expected an intensity volume, found a label volume".into(),
            )),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(v) => Ok(v),
            Volume::Intensity(_) => Err(Error::InvalidVolume(
                "expected a label volume, found an intensity volume".into(),
            )),
        }
    }
}

/// The three orthogonal slicing directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal];

    /// The volume axis normal to slices of this view.
    pub fn normal_axis(self) -> usize {
        match self {
            ViewAxis::Sagittal => 0,
            ViewAxis::Coronal => 1,
            ViewAxis::Axial => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewAxis::Axial => "axial",
            ViewAxis::Coronal => "coronal",
            ViewAxis::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Option<ViewAxis> {
        match s {
            "axial" => Some(ViewAxis::Axial),
            "coronal" => Some(ViewAxis::Coronal),
            "sagittal" => Some(ViewAxis::Sagittal),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn header_rejects_zero_spacing() {
        let err = VolumeHeader::new([4, 4, 4], [0.0, 1.0, 1.0], Modality::Unknown).unwrap_err();
        assert!(err.to_string().contains("non-positive spacing"));
    }

    #[test]
    fn header_rejects_zero_dims() {
        let err = VolumeHeader::new([0, 4, 4], [1.0, 1.0, 1.0], Modality::Unknown).unwrap_err();
        assert!(err.to_string().contains("zero dimension"));
    }

    #[test]
    fn intensity_rejects_nan() {
        let header = VolumeHeader::new([2, 2, 2], [1.0; 3], Modality::Unknown).unwrap();
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 1, 0]] = f32::NAN;
        let err = IntensityVolume::new(header, data).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn label_rejects_out_of_range() {
        let header = VolumeHeader::new([2, 2, 2], [1.0; 3], Modality::Unknown).unwrap();
        let mut data = Array3::zeros((2, 2, 2));
        data[[1, 1, 1]] = 2u8;
        let err = LabelVolume::new(header, data).unwrap_err();
        assert!(err.to_string().contains("outside"));
    }

    #[test]
    fn view_axis_has_three_members_with_distinct_normals() {
        let normals: Vec<usize> = ViewAxis::ALL.iter().map(|v| v.normal_axis()).collect();
        let mut sorted = normals.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }
}
