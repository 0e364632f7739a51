//! Volume file I/O.
//!
//! Two formats are supported:
//!
//! * NIfTI-1 (`.nii` / `.nii.gz`), single 3D image, element type `float32`
//!   for intensity volumes or `uint8` for label volumes. Only the fields this
//!   pipeline needs are interpreted (dims, pixdim, datatype, scaling slope);
//!   the voxel grid is taken as already being in the canonical axis order.
//! * A raw fallback (`.raw` + `.json` sidecar): little-endian `f32` payload
//!   with axis 2 fastest, plus a JSON sidecar carrying dims, spacing,
//!   modality and dtype. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::volume::{IntensityVolume, LabelVolume, Modality, Volume, VolumeHeader};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;

/// Load a volume from `.nii`, `.nii.gz`, or `.raw` (+ `.json` sidecar).
/// The on-disk element type decides the flavour: `float32` loads as an
/// intensity volume, `uint8` as a label volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".raw") {
        load_raw(path)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else {
        Err(Error::malformed(
            path,
            "unrecognised extension (expected .nii, .nii.gz, or .raw)",
        ))
    }
}

/// Save a volume. Format chosen from the extension as in [`load_volume`].
/// Intensity volumes are stored as `float32`, labels as `uint8`.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match volume {
        Volume::Intensity(v) => v.header.validate()?,
        Volume::Label(v) => v.header.validate()?,
    }
    if let Volume::Intensity(v) = volume {
        if let Some(bad) = v.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "refusing to save non-finite intensity value: {bad}"
            )));
        }
    }
    let name = path.to_string_lossy();
    if name.ends_with(".raw") {
        save_raw(volume, path)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        save_nifti(volume, path)
    } else {
        Err(Error::malformed(
            path,
            "unrecognised extension (expected .nii, .nii.gz, or .raw)",
        ))
    }
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<IntensityVolume> {
    load_volume(path)?.into_intensity()
}

pub fn load_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    load_volume(path)?.into_label()
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    if path.to_string_lossy().ends_with(".gz") {
        MultiGzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_file_bytes(path)?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::malformed(path, "file shorter than NIfTI-1 header"));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        return Err(Error::malformed(
            path,
            format!("bad sizeof_hdr {sizeof_hdr} (big-endian files are not supported)"),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::malformed(path, "missing n+1 magic"));
    }

    let dim_at = |i: usize| i16::from_le_bytes(bytes[40 + 2 * i..42 + 2 * i].try_into().unwrap());
    let ndim = dim_at(0);
    // Trailing singleton dimensions are tolerated; anything larger is not.
    for d in 4..=7 {
        if d <= ndim as usize && dim_at(d) > 1 {
            return Err(Error::malformed(path, "expected 3D volume"));
        }
    }
    if !(1..=7).contains(&ndim) {
        return Err(Error::malformed(path, format!("bad dim[0] = {ndim}")));
    }
    if ndim < 3 {
        return Err(Error::malformed(path, "expected 3D volume"));
    }
    let dims_i16 = [dim_at(1), dim_at(2), dim_at(3)];
    if dims_i16.iter().any(|&d| d < 1) {
        return Err(Error::malformed(
            path,
            format!("non-positive dimension in {dims_i16:?}"),
        ));
    }
    let dims = [
        dims_i16[0] as usize,
        dims_i16[1] as usize,
        dims_i16[2] as usize,
    ];

    let datatype = i16::from_le_bytes(bytes[70..72].try_into().unwrap());
    let pixdim_at =
        |i: usize| f32::from_le_bytes(bytes[76 + 4 * i..80 + 4 * i].try_into().unwrap());
    let spacing = [
        pixdim_at(1) as f64,
        pixdim_at(2) as f64,
        pixdim_at(3) as f64,
    ];
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::malformed(
            path,
            format!("non-positive spacing {spacing:?}"),
        ));
    }
    let vox_offset = f32::from_le_bytes(bytes[108..112].try_into().unwrap()) as usize;
    let scl_slope = f32::from_le_bytes(bytes[112..116].try_into().unwrap());
    let scl_inter = f32::from_le_bytes(bytes[116..120].try_into().unwrap());
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        return Err(Error::malformed(
            path,
            "scaled intensities (scl_slope/scl_inter) are not supported",
        ));
    }
    let descrip = &bytes[148..228];
    let modality = parse_descrip_modality(descrip);

    let n = dims[0] * dims[1] * dims[2];
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::malformed(
                path,
                format!("unsupported datatype {other} (expected uint8 or float32)"),
            ))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(Error::malformed(path, "truncated voxel payload"));
    }
    let payload = &bytes[vox_offset..vox_offset + n * elem];

    let header = VolumeHeader::new(dims, spacing, modality)
        .map_err(|e| Error::malformed(path, e.to_string()))?;

    // NIfTI payloads are column-major (axis 0 fastest); convert to our
    // row-major, axis-2-fastest layout.
    match datatype {
        DT_UINT8 => {
            let mut data = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        data[[i, j, k]] = payload[i + dims[0] * (j + dims[1] * k)];
                    }
                }
            }
            let v = LabelVolume::new(header, data)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            Ok(Volume::Label(v))
        }
        DT_FLOAT32 => {
            let mut data = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let at = 4 * (i + dims[0] * (j + dims[1] * k));
                        data[[i, j, k]] =
                            f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
                    }
                }
            }
            let v = IntensityVolume::new(header, data)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            Ok(Volume::Intensity(v))
        }
        _ => unreachable!(),
    }
}

fn parse_descrip_modality(descrip: &[u8]) -> Modality {
    let text: String = descrip
        .iter()
        .take_while(|&&b| b != 0)
        .map(|&b| b as char)
        .collect();
    match text.strip_prefix("modality=") {
        Some(m) => Modality::parse(m),
        None => Modality::Unknown,
    }
}

fn build_nifti_header(header: &VolumeHeader, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    h[0..4].copy_from_slice(&(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in header.dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in 4..8 {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] holds the qfac; use 1.
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    for (i, &s) in header.spacing.iter().enumerate() {
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&(s as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    // scl_slope = 1, scl_inter = 0
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    let descrip = format!("modality={}", header.modality.as_str());
    let db = descrip.as_bytes();
    h[148..148 + db.len()].copy_from_slice(db);
    // qform/sform codes 0: grid is taken in canonical axis order.
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn save_nifti(volume: &Volume, path: &Path) -> Result<()> {
    let (header, datatype, bitpix) = match volume {
        Volume::Intensity(v) => (&v.header, DT_FLOAT32, 32i16),
        Volume::Label(v) => (&v.header, DT_UINT8, 8i16),
    };
    let dims = header.dims;
    let mut bytes = build_nifti_header(header, datatype, bitpix);
    match volume {
        Volume::Intensity(v) => {
            bytes.reserve(4 * header.voxel_count());
            // Column-major write: axis 0 fastest.
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        bytes.extend_from_slice(&v.data[[i, j, k]].to_le_bytes());
                    }
                }
            }
        }
        Volume::Label(v) => {
            bytes.reserve(header.voxel_count());
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        bytes.push(v.data[[i, j, k]]);
                    }
                }
            }
        }
    }
    write_file_bytes(path, &bytes)
}

fn write_file_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw fallback format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    modality: String,
    dtype: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn load_raw(path: &Path) -> Result<Volume> {
    let side_path = sidecar_path(path);
    let side_text =
        std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: RawSidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::malformed(&side_path, format!("bad sidecar: {e}")))?;
    let header = VolumeHeader::new(
        side.dims,
        side.spacing_mm,
        Modality::parse(&side.modality),
    )
    .map_err(|e| Error::malformed(path, e.to_string()))?;

    let bytes = read_file_bytes(path)?;
    let n = header.voxel_count();
    if bytes.len() != 4 * n {
        return Err(Error::malformed(
            path,
            format!("payload is {} bytes, expected {}", bytes.len(), 4 * n),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let (d0, d1, d2) = (side.dims[0], side.dims[1], side.dims[2]);
    match side.dtype.as_str() {
        "float32" => {
            let data = Array3::from_shape_vec((d0, d1, d2), values)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            let v = IntensityVolume::new(header, data)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            Ok(Volume::Intensity(v))
        }
        "uint8" => {
            let data: Vec<u8> = values
                .iter()
                .map(|&x| {
                    if x == 0.0 {
                        Ok(0u8)
                    } else if x == 1.0 {
                        Ok(1u8)
                    } else {
                        Err(Error::malformed(
                            path,
                            format!("label value outside {{0, 1}}: {x}"),
                        ))
                    }
                })
                .collect::<Result<_>>()?;
            let data = Array3::from_shape_vec((d0, d1, d2), data)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            let v = LabelVolume::new(header, data)
                .map_err(|e| Error::malformed(path, e.to_string()))?;
            Ok(Volume::Label(v))
        }
        other => Err(Error::malformed(
            &side_path,
            format!("unsupported dtype {other:?}"),
        )),
    }
}

fn save_raw(volume: &Volume, path: &Path) -> Result<()> {
    let (header, dtype) = match volume {
        Volume::Intensity(v) => (&v.header, "float32"),
        Volume::Label(v) => (&v.header, "uint8"),
    };
    let side = RawSidecar {
        dims: header.dims,
        spacing_mm: header.spacing,
        modality: header.modality.as_str().to_string(),
        dtype: dtype.to_string(),
    };
    let side_path = sidecar_path(path);
    let side_text = serde_json::to_string_pretty(&side)
        .map_err(|e| Error::malformed(&side_path, e.to_string()))?;
    std::fs::write(&side_path, side_text).map_err(|e| Error::io(&side_path, e))?;

    // Payload is little-endian f32, axis 2 fastest (our in-memory order).
    let mut bytes = Vec::with_capacity(4 * header.voxel_count());
    match volume {
        Volume::Intensity(v) => {
            for &x in v.data.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Volume::Label(v) => {
            for &x in v.data.iter() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    write_file_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample_intensity() -> IntensityVolume {
        let header = VolumeHeader::new([3, 4, 5], [0.7, 1.1, 2.3], Modality::T1w).unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| {
            (i as f32) * 0.5 - (j as f32) * 0.25 + (k as f32) * 1.75
        });
        IntensityVolume::new(header, data).unwrap()
    }

    fn sample_label() -> LabelVolume {
        let header = VolumeHeader::new([3, 4, 5], [0.7, 1.1, 2.3], Modality::T2w).unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| ((i + j + k) % 2) as u8);
        LabelVolume::new(header, data).unwrap()
    }

    #[test]
    fn nifti_round_trip_intensity() {
        let dir = tempdir();
        let path = dir.join("vol.nii.gz");
        let v = sample_intensity();
        save_volume(&Volume::Intensity(v.clone()), &path).unwrap();
        let loaded = load_intensity(&path).unwrap();
        assert_eq!(loaded.header.dims, v.header.dims);
        assert_eq!(loaded.header.modality, Modality::T1w);
        assert_eq!(loaded.data, v.data);
        // spacing survives through f32 on-disk representation
        for a in 0..3 {
            assert!((loaded.header.spacing[a] - v.header.spacing[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn nifti_round_trip_label_is_integer_typed() {
        let dir = tempdir();
        let path = dir.join("seg.nii");
        let v = sample_label();
        save_volume(&Volume::Label(v.clone()), &path).unwrap();
        // Check the on-disk datatype field directly.
        let bytes = std::fs::read(&path).unwrap();
        let datatype = i16::from_le_bytes(bytes[70..72].try_into().unwrap());
        assert_eq!(datatype, DT_UINT8);
        let loaded = load_label(&path).unwrap();
        assert_eq!(loaded.data, v.data);
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempdir();
        let path = dir.join("vol.raw");
        let v = sample_intensity();
        save_volume(&Volume::Intensity(v.clone()), &path).unwrap();
        let loaded = load_intensity(&path).unwrap();
        assert_eq!(loaded.header, v.header);
        assert_eq!(loaded.data, v.data);
    }

    #[test]
    fn zero_spacing_is_rejected() {
        let dir = tempdir();
        let path = dir.join("bad.nii");
        let v = sample_intensity();
        save_volume(&Volume::Intensity(v.clone()), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[80..84].copy_from_slice(&0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("non-positive spacing"), "{err}");
    }

    #[test]
    fn four_dimensional_file_is_rejected() {
        let dir = tempdir();
        let path = dir.join("bad4d.nii");
        let v = sample_intensity();
        save_volume(&Volume::Intensity(v), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes()); // dim[4] = 2
        std::fs::write(&path, &bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("expected 3D volume"), "{err}");
    }

    #[test]
    fn nan_payload_is_rejected_on_save() {
        let header = VolumeHeader::new([2, 2, 2], [1.0; 3], Modality::Unknown).unwrap();
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 0, 0]] = 1.0;
        let mut v = IntensityVolume::new(header, data).unwrap();
        v.data[[1, 1, 1]] = f32::NAN;
        let dir = tempdir();
        let err = save_volume(&Volume::Intensity(v), dir.join("nan.nii")).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn bad_nifti_magic_is_rejected() {
        let dir = tempdir();
        let path = dir.join("badmagic.nii");
        let v = sample_intensity();
        save_volume(&Volume::Intensity(v), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"xxxx");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_volume("/nonexistent/missing.nii").unwrap_err();
        assert!(err.to_string().contains("missing.nii"));
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "ssnet-io-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
