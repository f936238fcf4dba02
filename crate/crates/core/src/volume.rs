//! Scalar volumes in the `.evol` container, plus intensity normalization.
//!
//! `.evol` layout:
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 0..8         | ASCII `EVIDVOL1`                               |
//! | 8..12        | header length `H`, u32 little-endian           |
//! | 12..12+H     | UTF-8 JSON header (dims, spacing, modality, dtype) |
//! | 12+H..       | `X*Y*Z` little-endian f32, index `(x*Y + y)*Z + z` |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EVIDVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MASK")]
    Mask,
    /// derived per-voxel output such as decision codes or ignorance
    #[serde(rename = "MAP")]
    Map,
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic, not an .evol file")]
    BadMagic,
    #[error("header length {declared} exceeds file size {available}")]
    HeaderTruncated { declared: usize, available: usize },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error("invalid dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("mask voxel {index} is {value}, expected 0 or 1")]
    NonBinaryMask { index: usize, value: f32 },
    #[error("voxel {index} is not finite")]
    NonFinite { index: usize },
    #[error("cannot normalize a {0:?} volume")]
    NormalizeModality(Modality),
    #[error("normalization scale must be nonzero")]
    ZeroScale,
    #[error("dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// millimetres, informational only
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub voxels: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    dtype: String,
}

fn voxel_count(dims: [usize; 3]) -> Option<usize> {
    if dims.contains(&0) {
        return None;
    }
    dims[0].checked_mul(dims[1])?.checked_mul(dims[2])
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], modality: Modality, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        let n = voxel_count(dims).ok_or(VolumeError::InvalidDims(dims))?;
        if n != voxels.len() {
            return Err(VolumeError::PayloadLength {
                expected: 4 * n,
                actual: 4 * voxels.len(),
            });
        }
        let v = Self {
            dims,
            spacing,
            modality,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3], modality: Modality) -> Result<Self, VolumeError> {
        let n = voxel_count(dims).ok_or(VolumeError::InvalidDims(dims))?;
        Self::new(dims, [1.0; 3], modality, vec![0.0; n])
    }

    fn validate(&self) -> Result<(), VolumeError> {
        for (index, &value) in self.voxels.iter().enumerate() {
            if !value.is_finite() {
                return Err(VolumeError::NonFinite { index });
            }
            if self.modality == Modality::Mask && value != 0.0 && value != 1.0 {
                return Err(VolumeError::NonBinaryMask { index, value });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dims: self.dims,
            spacing: self.spacing,
            modality: self.modality,
            dtype: "f32".to_string(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(VolumeError::BadMagic);
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[12..];
        if h > rest.len() {
            return Err(VolumeError::HeaderTruncated {
                declared: h,
                available: rest.len(),
            });
        }
        let header: Header = serde_json::from_slice(&rest[..h])?;
        if header.dtype != "f32" {
            return Err(VolumeError::Dtype(header.dtype));
        }
        let n = voxel_count(header.dims).ok_or(VolumeError::InvalidDims(header.dims))?;
        let payload = &rest[h..];
        if n.checked_mul(4) != Some(payload.len()) {
            return Err(VolumeError::PayloadLength {
                expected: n.saturating_mul(4),
                actual: payload.len(),
            });
        }
        let voxels = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let v = Self {
            dims: header.dims,
            spacing: header.spacing,
            modality: header.modality,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Volume::from_bytes(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    fs::write(path, v.to_bytes()).map_err(io_err(path))
}

/// Voxel map `w -> (w + shift) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub shift: f64,
    pub scale: f64,
}

impl NormalizationSpec {
    /// SUV to roughly unit range.
    pub const PET: Self = Self { shift: 0.0, scale: 0.1 };
    /// [-1000, 1000] HU to [0, 1].
    pub const CT: Self = Self {
        shift: 1000.0,
        scale: 1.0 / 2000.0,
    };

    pub fn for_modality(m: Modality) -> Option<Self> {
        match m {
            Modality::Pet => Some(Self::PET),
            Modality::Ct => Some(Self::CT),
            Modality::Mask | Modality::Map => None,
        }
    }
}

pub fn normalize(v: &Volume, spec: NormalizationSpec) -> Result<Volume, VolumeError> {
    if matches!(v.modality, Modality::Mask | Modality::Map) {
        return Err(VolumeError::NormalizeModality(v.modality));
    }
    if spec.scale == 0.0 {
        return Err(VolumeError::ZeroScale);
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&w| ((w as f64 + spec.shift) * spec.scale) as f32)
        .collect();
    Ok(Volume {
        voxels,
        ..v.clone()
    })
}

/// PET, CT and lesion mask of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub id: String,
    pub pet: Volume,
    pub ct: Volume,
    pub mask: Volume,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseMeta {
    id: String,
}

impl PatientCase {
    pub fn new(id: impl Into<String>, pet: Volume, ct: Volume, mask: Volume) -> Result<Self, VolumeError> {
        for v in [&ct, &mask] {
            if v.dims != pet.dims {
                return Err(VolumeError::DimMismatch(pet.dims, v.dims));
            }
        }
        Ok(Self {
            id: id.into(),
            pet,
            ct,
            mask,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.pet.dims
    }

    /// Writes `pet.evol`, `ct.evol`, `mask.evol` and `case.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), VolumeError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_volume(&self.pet, dir.join("pet.evol"))?;
        write_volume(&self.ct, dir.join("ct.evol"))?;
        write_volume(&self.mask, dir.join("mask.evol"))?;
        let meta = serde_json::to_vec(&CaseMeta { id: self.id.clone() })?;
        let p = dir.join("case.json");
        fs::write(&p, meta).map_err(io_err(&p))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let dir = dir.as_ref();
        let p = dir.join("case.json");
        let meta: CaseMeta = serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?)?;
        let pet = read_volume(dir.join("pet.evol"))?;
        let ct = read_volume(dir.join("ct.evol"))?;
        let mask = read_volume(dir.join("mask.evol"))?;
        if (pet.modality, ct.modality, mask.modality) != (Modality::Pet, Modality::Ct, Modality::Mask) {
            return Err(VolumeError::Header(serde::de::Error::custom(format!(
                "{}: modalities out of place",
                dir.display()
            ))));
        }
        Self::new(meta.id, pet, ct, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(modality: Modality, voxels: Vec<f32>) -> Volume {
        Volume::new([2, 2, 2], [1.0, 1.5, 2.0], modality, voxels).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let ct = vol(Modality::Ct, vec![-1000.0, 1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let n = normalize(&ct, NormalizationSpec::CT).unwrap();
        assert_eq!(n.voxels[0], 0.0);
        assert_eq!(n.voxels[1], 1.0);
        assert_eq!(n.dims, ct.dims);
        assert_eq!(n.spacing, ct.spacing);

        let pet = vol(Modality::Pet, vec![5.0; 8]);
        let n = normalize(&pet, NormalizationSpec::PET).unwrap();
        assert!((n.voxels[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_mask_and_zero_scale() {
        let m = vol(Modality::Mask, vec![0.0; 8]);
        assert!(matches!(normalize(&m, NormalizationSpec::PET), Err(VolumeError::NormalizeModality(_))));
        let p = vol(Modality::Pet, vec![0.0; 8]);
        let bad = NormalizationSpec { shift: 0.0, scale: 0.0 };
        assert!(matches!(normalize(&p, bad), Err(VolumeError::ZeroScale)));
    }

    #[test]
    fn zeros_round_trip_identical_bytes() {
        let v = Volume::zeros([2, 2, 2], Modality::Pet).unwrap();
        let bytes = v.to_bytes();
        let back = Volume::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let v = vol(Modality::Mask, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let b = v.to_bytes();
        assert_eq!(&b[..8], b"EVIDVOL1");
        let h = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[12..12 + h]).unwrap();
        assert_eq!(header["modality"], "MASK");
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["dims"], serde_json::json!([2, 2, 2]));
        assert_eq!(b.len(), 12 + h + 32);
        // voxel (1, 1, 1) is the last float
        assert_eq!(&b[b.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let v = Volume::zeros([2, 2, 2], Modality::Ct).unwrap();
        let b = v.to_bytes();
        let err = Volume::from_bytes(&b[..b.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(matches!(Volume::from_bytes(b"NOTAVOL1\0\0\0\0"), Err(VolumeError::BadMagic)));
        assert!(matches!(Volume::from_bytes(b"EVID"), Err(VolumeError::BadMagic)));
        let mut b = Volume::zeros([2, 2, 2], Modality::Ct).unwrap().to_bytes();
        b[8] = 0xff;
        assert!(matches!(Volume::from_bytes(&b), Err(VolumeError::HeaderTruncated { .. })));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mut v = Volume::zeros([2, 2, 2], Modality::Pet).unwrap();
        v.voxels[3] = 0.5;
        v.modality = Modality::Mask;
        let err = Volume::from_bytes(&v.to_bytes()).unwrap_err();
        assert!(matches!(err, VolumeError::NonBinaryMask { index: 3, .. }));
    }

    #[test]
    fn huge_dims_do_not_overflow() {
        let header = br#"{"dims":[18446744073709551615,2,2],"spacing":[1,1,1],"modality":"CT","dtype":"f32"}"#;
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header);
        assert!(matches!(Volume::from_bytes(&b), Err(VolumeError::InvalidDims(_))));
    }

    #[test]
    fn case_dims_must_agree() {
        let a = Volume::zeros([2, 2, 2], Modality::Pet).unwrap();
        let b = Volume::zeros([2, 2, 4], Modality::Ct).unwrap();
        let m = Volume::zeros([2, 2, 2], Modality::Mask).unwrap();
        assert!(PatientCase::new("x", a, b, m).is_err());
    }
}
