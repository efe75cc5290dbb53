//! 3D scalar volumes and the MVOL1 file format.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 5     | magic `MVOL1` |
//! | 1     | dtype: 0 = f32, 1 = u8 |
//! | 12    | dims `dx dy dz` as u32 |
//! | 12    | voxel size in mm as f32 |
//! | 1     | modality: 0 T1, 1 FLAIR, 2 MASK, 3 MAP |
//! | ...   | payload, x fastest, then y, then z |

use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 5] = b"MVOL1";
pub const VOLUME_HEADER_LEN: usize = 5 + 1 + 12 + 12 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    Flair,
    Mask,
    Map,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::T1 => 0,
            Modality::Flair => 1,
            Modality::Mask => 2,
            Modality::Map => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Modality::T1,
            1 => Modality::Flair,
            2 => Modality::Mask,
            3 => Modality::Map,
            _ => return None,
        })
    }
}

/// Payload element type on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }
}

/// Scalar grid with `x` the fastest-varying index.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_mm: [f32; 3],
    modality: Modality,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_mm: [f32; 3], modality: Modality, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("volume dims {dims:?} must be positive")));
        }
        if voxel_mm.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::data(format!("voxel size {voxel_mm:?} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::dim(format!(
                "volume {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        match modality {
            Modality::Mask if data.iter().any(|&v| v != 0.0 && v != 1.0) => {
                return Err(Error::data("MASK volume holds values other than 0/1"));
            }
            Modality::Map if data.iter().any(|&v| !(v >= 0.0 && v.fract() == 0.0)) => {
                return Err(Error::data("MAP volume holds non-integer or negative values"));
            }
            _ => {}
        }
        Ok(Volume {
            dims,
            voxel_mm,
            modality,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_mm: [f32; 3], modality: Modality) -> Self {
        Volume::new(dims, voxel_mm, modality, vec![0.0; dims[0] * dims[1] * dims[2]])
            .expect("zero volume is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> [f32; 3] {
        self.voxel_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new payload and modality.
    pub fn with_data(&self, modality: Modality, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, self.voxel_mm, modality, data)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

pub fn encode_volume(v: &Volume, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(dtype.code());
    for d in v.dims {
        let d = u32::try_from(d).map_err(|_| Error::data("volume dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in v.voxel_mm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.modality.code());
    match dtype {
        DType::F32 => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        DType::U8 => {
            for &x in &v.data {
                if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                    return Err(Error::data(format!("value {x} does not fit a u8 payload")));
                }
                out.push(x as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < VOLUME_HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!(
                "truncated header: expected {VOLUME_HEADER_LEN} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..5] != VOLUME_MAGIC {
        return Err(fmt(0, "bad magic, expected MVOL1".into()));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::U8,
        other => return Err(fmt(5, format!("unknown dtype byte {other}"))),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let voxel_mm = [f32_at(18), f32_at(22), f32_at(26)];
    let modality = Modality::from_code(bytes[30])
        .ok_or_else(|| fmt(30, format!("unknown modality byte {}", bytes[30])))?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| fmt(6, "dims overflow".into()))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    let expected = VOLUME_HEADER_LEN + n * width;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            format!("expected {expected} bytes in total, got {}", bytes.len()),
        ));
    }
    let payload = &bytes[VOLUME_HEADER_LEN..];
    let data: Vec<f32> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(dims, voxel_mm, modality, data).map_err(|e| fmt(VOLUME_HEADER_LEN, e.to_string()))
}

/// Write with an f32 payload.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(v, path, DType::F32)
}

pub fn write_volume_as(v: &Volume, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}
