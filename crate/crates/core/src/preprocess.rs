//! Plane slicing, per-plane z-score normalization and left-right flipping.
//!
//! Axis convention: x = left-right, y = posterior-anterior, z = inferior-superior.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Modality, Volume};

/// Standard deviations below this map a slice or fiber to zeros.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Fixed z; images are x×y.
    Axial,
    /// Fixed y; images are x×z.
    Coronal,
    /// Fixed x; images are y×z.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// `(normal, row, col)` axis indices into `(x, y, z)`.
    pub fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (2, 0, 1),
            Plane::Coronal => (1, 0, 2),
            Plane::Sagittal => (0, 1, 2),
        }
    }

    /// Image size `(rows, cols)` for a volume of `dims`.
    pub fn image_dims(self, dims: [usize; 3]) -> (usize, usize) {
        let (_, r, c) = self.axes();
        (dims[r], dims[c])
    }

    pub fn slice_count(self, dims: [usize; 3]) -> usize {
        dims[self.axes().0]
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormScheme {
    /// z-score each 2D slice of the plane.
    InPlane,
    /// z-score each 1D fiber along the plane normal.
    CrossPlane,
    /// `InPlane` followed by `CrossPlane`.
    Both,
}

impl NormScheme {
    pub const ALL: [NormScheme; 3] = [NormScheme::InPlane, NormScheme::CrossPlane, NormScheme::Both];

    pub fn name(self) -> &'static str {
        match self {
            NormScheme::InPlane => "in_plane",
            NormScheme::CrossPlane => "cross_plane",
            NormScheme::Both => "both",
        }
    }
}

/// One of the nine (plane, normalization) paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathConfig {
    pub plane: Plane,
    pub norm: NormScheme,
    pub index: usize,
}

impl PathConfig {
    /// Canonical order: plane-major, then normalization.
    pub fn all() -> [PathConfig; 9] {
        std::array::from_fn(|i| PathConfig {
            plane: Plane::ALL[i / 3],
            norm: NormScheme::ALL[i % 3],
            index: i,
        })
    }

    pub fn label(&self) -> String {
        format!("p{}:{}/{}", self.index, self.plane.name(), self.norm.name())
    }
}

#[inline]
fn flat(dims: [usize; 3], c: [usize; 3]) -> usize {
    c[0] + dims[0] * (c[1] + dims[1] * c[2])
}

/// Visit groups of voxel indices: one group per slice (`in_plane`) or per fiber.
fn for_each_group(dims: [usize; 3], plane: Plane, in_plane: bool, mut f: impl FnMut(&[usize])) {
    let (n_ax, r_ax, c_ax) = plane.axes();
    let mut buf = Vec::new();
    if in_plane {
        for s in 0..dims[n_ax] {
            buf.clear();
            for i in 0..dims[r_ax] {
                for j in 0..dims[c_ax] {
                    let mut c = [0; 3];
                    c[n_ax] = s;
                    c[r_ax] = i;
                    c[c_ax] = j;
                    buf.push(flat(dims, c));
                }
            }
            f(&buf);
        }
    } else {
        for i in 0..dims[r_ax] {
            for j in 0..dims[c_ax] {
                buf.clear();
                for s in 0..dims[n_ax] {
                    let mut c = [0; 3];
                    c[n_ax] = s;
                    c[r_ax] = i;
                    c[c_ax] = j;
                    buf.push(flat(dims, c));
                }
                f(&buf);
            }
        }
    }
}

fn zscore_groups(data: &mut [f64], dims: [usize; 3], plane: Plane, in_plane: bool) {
    for_each_group(dims, plane, in_plane, |idx| {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (data[i] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for &i in idx {
            data[i] = if std < STD_EPSILON { 0.0 } else { (data[i] - mean) / std };
        }
    });
}

/// Z-score `v` per the scheme, in double precision, returning f64 values.
pub fn normalize_f64(v: &Volume, plane: Plane, scheme: NormScheme) -> Vec<f64> {
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let dims = v.dims();
    match scheme {
        NormScheme::InPlane => zscore_groups(&mut data, dims, plane, true),
        NormScheme::CrossPlane => zscore_groups(&mut data, dims, plane, false),
        NormScheme::Both => {
            zscore_groups(&mut data, dims, plane, true);
            zscore_groups(&mut data, dims, plane, false);
        }
    }
    data
}

/// Population z-score per slice, per fiber along the plane normal, or both. Groups with
/// standard deviation below [`STD_EPSILON`] become zeros.
pub fn normalize(v: &Volume, plane: Plane, scheme: NormScheme) -> Volume {
    let data = normalize_f64(v, plane, scheme).into_iter().map(|x| x as f32).collect();
    v.with_data(intensity_modality(v.modality()), data)
        .expect("normalization preserves geometry")
}

fn intensity_modality(m: Modality) -> Modality {
    match m {
        Modality::Mask | Modality::Map => Modality::T1,
        other => other,
    }
}

/// Ordered 2D slices `[rows, cols]` along the plane normal.
pub fn slice_volume(v: &Volume, plane: Plane) -> Vec<Tensor<f32>> {
    let dims = v.dims();
    let (n_ax, r_ax, c_ax) = plane.axes();
    let (rows, cols) = plane.image_dims(dims);
    (0..dims[n_ax])
        .map(|s| {
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let mut c = [0; 3];
                    c[n_ax] = s;
                    c[r_ax] = i;
                    c[c_ax] = j;
                    data.push(v.data()[flat(dims, c)]);
                }
            }
            Tensor::new(&[rows, cols], data).expect("slice shape")
        })
        .collect()
}

/// Inverse of [`slice_volume`]. Slices may carry leading unit axes (e.g. `[1, rows, cols]`).
pub fn restack(
    slices: &[Tensor<f32>],
    plane: Plane,
    dims: [usize; 3],
    voxel_mm: [f32; 3],
    modality: Modality,
) -> Result<Volume> {
    let (n_ax, r_ax, c_ax) = plane.axes();
    let (rows, cols) = plane.image_dims(dims);
    if slices.len() != dims[n_ax] {
        return Err(Error::dim(format!(
            "{} slices given, {} plane of {dims:?} needs {}",
            slices.len(),
            plane.name(),
            dims[n_ax]
        )));
    }
    let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    for (s, t) in slices.iter().enumerate() {
        let sh = t.shape();
        let ok = sh.len() >= 2
            && sh[sh.len() - 2] == rows
            && sh[sh.len() - 1] == cols
            && sh[..sh.len() - 2].iter().all(|&d| d == 1);
        if !ok {
            return Err(Error::dim(format!(
                "slice {s} has shape {sh:?}, expected {rows}x{cols}"
            )));
        }
        for i in 0..rows {
            for j in 0..cols {
                let mut c = [0; 3];
                c[n_ax] = s;
                c[r_ax] = i;
                c[c_ax] = j;
                data[flat(dims, c)] = t.data()[i * cols + j];
            }
        }
    }
    Volume::new(dims, voxel_mm, modality, data)
}

/// Mirror across the mid-sagittal plane: `x -> dx - 1 - x`.
pub fn flip_lr(v: &Volume) -> Volume {
    let [dx, dy, dz] = v.dims();
    let mut data = Vec::with_capacity(v.len());
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                data.push(v.get(dx - 1 - x, y, z));
            }
        }
    }
    v.with_data(v.modality(), data).expect("flip preserves geometry")
}
