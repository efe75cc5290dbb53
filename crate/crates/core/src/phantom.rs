//! Synthetic brain phantoms with ellipsoidal lesions in the left hemisphere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_mm: [f32; 3],
    /// Brain ellipsoid semi-axes, in voxels, centred in the grid.
    pub brain_semi_axes: [f64; 3],
    /// Inclusive range for the number of lesions.
    pub lesion_count: (usize, usize),
    /// Inclusive range for each lesion semi-axis, in voxels.
    pub lesion_semi_axis: (f64, f64),
    pub base_intensity: f32,
    pub t1_lesion_delta: f32,
    pub flair_lesion_delta: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Defaults scaled to the grid: brain fills ~84% of each axis; lesion semi-axes span
    /// 4–14% of the smallest axis.
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        let min_dim = *dims.iter().min().unwrap_or(&16) as f64;
        PhantomSpec {
            dims,
            voxel_mm: [1.0; 3],
            brain_semi_axes: dims.map(|d| 0.42 * d as f64),
            lesion_count: (1, 3),
            lesion_semi_axis: ((0.04 * min_dim).max(1.5), (0.14 * min_dim).max(2.0)),
            base_intensity: 0.8,
            t1_lesion_delta: -0.3,
            flair_lesion_delta: 0.3,
            noise_sigma: 0.05,
            seed,
        }
    }
}

/// T1, FLAIR and truth mask of one phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t1: Volume,
    pub flair: Volume,
    pub truth: Volume,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.semi[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxel index ranges covering the ellipsoid, clamped to the grid.
    fn bbox(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|k| {
            let lo = (self.center[k] - self.semi[k]).floor().max(0.0) as usize;
            let hi = ((self.center[k] + self.semi[k]).ceil() as usize + 1).min(dims[k]);
            (lo, hi.max(lo))
        })
    }

    fn voxels(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let bb = self.bbox(dims);
        let mut out = Vec::new();
        for z in bb[2].0..bb[2].1 {
            for y in bb[1].0..bb[1].1 {
                for x in bb[0].0..bb[0].1 {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Deterministic phantom for `spec.seed`. Lesions lie entirely inside the brain and in
/// the left half (`x < dx/2`).
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::config(format!("phantom dims {dims:?} must be positive multiples of 16")));
    }
    let (lmin, lmax) = spec.lesion_count;
    if lmin > lmax {
        return Err(Error::config("lesion count range is empty"));
    }
    let (smin, smax) = spec.lesion_semi_axis;
    if !(smin > 0.0 && smin <= smax) {
        return Err(Error::config("lesion semi-axis range is invalid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let brain = Ellipsoid {
        center: dims.map(|d| (d as f64 - 1.0) / 2.0),
        semi: spec.brain_semi_axes,
    };
    let half_x = dims[0] / 2;

    let n = dims[0] * dims[1] * dims[2];
    let idx = |[x, y, z]: [usize; 3]| x + dims[0] * (y + dims[1] * z);
    let mut truth = vec![0.0f32; n];
    let count = rng.gen_range(lmin..=lmax);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let semi = [
                rng.gen_range(smin..=smax),
                rng.gen_range(smin..=smax),
                rng.gen_range(smin..=smax),
            ];
            let center = [
                rng.gen_range(0.0..half_x as f64),
                rng.gen_range(0.0..dims[1] as f64),
                rng.gen_range(0.0..dims[2] as f64),
            ];
            let lesion = Ellipsoid { center, semi };
            let vox = lesion.voxels(dims);
            let ok = !vox.is_empty()
                && vox.iter().all(|&[x, y, z]| {
                    x < half_x && brain.contains([x as f64, y as f64, z as f64])
                });
            if ok {
                for v in vox {
                    truth[idx(v)] = 1.0;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config("could not place a lesion inside the left hemisphere"));
        }
    }

    let mut t1 = vec![0.0f32; n];
    let mut flair = vec![0.0f32; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = idx([x, y, z]);
                if brain.contains([x as f64, y as f64, z as f64]) {
                    let lesion = truth[i] != 0.0;
                    t1[i] = spec.base_intensity + if lesion { spec.t1_lesion_delta } else { 0.0 };
                    flair[i] = spec.base_intensity + if lesion { spec.flair_lesion_delta } else { 0.0 };
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::config(format!("noise sigma: {e}")))?;
        for v in t1.iter_mut().chain(flair.iter_mut()) {
            *v += noise.sample(&mut rng);
        }
    }

    Ok(Phantom {
        t1: Volume::new(dims, spec.voxel_mm, Modality::T1, t1)?,
        flair: Volume::new(dims, spec.voxel_mm, Modality::Flair, flair)?,
        truth: Volume::new(dims, spec.voxel_mm, Modality::Mask, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_bit_identical() {
        let spec = PhantomSpec::new([32, 32, 32], 5);
        let a = gen_phantom(&spec).unwrap();
        let b = gen_phantom(&spec).unwrap();
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.t1), bits(&b.t1));
        assert_eq!(bits(&a.flair), bits(&b.flair));
        assert_eq!(a.truth, b.truth);
        let c = gen_phantom(&PhantomSpec::new([32, 32, 32], 6)).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn lesions_confined_to_left_half() {
        for seed in 0..8 {
            let p = gen_phantom(&PhantomSpec::new([48, 64, 48], seed)).unwrap();
            let [dx, dy, dz] = p.truth.dims();
            assert!(p.truth.count_nonzero() > 0);
            for z in 0..dz {
                for y in 0..dy {
                    for x in dx / 2..dx {
                        assert_eq!(p.truth.get(x, y, z), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_lesion_free_brain_is_base_intensity() {
        let mut spec = PhantomSpec::new([16, 16, 16], 1);
        spec.noise_sigma = 0.0;
        spec.lesion_count = (0, 0);
        let p = gen_phantom(&spec).unwrap();
        assert_eq!(p.truth.count_nonzero(), 0);
        let center = p.t1.get(8, 8, 8);
        assert_eq!(center, 0.8);
        assert!(p.t1.data().iter().all(|&v| v == 0.0 || v == 0.8));
    }

    #[test]
    fn lesion_contrast_signs() {
        let mut spec = PhantomSpec::new([32, 32, 32], 3);
        spec.noise_sigma = 0.0;
        let p = gen_phantom(&spec).unwrap();
        for (i, &m) in p.truth.data().iter().enumerate() {
            if m == 1.0 {
                assert!((p.t1.data()[i] - 0.5).abs() < 1e-6);
                assert!((p.flair.data()[i] - 1.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_indivisible_dims() {
        let spec = PhantomSpec::new([50, 64, 48], 0);
        assert!(matches!(gen_phantom(&spec), Err(Error::Config(_))));
    }
}
