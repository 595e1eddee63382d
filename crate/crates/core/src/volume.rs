//! SDF volumes and their sparse active-voxel form.
//!
//! The grid spans `[-1, 1]^3`; the center of voxel index `i` along an axis is
//! `-1 + (2i + 1) / R`. Values are stored row-major with x slowest, then y,
//! then z. Active voxels are those with `|sdf| < tau` (strict).

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::Coord;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("resolution must be >= 2, got {0}")]
    BadResolution(u32),
    #[error("expected {expected} values for resolution {resolution}, got {got}")]
    WrongValueCount {
        resolution: u32,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at linear index {0}")]
    NonFinite(usize),
    #[error("degenerate shape: {0}")]
    DegenerateShape(&'static str),
    #[error("shape zero level set touches or leaves [-1,1]^3")]
    ShapeOutOfBounds,
    #[error("tau must be positive, got {0}")]
    BadTau(f64),
    #[error("coordinate {0:?} out of range for resolution {1}")]
    CoordOutOfRange(Coord, u32),
    #[error("coordinates not sorted-unique at position {0}")]
    UnsortedCoords(usize),
    #[error("sdf value at position {0} not below tau")]
    SdfAboveTau(usize),
    #[error("coords/sdf length mismatch: {coords} vs {sdf}")]
    LengthMismatch { coords: usize, sdf: usize },
}

/// Dense SDF grid at resolution `R^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfVolume<S> {
    resolution: u32,
    values: Vec<S>,
}

impl<S: Scalar> SdfVolume<S> {
    pub fn new(resolution: u32, values: Vec<S>) -> Result<Self, VolumeError> {
        if resolution < 2 {
            return Err(VolumeError::BadResolution(resolution));
        }
        let expected = (resolution as usize).pow(3);
        if values.len() != expected {
            return Err(VolumeError::WrongValueCount {
                resolution,
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { resolution, values })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn value(&self, coord: Coord) -> S {
        let r = self.resolution as usize;
        let [i, j, k] = coord.map(|c| c as usize);
        self.values[(i * r + j) * r + k]
    }

    /// World-space position of a voxel center along one axis.
    #[inline]
    pub fn center(resolution: u32, index: u32) -> f64 {
        -1.0 + (2.0 * index as f64 + 1.0) / resolution as f64
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> SdfVolume<T> {
        SdfVolume {
            resolution: self.resolution,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Active voxels of a volume: `{ (x, s(x)) : |s(x)| < tau }`, sorted
/// lexicographically by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelSet<S> {
    resolution: u32,
    tau: S,
    coords: Vec<Coord>,
    sdf: Vec<S>,
}

impl<S: Scalar> SparseVoxelSet<S> {
    pub fn new(
        resolution: u32,
        tau: S,
        coords: Vec<Coord>,
        sdf: Vec<S>,
    ) -> Result<Self, VolumeError> {
        if resolution < 2 {
            return Err(VolumeError::BadResolution(resolution));
        }
        if !(tau > S::zero()) {
            return Err(VolumeError::BadTau(tau.as_f64()));
        }
        if coords.len() != sdf.len() {
            return Err(VolumeError::LengthMismatch {
                coords: coords.len(),
                sdf: sdf.len(),
            });
        }
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|&x| x >= resolution) {
                return Err(VolumeError::CoordOutOfRange(*c, resolution));
            }
            if i > 0 && coords[i - 1] >= *c {
                return Err(VolumeError::UnsortedCoords(i));
            }
        }
        for (i, &s) in sdf.iter().enumerate() {
            if !s.is_finite() || !(s.abs() < tau) {
                return Err(VolumeError::SdfAboveTau(i));
            }
        }
        Ok(Self {
            resolution,
            tau,
            coords,
            sdf,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn sdf(&self) -> &[S] {
        &self.sdf
    }
}

/// Analytic test geometry with exact signed distance.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    UnionOfSpheres {
        spheres: Vec<([f64; 3], f64)>,
    },
}

impl ShapeSpec {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Self::Sphere { center, radius }
    }

    /// Exact signed distance at a world-space point.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Self::Sphere { center, radius } => dist(p, *center) - radius,
            Self::Box {
                center,
                half_extents,
            } => {
                let q = [
                    (p[0] - center[0]).abs() - half_extents[0],
                    (p[1] - center[1]).abs() - half_extents[1],
                    (p[2] - center[2]).abs() - half_extents[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let outside_len =
                    (outside[0] * outside[0] + outside[1] * outside[1] + outside[2] * outside[2])
                        .sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside_len + inside
            }
            Self::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let dz = p[2] - center[2];
                let ring = (dx * dx + dy * dy).sqrt() - major_radius;
                (ring * ring + dz * dz).sqrt() - minor_radius
            }
            Self::UnionOfSpheres { spheres } => spheres
                .iter()
                .map(|(c, r)| dist(p, *c) - r)
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let check_sphere = |c: &[f64; 3], r: f64| -> Result<(), VolumeError> {
            if !(r > 0.0) {
                return Err(VolumeError::DegenerateShape("radius <= 0"));
            }
            if c.iter().any(|&x| x.abs() + r >= 1.0) {
                return Err(VolumeError::ShapeOutOfBounds);
            }
            Ok(())
        };
        match self {
            Self::Sphere { center, radius } => check_sphere(center, *radius),
            Self::Box {
                center,
                half_extents,
            } => {
                if half_extents.iter().any(|&h| !(h > 0.0)) {
                    return Err(VolumeError::DegenerateShape("half extent <= 0"));
                }
                for a in 0..3 {
                    if center[a].abs() + half_extents[a] >= 1.0 {
                        return Err(VolumeError::ShapeOutOfBounds);
                    }
                }
                Ok(())
            }
            Self::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                if !(*major_radius > 0.0) || !(*minor_radius > 0.0) || minor_radius >= major_radius
                {
                    return Err(VolumeError::DegenerateShape("torus radii"));
                }
                let reach = major_radius + minor_radius;
                if center[0].abs() + reach >= 1.0
                    || center[1].abs() + reach >= 1.0
                    || center[2].abs() + minor_radius >= 1.0
                {
                    return Err(VolumeError::ShapeOutOfBounds);
                }
                Ok(())
            }
            Self::UnionOfSpheres { spheres } => {
                if spheres.is_empty() {
                    return Err(VolumeError::DegenerateShape("empty union"));
                }
                spheres.iter().try_for_each(|(c, r)| check_sphere(c, *r))
            }
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Sample the analytic SDF of `spec` at every voxel center.
pub fn analytic_sdf<S: Scalar>(
    spec: &ShapeSpec,
    resolution: u32,
) -> Result<SdfVolume<S>, VolumeError> {
    if resolution < 2 {
        return Err(VolumeError::BadResolution(resolution));
    }
    spec.validate()?;
    let r = resolution as usize;
    let centers: Vec<f64> = (0..resolution)
        .map(|i| SdfVolume::<S>::center(resolution, i))
        .collect();
    let mut values = vec![S::zero(); r * r * r];
    values
        .par_chunks_mut(r * r)
        .enumerate()
        .for_each(|(i, slab)| {
            let x = centers[i];
            for j in 0..r {
                let y = centers[j];
                for k in 0..r {
                    slab[j * r + k] = S::from_f64_lossy(spec.sdf([x, y, centers[k]]));
                }
            }
        });
    SdfVolume::new(resolution, values)
}

/// Extract the active voxels with `|s(x)| < tau`.
pub fn extract_active_voxels<S: Scalar>(
    volume: &SdfVolume<S>,
    tau: S,
) -> Result<SparseVoxelSet<S>, VolumeError> {
    if !(tau > S::zero()) {
        return Err(VolumeError::BadTau(tau.as_f64()));
    }
    let r = volume.resolution();
    let mut coords = Vec::new();
    let mut sdf = Vec::new();
    // x-major iteration yields lexicographic coordinate order directly.
    let mut idx = 0usize;
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                let s = volume.values()[idx];
                idx += 1;
                if s.abs() < tau {
                    coords.push([i, j, k]);
                    sdf.push(s);
                }
            }
        }
    }
    SparseVoxelSet::new(r, tau, coords, sdf)
}

/// Trilinear resampling onto a `target^3` grid over the same `[-1,1]^3` span.
/// Samples outside the source center lattice clamp to the boundary sample.
pub fn resample_trilinear<S: Scalar>(
    volume: &SdfVolume<S>,
    target: u32,
) -> Result<SdfVolume<S>, VolumeError> {
    if target < 2 {
        return Err(VolumeError::BadResolution(target));
    }
    let src_r = volume.resolution();
    let tr = target as usize;
    // Continuous source index of a target center: u = (x + 1) * R_src / 2 - 1/2.
    let src_index: Vec<f64> = (0..target)
        .map(|i| (SdfVolume::<S>::center(target, i) + 1.0) * src_r as f64 / 2.0 - 0.5)
        .collect();
    let axes: Vec<(usize, usize, S)> = src_index
        .iter()
        .map(|&u| {
            let clamped = u.clamp(0.0, (src_r - 1) as f64);
            let lo = (clamped.floor() as usize).min(src_r as usize - 1);
            let hi = (lo + 1).min(src_r as usize - 1);
            let frac = if hi == lo { 0.0 } else { clamped - lo as f64 };
            (lo, hi, S::from_f64_lossy(frac))
        })
        .collect();
    let mut values = vec![S::zero(); tr * tr * tr];
    values
        .par_chunks_mut(tr * tr)
        .enumerate()
        .for_each(|(i, slab)| {
            let (x0, x1, fx) = axes[i];
            for j in 0..tr {
                let (y0, y1, fy) = axes[j];
                for k in 0..tr {
                    let (z0, z1, fz) = axes[k];
                    let at = |x: usize, y: usize, z: usize| {
                        volume.value([x as u32, y as u32, z as u32])
                    };
                    let one = S::one();
                    let lerp = |a: S, b: S, t: S| a * (one - t) + b * t;
                    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                    let c0 = lerp(c00, c10, fy);
                    let c1 = lerp(c01, c11, fy);
                    slab[j * tr + k] = lerp(c0, c1, fz);
                }
            }
        });
    SdfVolume::new(target, values)
}
