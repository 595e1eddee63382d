//! Synthetic sparse workloads: a shape's shell voxels at a latent resolution
//! plus seeded unit-normal attention features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ssa_core::attention::HeadTensor;
use ssa_core::volume::{SdfVolume, ShapeSpec};
use ssa_core::Coord;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("unknown shape '{0}' (expected sphere, box or torus)")]
    UnknownShape(String),
    #[error("resolution must be a positive multiple of the latent factor")]
    BadResolution,
    #[error("shape shell is empty at this resolution")]
    EmptyShell,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Attention layout parameters carried by a workload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct WorkloadConfig {
    pub m_cmp: u32,
    pub m_slc: u32,
    pub m_win: u32,
    pub top_k: usize,
    pub kv_heads: usize,
    pub shared: usize,
    pub dim: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            m_cmp: 4,
            m_slc: 8,
            m_win: 8,
            top_k: 8,
            kv_heads: 1,
            shared: 2,
            dim: 12,
        }
    }
}

/// A generated workload: shell coordinates plus the recipe (shape, seed,
/// config) that deterministically reproduces its features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Workload {
    pub shape: String,
    pub resolution: u32,
    pub latent_factor: u32,
    pub seed: u64,
    pub config: WorkloadConfig,
    pub coords: Vec<Coord>,
}

pub fn shape_by_name(name: &str) -> Result<ShapeSpec, WorkloadError> {
    match name {
        "sphere" => Ok(ShapeSpec::sphere([0.0; 3], 0.8)),
        "box" => Ok(ShapeSpec::Box {
            center: [0.0; 3],
            half_extents: [0.6, 0.5, 0.7],
        }),
        "torus" => Ok(ShapeSpec::Torus {
            center: [0.0; 3],
            major_radius: 0.55,
            minor_radius: 0.25,
        }),
        other => Err(WorkloadError::UnknownShape(other.to_string())),
    }
}

/// Shell threshold at the latent resolution: half a latent voxel, so the
/// shell is about one voxel thick in signed distance.
pub fn shell_tau(resolution: u32, latent_factor: u32) -> f64 {
    latent_factor as f64 / resolution as f64
}

/// Enumerate the latent-grid voxels whose centers lie within the shell
/// threshold of the surface. Works directly at the latent resolution, so no
/// dense volume is ever materialized.
pub fn shell_coords(
    shape: &ShapeSpec,
    resolution: u32,
    latent_factor: u32,
) -> Result<Vec<Coord>, WorkloadError> {
    if latent_factor == 0 || resolution == 0 || resolution % latent_factor != 0 {
        return Err(WorkloadError::BadResolution);
    }
    let r = resolution / latent_factor;
    let tau = shell_tau(resolution, latent_factor);
    let mut coords = Vec::new();
    for i in 0..r {
        let x = SdfVolume::<f64>::center(r, i);
        for j in 0..r {
            let y = SdfVolume::<f64>::center(r, j);
            for k in 0..r {
                let z = SdfVolume::<f64>::center(r, k);
                if shape.sdf([x, y, z]).abs() < tau {
                    coords.push([i, j, k]);
                }
            }
        }
    }
    if coords.is_empty() {
        return Err(WorkloadError::EmptyShell);
    }
    Ok(coords)
}

pub fn gen_workload(
    shape_name: &str,
    resolution: u32,
    latent_factor: u32,
    config: WorkloadConfig,
    seed: u64,
) -> Result<Workload, WorkloadError> {
    let shape = shape_by_name(shape_name)?;
    let coords = shell_coords(&shape, resolution, latent_factor)?;
    Ok(Workload {
        shape: shape_name.to_string(),
        resolution,
        latent_factor,
        seed,
        config,
        coords,
    })
}

/// Exactly `n` shell coordinates of a sphere, found by growing the latent
/// resolution until the shell is large enough and trimming deterministically.
pub fn sized_coords(n: usize) -> Result<Vec<Coord>, WorkloadError> {
    let shape = shape_by_name("sphere")?;
    // Shell count grows ~2 R^2; start just below the expected resolution.
    let mut r = ((n as f64 / 2.0).sqrt() as u32).max(4);
    loop {
        let coords = shell_coords(&shape, r * 8, 8)?;
        if coords.len() >= n {
            let mut coords = coords;
            coords.truncate(n);
            return Ok(coords);
        }
        r = (r as f64 * 1.3).ceil() as u32;
    }
}

/// Seeded unit-normal feature tensors for a coordinate set.
pub fn features<S: ssa_core::scalar::Scalar>(
    n: usize,
    config: &WorkloadConfig,
    seed: u64,
) -> (HeadTensor<S>, HeadTensor<S>, HeadTensor<S>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |tokens: usize, kv: usize, sh: usize| {
        let data: Vec<S> = (0..tokens * kv * sh * config.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                S::from_f64_lossy(x)
            })
            .collect();
        HeadTensor::new(tokens, kv, sh, config.dim, data).unwrap()
    };
    let q = draw(n, config.kv_heads, config.shared);
    let k = draw(n, config.kv_heads, 1);
    let v = draw(n, config.kv_heads, 1);
    (q, k, v)
}

pub fn save(workload: &Workload, path: &std::path::Path) -> Result<(), WorkloadError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, workload)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Workload, WorkloadError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}
