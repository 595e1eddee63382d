//! Workload generation, verification and scaling benchmarks for the sparse
//! attention kernels. The binary in `main.rs` is a thin CLI over this crate.

pub mod bench;
pub mod verify;
pub mod workload;

/// Default RNG seed; overridable with the `SSA_SEED` environment variable.
pub const DEFAULT_SEED: u64 = 0x5541_u64;

/// Resolve the effective seed: explicit flag beats `SSA_SEED` beats default.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    match std::env::var("SSA_SEED") {
        Ok(v) => v.parse().unwrap_or(DEFAULT_SEED),
        Err(_) => DEFAULT_SEED,
    }
}
