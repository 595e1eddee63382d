//! Oracle-backed verification of a workload: reduction to dense attention,
//! tile-size independence, the logsumexp identity, and finite-difference
//! gradient spot checks. Prints one PASS/FAIL line per property.

use ssa_core::attention::{
    default_scale, dense_attention, tiled_attention, HeadTensor,
};
use ssa_core::partition::partition_blocks;
use ssa_core::ssa::compress::Projection;
use ssa_core::ssa::select::{selection_attention_forward, topk_blocks};
use ssa_core::ssa::{ssa_backward, ssa_forward, GateParams, SsaConfig};

use crate::workload::{features, Workload};

/// Tolerances for the verification properties.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub reduction: f64,
    pub tiling: f64,
    pub gradient: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            reduction: 1e-10,
            tiling: 1e-12,
            gradient: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub properties: Vec<PropertyResult>,
}

impl Report {
    fn add(&mut self, name: &'static str, error: f64, tolerance: f64) {
        let pass = error.is_finite() && error <= tolerance;
        println!(
            "{}: {name} (measured {error:.3e}, tol {tolerance:.0e})",
            if pass { "PASS" } else { "FAIL" }
        );
        self.properties.push(PropertyResult {
            name,
            error,
            tolerance,
            pass,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ssa_config(w: &Workload) -> SsaConfig {
    let mut config = SsaConfig::new(w.config.m_cmp, w.config.m_slc, w.config.m_win, w.config.top_k);
    config.kv_heads = w.config.kv_heads;
    config.shared = w.config.shared;
    config.dim = w.config.dim;
    config
}

/// Run the invariant suite on a workload in 64-bit arithmetic.
/// `corrupt_lse` is a negative-control hook: it perturbs the stored
/// logsumexp before the identity check, which must then fail.
pub fn verify(workload: &Workload, tol: &Tolerances, corrupt_lse: bool) -> Report {
    let mut report = Report::default();
    let n = workload.coords.len();
    let config = ssa_config(workload);
    let (q, k, v) = features::<f64>(n, &workload.config, workload.seed);
    let scale = default_scale::<f64>(config.dim);

    // Reduction to dense: selecting every block reproduces dense attention.
    let part = partition_blocks(&workload.coords, config.m_slc).unwrap();
    let n_b = part.num_blocks();
    let idx = topk_blocks(
        &vec![1.0f64; n * config.kv_heads * n_b],
        n,
        config.kv_heads,
        n_b,
        n_b,
    )
    .unwrap();
    let selected = selection_attention_forward(&q, &k, &v, &idx, &part, scale, 64).unwrap();
    let dense = dense_attention(&q, &k, &v, scale).unwrap();
    report.add(
        "selection with T = N_b matches dense oracle",
        max_rel(selected.output.data(), dense.output.data())
            .max(max_rel(&selected.lse, &dense.lse)),
        tol.reduction,
    );

    // Tile-size independence of the streamed forward.
    let mut tile_err = 0.0f64;
    let base = tiled_attention(&q, &k, &v, scale, 1).unwrap();
    for tile in [2usize, 7, 64] {
        let other = tiled_attention(&q, &k, &v, scale, tile).unwrap();
        tile_err = tile_err.max(max_abs(base.output.data(), other.output.data()));
        tile_err = tile_err.max(max_abs(&base.lse, &other.lse));
    }
    report.add("tiled forward independent of tile size", tile_err, tol.tiling);

    // Logsumexp identity: exp(logit - lse) sums to one per (query, head).
    let mut lse = dense.lse.clone();
    if corrupt_lse {
        lse[0] += 0.5;
    }
    let heads = config.kv_heads * config.shared;
    let mut lse_err = 0.0f64;
    for t in 0..n.min(256) {
        for g in 0..config.kv_heads {
            for s in 0..config.shared {
                let h = g * config.shared + s;
                let q_row = q.row(t, h);
                let mut total = 0.0;
                for j in 0..n {
                    let logit: f64 = scale
                        * q_row.iter().zip(k.row(j, g)).map(|(a, b)| a * b).sum::<f64>();
                    total += (logit - lse[t * heads + h]).exp();
                }
                lse_err = lse_err.max((total - 1.0).abs());
            }
        }
    }
    report.add("logsumexp normalizes the softmax", lse_err, 1e-9);

    // Finite-difference gradient spot check on a small prefix.
    let m = n.min(48);
    let coords_small = &workload.coords[..m];
    let (qs, ks, vs) = features::<f64>(m, &workload.config, workload.seed ^ 0xabcd);
    let proj = Projection::identity(config.dim);
    let gate = GateParams::neutral(config.kv_heads * config.shared * config.dim);
    let (out, state) =
        ssa_forward(&config, &qs, &ks, &vs, coords_small, &proj, &proj, &gate).unwrap();
    let weights: Vec<f64> = (0..out.data().len())
        .map(|i| ((i * 2654435761) % 2000) as f64 / 1000.0 - 1.0)
        .collect();
    let grad_out = HeadTensor::new(m, config.kv_heads, config.shared, config.dim, weights.clone())
        .unwrap();
    let grads = ssa_backward(
        &state, &qs, &ks, &vs, coords_small, &proj, &proj, &gate, &grad_out,
    )
    .unwrap();
    let loss = |q: &HeadTensor<f64>, k: &HeadTensor<f64>, v: &HeadTensor<f64>| {
        let (o, _) = ssa_forward(&config, q, k, v, coords_small, &proj, &proj, &gate).unwrap();
        o.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum::<f64>()
    };
    let h = 1e-5;
    let mut fd_err = 0.0f64;
    let mut probe = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        fd_err = fd_err.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
    };
    for idx in (0..qs.data().len()).step_by(qs.data().len() / 12 + 1) {
        let mut p = qs.clone();
        p.data_mut()[idx] += h;
        let mut mi = qs.clone();
        mi.data_mut()[idx] -= h;
        probe(grads.q.data()[idx], loss(&p, &ks, &vs), loss(&mi, &ks, &vs));
    }
    for idx in (0..ks.data().len()).step_by(ks.data().len() / 12 + 1) {
        let mut p = ks.clone();
        p.data_mut()[idx] += h;
        let mut mi = ks.clone();
        mi.data_mut()[idx] -= h;
        probe(grads.k.data()[idx], loss(&qs, &p, &vs), loss(&qs, &mi, &vs));
        let mut p = vs.clone();
        p.data_mut()[idx] += h;
        let mut mi = vs.clone();
        mi.data_mut()[idx] -= h;
        probe(grads.v.data()[idx], loss(&qs, &ks, &p), loss(&qs, &ks, &mi));
    }
    report.add("finite-difference gradient spot check", fd_err, tol.gradient);

    report
}
