//! Wall-clock scaling benchmark: dense attention versus the sparse pipeline,
//! forward and backward, across a ladder of token counts.

use std::time::Instant;

use ssa_core::attention::{
    default_scale, dense_attention, dense_attention_backward, HeadTensor,
};
use ssa_core::ssa::compress::Projection;
use ssa_core::ssa::{ssa_backward, ssa_forward, GateParams, SsaConfig};

use crate::workload::{features, sized_coords, WorkloadConfig, WorkloadError};

/// One timed measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n_tokens: usize,
    pub mechanism: String,
    pub direction: String,
    pub wall_ms: f64,
    pub repeats: usize,
    pub threads: usize,
    pub flops: f64,
    pub speedup: f64,
}

pub const CSV_HEADER: &str = "n_tokens,mechanism,direction,wall_ms,repeats,threads,flops,speedup";

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{:.6e},{:.6}\n",
            r.n_tokens, r.mechanism, r.direction, r.wall_ms, r.repeats, r.threads, r.flops,
            r.speedup
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Option<Vec<BenchRecord>> {
    let mut lines = text.lines();
    if lines.next()? != CSV_HEADER {
        return None;
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return None;
        }
        out.push(BenchRecord {
            n_tokens: f[0].parse().ok()?,
            mechanism: f[1].to_string(),
            direction: f[2].to_string(),
            wall_ms: f[3].parse().ok()?,
            repeats: f[4].parse().ok()?,
            threads: f[5].parse().ok()?,
            flops: f[6].parse().ok()?,
            speedup: f[7].parse().ok()?,
        });
    }
    Some(out)
}

/// 2 ops per multiply-add; attention counted as QK^T + PV only.
pub fn dense_forward_flops(n: usize, dim: usize, heads: usize) -> f64 {
    4.0 * (n as f64) * (n as f64) * dim as f64 * heads as f64
}

/// Backward recomputes the probabilities and forms three gradients; the
/// conventional estimate is 2.5x the forward cost.
pub fn backward_factor() -> f64 {
    2.5
}

/// Forward FLOPs of the sparse pipeline given the realized block geometry.
pub fn ssa_forward_flops(
    n: usize,
    dim: usize,
    heads: usize,
    n_cmp: usize,
    selected_tokens: f64,
    window_tokens: f64,
) -> f64 {
    let per_pair = 4.0 * dim as f64 * heads as f64;
    (n as f64) * (n_cmp as f64 + selected_tokens + window_tokens) * per_pair
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

const WARMUP: usize = 2;

fn time_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..WARMUP {
        f();
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f();
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    median(times)
}

/// Benchmark one token count; returns four records (dense/ssa x fwd/bwd).
pub fn bench_size(
    n: usize,
    config: &WorkloadConfig,
    repeats: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>, WorkloadError> {
    let coords = sized_coords(n)?;
    let (q, k, v) = features::<f32>(n, config, seed);
    let heads = config.kv_heads * config.shared;
    let scale = default_scale::<f32>(config.dim);

    let mut ssa_config = SsaConfig::new(config.m_cmp, config.m_slc, config.m_win, config.top_k);
    ssa_config.kv_heads = config.kv_heads;
    ssa_config.shared = config.shared;
    ssa_config.dim = config.dim;
    let proj = Projection::identity(config.dim);
    let gate = GateParams::neutral(heads * config.dim);

    let grad_out = {
        let data: Vec<f32> = (0..n * heads * config.dim)
            .map(|i| ((i * 2654435761) % 2000) as f32 / 1000.0 - 1.0)
            .collect();
        HeadTensor::new(n, config.kv_heads, config.shared, config.dim, data).unwrap()
    };

    // Dense forward and backward.
    let dense_fwd_ms = time_ms(repeats, || {
        std::hint::black_box(dense_attention(&q, &k, &v, scale).unwrap());
    });
    let dense_result = dense_attention(&q, &k, &v, scale).unwrap();
    let dense_bwd_ms = time_ms(repeats, || {
        std::hint::black_box(
            dense_attention_backward(&q, &k, &v, scale, &dense_result, &grad_out).unwrap(),
        );
    });

    // Sparse forward and backward.
    let ssa_fwd_ms = time_ms(repeats, || {
        std::hint::black_box(
            ssa_forward(&ssa_config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap(),
        );
    });
    let (_, state) = ssa_forward(&ssa_config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();
    let ssa_bwd_ms = time_ms(repeats, || {
        std::hint::black_box(
            ssa_backward(&state, &q, &k, &v, &coords, &proj, &proj, &gate, &grad_out).unwrap(),
        );
    });

    // Realized sparse geometry for the FLOP model.
    let n_cmp = state.hierarchy.cmp.num_blocks();
    let offsets = state.hierarchy.slc.offsets();
    let mut selected = 0f64;
    for t in 0..n {
        for g in 0..config.kv_heads {
            for &b in state.selection.slot(t, g) {
                selected += (offsets[b as usize + 1] - offsets[b as usize]) as f64;
            }
        }
    }
    let selected_per_token = selected / (n * config.kv_heads.max(1)) as f64;
    let win_offsets = state.win_partition.offsets();
    let window_pairs: f64 = (0..state.win_partition.num_blocks())
        .map(|b| {
            let len = (win_offsets[b + 1] - win_offsets[b]) as f64;
            len * len
        })
        .sum();
    let window_per_token = window_pairs / n as f64;
    let ssa_fwd_flops = ssa_forward_flops(
        n,
        config.dim,
        heads,
        n_cmp,
        selected_per_token,
        window_per_token,
    );
    let dense_fwd = dense_forward_flops(n, config.dim, heads);

    Ok(vec![
        BenchRecord {
            n_tokens: n,
            mechanism: "dense".into(),
            direction: "forward".into(),
            wall_ms: dense_fwd_ms,
            repeats,
            threads,
            flops: dense_fwd,
            speedup: 1.0,
        },
        BenchRecord {
            n_tokens: n,
            mechanism: "dense".into(),
            direction: "backward".into(),
            wall_ms: dense_bwd_ms,
            repeats,
            threads,
            flops: dense_fwd * backward_factor(),
            speedup: 1.0,
        },
        BenchRecord {
            n_tokens: n,
            mechanism: "ssa".into(),
            direction: "forward".into(),
            wall_ms: ssa_fwd_ms,
            repeats,
            threads,
            flops: ssa_fwd_flops,
            speedup: dense_fwd_ms / ssa_fwd_ms,
        },
        BenchRecord {
            n_tokens: n,
            mechanism: "ssa".into(),
            direction: "backward".into(),
            wall_ms: ssa_bwd_ms,
            repeats,
            threads,
            flops: ssa_fwd_flops * backward_factor(),
            speedup: dense_bwd_ms / ssa_bwd_ms,
        },
    ])
}

/// Run the full ladder; sizes that fail to allocate are skipped with a note.
pub fn bench_ladder(
    sizes: &[usize],
    config: &WorkloadConfig,
    repeats: usize,
    threads: usize,
    seed: u64,
) -> Vec<BenchRecord> {
    let mut records = Vec::new();
    for &n in sizes {
        match bench_size(n, config, repeats, threads, seed) {
            Ok(mut rows) => records.append(&mut rows),
            Err(e) => eprintln!("skipping n_tokens={n}: {e}"),
        }
    }
    records
}
