//! Spatial sparse attention: three branches over a sparse 3D token set —
//! compressed-block attention, top-k selected-block attention, and local
//! window attention — mixed per token by learned sigmoid gates.

pub mod compress;
pub mod pe;
pub mod select;
pub mod window;

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{default_scale, AttentionError, AttentionResult, HeadTensor};
use crate::partition::{build_hierarchy, partition_blocks, BlockHierarchy, BlockPartition, PartitionError};
use crate::scalar::Scalar;
use crate::Coord;

use compress::{compress_tokens, compress_tokens_backward, CompressedTokens, Projection};
use pe::DEFAULT_PE_BASE;
use select::{
    compression_attention_with_selection, selection_attention_backward,
    selection_attention_forward, SelectionIndex,
};
use window::{window_attention, window_attention_backward};

/// Errors from the sparse-attention pipeline.
#[derive(Debug, Error)]
pub enum SsaError {
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("positional encoding needs channels divisible by 2 x axes: {channels} channels, {axes} axes")]
    IndivisibleChannels { channels: usize, axes: usize },
    #[error("projection is {dim}x{dim} but input has {got} channels")]
    BadProjection { dim: usize, got: usize },
    #[error("selected block {block} out of range ({num_blocks} blocks)")]
    BlockIndexOutOfRange { block: u32, num_blocks: usize },
    #[error("forward/backward state mismatch: {0}")]
    StateMismatch(&'static str),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// Positional-encoding policy for compressed blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeSpec {
    pub enabled: bool,
    pub base: f64,
}

impl Default for PeSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            base: DEFAULT_PE_BASE,
        }
    }
}

/// Block sizes, head layout, and selection budget for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaConfig {
    /// Compression block edge length (voxels).
    pub m_cmp: u32,
    /// Selection block edge length; must be a strict multiple of `m_cmp`.
    pub m_slc: u32,
    /// Window block edge length.
    pub m_win: u32,
    /// Number of selection blocks each (token, kv-head) attends to.
    pub top_k: usize,
    /// Key/value head count.
    pub kv_heads: usize,
    /// Query heads sharing each kv head.
    pub shared: usize,
    /// Channels per head.
    pub dim: usize,
    /// Logit scale; `None` means `1/sqrt(dim)`.
    pub scale: Option<f64>,
    pub pe: PeSpec,
    /// Streaming tile length for the selection branch.
    pub tile: usize,
}

impl SsaConfig {
    pub fn new(m_cmp: u32, m_slc: u32, m_win: u32, top_k: usize) -> Self {
        Self {
            m_cmp,
            m_slc,
            m_win,
            top_k,
            kv_heads: 1,
            shared: 1,
            dim: 16,
            scale: None,
            pe: PeSpec::default(),
            tile: 128,
        }
    }

    pub fn validate(&self) -> Result<(), SsaError> {
        if self.m_cmp == 0 || self.m_slc == 0 || self.m_win == 0 {
            return Err(SsaError::Config("block sizes must be >= 1"));
        }
        if self.m_slc <= self.m_cmp || self.m_slc % self.m_cmp != 0 {
            return Err(SsaError::Config(
                "selection block must be a strict multiple of the compression block",
            ));
        }
        if self.top_k == 0 {
            return Err(SsaError::Config("top_k must be >= 1"));
        }
        if self.kv_heads == 0 || self.shared == 0 || self.dim == 0 {
            return Err(SsaError::Config("head layout must be nonzero"));
        }
        if self.tile == 0 {
            return Err(SsaError::Config("tile must be >= 1"));
        }
        Ok(())
    }

    pub fn scale_value<S: Scalar>(&self) -> S {
        match self.scale {
            Some(s) => S::from_f64_lossy(s),
            None => default_scale(self.dim),
        }
    }
}

/// Per-branch gate parameters: three rows of a linear map over the
/// concatenated per-token query features, squashed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<S> {
    /// `3 x (kv_heads * shared * dim)`, row-major.
    pub weight: Vec<S>,
    pub bias: [S; 3],
    pub features: usize,
}

impl<S: Scalar> GateParams<S> {
    /// Zero weights and biases: every gate sits at 1/2.
    pub fn neutral(features: usize) -> Self {
        Self {
            weight: vec![S::zero(); 3 * features],
            bias: [S::zero(); 3],
            features,
        }
    }

    /// Per-token gate triple `sigmoid(W q + b)`.
    pub fn gates(&self, q_flat: &[S]) -> [S; 3] {
        let mut out = [S::zero(); 3];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[r * self.features..(r + 1) * self.features];
            let z = self.bias[r]
                + row
                    .iter()
                    .zip(q_flat)
                    .map(|(&w, &x)| w * x)
                    .sum::<S>();
            *slot = S::one() / (S::one() + (-z).exp());
        }
        out
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct SsaState<S> {
    pub config: SsaConfig,
    pub coords: Vec<Coord>,
    pub hierarchy: BlockHierarchy,
    pub win_partition: BlockPartition,
    pub compressed_keys: CompressedTokens<S>,
    pub compressed_values: CompressedTokens<S>,
    pub cmp_result: AttentionResult<S>,
    pub selection: SelectionIndex<S>,
    pub slc_result: AttentionResult<S>,
    pub win_result: AttentionResult<S>,
    /// Per-token gate triples, `n_tokens x 3`.
    pub gates: Vec<S>,
}

/// Gradients of the full pipeline with respect to its inputs and parameters.
#[derive(Debug, Clone)]
pub struct SsaGradients<S> {
    pub q: HeadTensor<S>,
    pub k: HeadTensor<S>,
    pub v: HeadTensor<S>,
    pub gate_weight: Vec<S>,
    pub gate_bias: [S; 3],
    pub proj_k: Vec<S>,
    pub proj_v: Vec<S>,
}

fn check_inputs<S: Scalar>(
    config: &SsaConfig,
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    coords: &[Coord],
) -> Result<(), SsaError> {
    config.validate()?;
    if q.kv_heads() != config.kv_heads
        || q.shared() != config.shared
        || q.dim() != config.dim
    {
        return Err(SsaError::Shape("query layout does not match config"));
    }
    if k.kv_heads() != config.kv_heads || k.shared() != 1 || k.dim() != config.dim {
        return Err(SsaError::Shape("key layout does not match config"));
    }
    if v.kv_heads() != config.kv_heads || v.shared() != 1 || v.dim() != config.dim {
        return Err(SsaError::Shape("value layout does not match config"));
    }
    if q.tokens() != coords.len() || k.tokens() != coords.len() || v.tokens() != coords.len() {
        return Err(SsaError::Shape("token count mismatch with coordinates"));
    }
    Ok(())
}

/// Gate-weighted sum of the three branch outputs.
fn combine_outputs<S: Scalar>(
    cmp: &HeadTensor<S>,
    slc: &HeadTensor<S>,
    win: &HeadTensor<S>,
    gates: &[S],
) -> HeadTensor<S> {
    let (n, kv, sh, d) = (cmp.tokens(), cmp.kv_heads(), cmp.shared(), cmp.dim());
    let row = kv * sh * d;
    let mut out = HeadTensor::zeros(n, kv, sh, d);
    out.data_mut()
        .par_chunks_mut(row)
        .enumerate()
        .for_each(|(t, o)| {
            let g = &gates[t * 3..t * 3 + 3];
            let (a, b, c) = (
                &cmp.data()[t * row..(t + 1) * row],
                &slc.data()[t * row..(t + 1) * row],
                &win.data()[t * row..(t + 1) * row],
            );
            for i in 0..row {
                o[i] = g[0] * a[i] + g[1] * b[i] + g[2] * c[i];
            }
        });
    out
}

/// Full forward pass. `proj_k`/`proj_v` are the compression projections for
/// keys and values; pass [`Projection::identity`] for an unparameterized
/// mean pool.
#[allow(clippy::too_many_arguments)]
pub fn ssa_forward<S: Scalar>(
    config: &SsaConfig,
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    coords: &[Coord],
    proj_k: &Projection<S>,
    proj_v: &Projection<S>,
    gate: &GateParams<S>,
) -> Result<(HeadTensor<S>, SsaState<S>), SsaError> {
    check_inputs(config, q, k, v, coords)?;
    let features = config.kv_heads * config.shared * config.dim;
    if gate.features != features || gate.weight.len() != 3 * features {
        return Err(SsaError::Shape("gate parameter size"));
    }
    let scale: S = config.scale_value();

    let hierarchy = build_hierarchy(coords, config.m_cmp, config.m_slc)?;
    let win_partition = partition_blocks(coords, config.m_win)?;

    let compressed_keys = compress_tokens(k, coords, &hierarchy.cmp, proj_k, &config.pe)?;
    let compressed_values = compress_tokens(v, coords, &hierarchy.cmp, proj_v, &config.pe)?;

    // Compression attention, score aggregation, and top-k in one streamed
    // pass so the per-token probability rows never persist.
    let (cmp_result, selection) = compression_attention_with_selection(
        q,
        &compressed_keys,
        &compressed_values,
        &hierarchy,
        scale,
        config.top_k,
    )?;

    let slc_result =
        selection_attention_forward(q, k, v, &selection, &hierarchy.slc, scale, config.tile)?;
    let win_result = window_attention(q, k, v, &win_partition, scale)?;

    let n = q.tokens();
    let mut gates = vec![S::zero(); n * 3];
    gates
        .par_chunks_mut(3)
        .enumerate()
        .for_each(|(t, out)| {
            let g = gate.gates(&q.data()[t * features..(t + 1) * features]);
            out.copy_from_slice(&g);
        });

    let output = combine_outputs(
        &cmp_result.output,
        &slc_result.output,
        &win_result.output,
        &gates,
    );

    Ok((
        output,
        SsaState {
            config: config.clone(),
            coords: coords.to_vec(),
            hierarchy,
            win_partition,
            compressed_keys,
            compressed_values,
            cmp_result,
            selection,
            slc_result,
            win_result,
            gates,
        },
    ))
}

/// Full backward pass given the upstream gradient of the combined output.
/// Selection indices are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn ssa_backward<S: Scalar>(
    state: &SsaState<S>,
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    coords: &[Coord],
    proj_k: &Projection<S>,
    proj_v: &Projection<S>,
    gate: &GateParams<S>,
    grad_output: &HeadTensor<S>,
) -> Result<SsaGradients<S>, SsaError> {
    let config = &state.config;
    check_inputs(config, q, k, v, coords)?;
    if coords != state.coords.as_slice() {
        return Err(SsaError::StateMismatch("coordinates differ from forward"));
    }
    if grad_output.tokens() != q.tokens()
        || grad_output.kv_heads() != q.kv_heads()
        || grad_output.shared() != q.shared()
        || grad_output.dim() != q.dim()
    {
        return Err(SsaError::Shape("grad_output layout"));
    }
    let scale: S = config.scale_value();
    let n = q.tokens();
    let features = config.kv_heads * config.shared * config.dim;

    // Split the upstream gradient across the three branches through the
    // gates, and collect the gate pre-activation gradients.
    let row = features;
    let mut go_cmp = HeadTensor::zeros(n, q.kv_heads(), q.shared(), q.dim());
    let mut go_slc = go_cmp.clone();
    let mut go_win = go_cmp.clone();
    let mut gate_z = vec![S::zero(); n * 3];
    {
        let branch = [
            &state.cmp_result.output,
            &state.slc_result.output,
            &state.win_result.output,
        ];
        go_cmp
            .data_mut()
            .par_chunks_mut(row)
            .zip(go_slc.data_mut().par_chunks_mut(row))
            .zip(go_win.data_mut().par_chunks_mut(row))
            .zip(gate_z.par_chunks_mut(3))
            .enumerate()
            .for_each(|(t, (((gc, gs), gw), gz))| {
                let go = &grad_output.data()[t * row..(t + 1) * row];
                let g = &state.gates[t * 3..t * 3 + 3];
                for i in 0..row {
                    gc[i] = g[0] * go[i];
                    gs[i] = g[1] * go[i];
                    gw[i] = g[2] * go[i];
                }
                for (r, out) in gz.iter_mut().enumerate() {
                    let branch_row = &branch[r].data()[t * row..(t + 1) * row];
                    let dot = go
                        .iter()
                        .zip(branch_row)
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                    // d sigmoid(z)/dz = g (1 - g)
                    *out = dot * g[r] * (S::one() - g[r]);
                }
            });
    }

    // Gate parameter gradients: dz/dW_r = q_flat, dz/db_r = 1.
    let mut gate_weight = vec![S::zero(); 3 * features];
    let mut gate_bias = [S::zero(); 3];
    for t in 0..n {
        let qf = &q.data()[t * features..(t + 1) * features];
        for r in 0..3 {
            let gz = gate_z[t * 3 + r];
            gate_bias[r] += gz;
            let wrow = &mut gate_weight[r * features..(r + 1) * features];
            for (w, &x) in wrow.iter_mut().zip(qf) {
                *w += gz * x;
            }
        }
    }

    // Compression branch: attention backward over compressed tokens, then
    // pooling/projection backward onto the raw keys and values.
    let (cmp_gq, cmp_gck, cmp_gcv) = crate::attention::dense_attention_backward(
        q,
        &state.compressed_keys.tokens,
        &state.compressed_values.tokens,
        scale,
        &state.cmp_result,
        &go_cmp,
    )?;
    let (cmp_gk, grad_proj_k) = compress_tokens_backward(
        k,
        coords,
        &state.hierarchy.cmp,
        proj_k,
        &config.pe,
        &cmp_gck,
    )?;
    let (cmp_gv, grad_proj_v) = compress_tokens_backward(
        v,
        coords,
        &state.hierarchy.cmp,
        proj_v,
        &config.pe,
        &cmp_gcv,
    )?;

    let (slc_gq, slc_gk, slc_gv) = selection_attention_backward(
        q,
        k,
        v,
        &state.selection,
        &state.hierarchy.slc,
        scale,
        &state.slc_result,
        &go_slc,
    )?;

    let (win_gq, win_gk, win_gv) =
        window_attention_backward(q, k, v, &state.win_partition, scale, &state.win_result, &go_win)?;

    let mut grad_q = cmp_gq;
    let mut grad_k = cmp_gk;
    let mut grad_v = cmp_gv;
    for (dst, src) in [
        (&mut grad_q, [&slc_gq, &win_gq]),
        (&mut grad_k, [&slc_gk, &win_gk]),
        (&mut grad_v, [&slc_gv, &win_gv]),
    ] {
        for s in src {
            for (a, &b) in dst.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
    }

    // Gate contribution to the query gradient: z_r = W_r q_flat + b_r.
    grad_q
        .data_mut()
        .par_chunks_mut(features)
        .zip(gate_z.par_chunks(3))
        .for_each(|(gq, gz)| {
            for r in 0..3 {
                let wrow = &gate.weight[r * features..(r + 1) * features];
                for (a, &w) in gq.iter_mut().zip(wrow) {
                    *a += gz[r] * w;
                }
            }
        });

    Ok(SsaGradients {
        q: grad_q,
        k: grad_k,
        v: grad_v,
        gate_weight,
        gate_bias,
        proj_k: grad_proj_k,
        proj_v: grad_proj_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_attention;

    fn lcg_coords(n: usize, extent: u32, seed: u64) -> Vec<Coord> {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            state
        };
        let mut coords: Vec<Coord> = Vec::new();
        while coords.len() < n {
            let c = [
                ((next() >> 33) % extent as u64) as u32,
                ((next() >> 33) % extent as u64) as u32,
                ((next() >> 33) % extent as u64) as u32,
            ];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        coords.sort_unstable();
        coords
    }

    fn lcg_tensor(tokens: usize, kv: usize, sh: usize, d: usize, seed: u64) -> HeadTensor<f64> {
        let mut state = seed;
        let data = (0..tokens * kv * sh * d)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 24) % 2000) as f64 / 1000.0 - 1.0
            })
            .collect();
        HeadTensor::new(tokens, kv, sh, d, data).unwrap()
    }

    fn small_setup(
        n: usize,
        seed: u64,
    ) -> (
        SsaConfig,
        HeadTensor<f64>,
        HeadTensor<f64>,
        HeadTensor<f64>,
        Vec<Coord>,
    ) {
        let mut config = SsaConfig::new(4, 8, 8, 2);
        config.kv_heads = 2;
        config.shared = 2;
        config.dim = 6;
        let coords = lcg_coords(n, 16, seed);
        let q = lcg_tensor(n, 2, 2, 6, seed + 1);
        let k = lcg_tensor(n, 2, 1, 6, seed + 2);
        let v = lcg_tensor(n, 2, 1, 6, seed + 3);
        (config, q, k, v, coords)
    }

    #[test]
    fn config_validation() {
        assert!(SsaConfig::new(4, 8, 8, 2).validate().is_ok());
        assert!(SsaConfig::new(4, 4, 8, 2).validate().is_err());
        assert!(SsaConfig::new(4, 6, 8, 2).validate().is_err());
        assert!(SsaConfig::new(4, 8, 8, 0).validate().is_err());
        assert!(SsaConfig::new(0, 8, 8, 2).validate().is_err());
    }

    #[test]
    fn neutral_gates_average_branches() {
        let (config, q, k, v, coords) = small_setup(30, 100);
        let features = config.kv_heads * config.shared * config.dim;
        let proj = Projection::identity(config.dim);
        let gate = GateParams::neutral(features);
        let (out, state) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();
        for (i, &o) in out.data().iter().enumerate() {
            let want = 0.5
                * (state.cmp_result.output.data()[i]
                    + state.slc_result.output.data()[i]
                    + state.win_result.output.data()[i]);
            assert!((o - want).abs() < 1e-14);
        }
        for g in &state.gates {
            assert!((g - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_bias_extremes_isolate_branches() {
        let (config, q, k, v, coords) = small_setup(25, 200);
        let features = config.kv_heads * config.shared * config.dim;
        let proj = Projection::identity(config.dim);
        // Strongly positive window bias, strongly negative elsewhere: the
        // mix collapses onto the window branch.
        let mut gate = GateParams::neutral(features);
        gate.bias = [-60.0, -60.0, 60.0];
        let (out, state) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();
        for (a, b) in out.data().iter().zip(state.win_result.output.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_block_regime_reduces_to_dense() {
        // All tokens inside one selection block and one window block, top_k
        // covering everything: selection and window branches both equal
        // dense attention.
        let mut config = SsaConfig::new(4, 8, 8, 4);
        config.dim = 6;
        let coords = lcg_coords(14, 8, 7);
        let q = lcg_tensor(14, 1, 1, 6, 61);
        let k = lcg_tensor(14, 1, 1, 6, 62);
        let v = lcg_tensor(14, 1, 1, 6, 63);
        let proj = Projection::identity(6);
        let gate = GateParams::neutral(6);
        let (_, state) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();
        let dense = dense_attention(&q, &k, &v, config.scale_value()).unwrap();
        for (a, b) in state
            .slc_result
            .output
            .data()
            .iter()
            .zip(dense.output.data())
        {
            assert!((a - b).abs() <= 1e-10);
        }
        for (a, b) in state
            .win_result
            .output
            .data()
            .iter()
            .zip(dense.output.data())
        {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_invariant_under_input_permutation() {
        let (config, q, k, v, coords) = small_setup(40, 300);
        let proj = Projection::identity(config.dim);
        let gate = GateParams::neutral(config.kv_heads * config.shared * config.dim);
        let (base, _) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();

        // Reverse the token order and permute all inputs the same way.
        let n = coords.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |t: &HeadTensor<f64>| {
            let row = t.kv_heads() * t.shared() * t.dim();
            let mut data = Vec::with_capacity(t.data().len());
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * row..(p + 1) * row]);
            }
            HeadTensor::new(t.tokens(), t.kv_heads(), t.shared(), t.dim(), data).unwrap()
        };
        let coords_p: Vec<Coord> = perm.iter().map(|&p| coords[p]).collect();
        let (out_p, _) = ssa_forward(
            &config,
            &permute(&q),
            &permute(&k),
            &permute(&v),
            &coords_p,
            &proj,
            &proj,
            &gate,
        )
        .unwrap();
        let row = config.kv_heads * config.shared * config.dim;
        for (i, &p) in perm.iter().enumerate() {
            let a = &base.data()[p * row..(p + 1) * row];
            let b = &out_p.data()[i * row..(i + 1) * row];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    fn scalar_loss(out: &HeadTensor<f64>, weights: &[f64]) -> f64 {
        out.data().iter().zip(weights).map(|(&o, &w)| o * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut config, q, k, v, coords) = small_setup(22, 400);
        config.top_k = 1; // keep some blocks unselected so the sparse path is exercised
        let features = config.kv_heads * config.shared * config.dim;
        let proj = Projection::identity(config.dim);
        let mut gate = GateParams::neutral(features);
        // Non-trivial gate parameters.
        let mut state = 777u64;
        for w in gate.weight.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *w = ((state >> 24) % 1000) as f64 / 2000.0 - 0.25;
        }
        gate.bias = [0.1, -0.2, 0.3];

        let (out, fwd_state) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj, &proj, &gate).unwrap();
        let mut st = 31u64;
        let weights: Vec<f64> = (0..out.data().len())
            .map(|_| {
                st = st.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((st >> 22) % 2000) as f64 / 1000.0 - 1.0
            })
            .collect();
        let grad_out = HeadTensor::new(
            out.tokens(),
            out.kv_heads(),
            out.shared(),
            out.dim(),
            weights.clone(),
        )
        .unwrap();
        let grads = ssa_backward(
            &fwd_state, &q, &k, &v, &coords, &proj, &proj, &gate, &grad_out,
        )
        .unwrap();

        let eval = |q: &HeadTensor<f64>, k: &HeadTensor<f64>, v: &HeadTensor<f64>, gate: &GateParams<f64>| {
            let (o, _) = ssa_forward(&config, q, k, v, &coords, &proj, &proj, gate).unwrap();
            scalar_loss(&o, &weights)
        };
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom <= 1e-5,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };
        // Probe a spread of parameter indices for each input.
        for idx in (0..q.data().len()).step_by(29) {
            let mut qp = q.clone();
            qp.data_mut()[idx] += h;
            let mut qm = q.clone();
            qm.data_mut()[idx] -= h;
            check(grads.q.data()[idx], eval(&qp, &k, &v, &gate), eval(&qm, &k, &v, &gate), "q");
        }
        for idx in (0..k.data().len()).step_by(23) {
            let mut kp = k.clone();
            kp.data_mut()[idx] += h;
            let mut km = k.clone();
            km.data_mut()[idx] -= h;
            check(grads.k.data()[idx], eval(&q, &kp, &v, &gate), eval(&q, &km, &v, &gate), "k");
        }
        for idx in (0..v.data().len()).step_by(23) {
            let mut vp = v.clone();
            vp.data_mut()[idx] += h;
            let mut vm = v.clone();
            vm.data_mut()[idx] -= h;
            check(grads.v.data()[idx], eval(&q, &k, &vp, &gate), eval(&q, &k, &vm, &gate), "v");
        }
        for idx in (0..gate.weight.len()).step_by(13) {
            let mut gp = gate.clone();
            gp.weight[idx] += h;
            let mut gm = gate.clone();
            gm.weight[idx] -= h;
            check(
                grads.gate_weight[idx],
                eval(&q, &k, &v, &gp),
                eval(&q, &k, &v, &gm),
                "gate weight",
            );
        }
        for r in 0..3 {
            let mut gp = gate.clone();
            gp.bias[r] += h;
            let mut gm = gate.clone();
            gm.bias[r] -= h;
            check(
                grads.gate_bias[r],
                eval(&q, &k, &v, &gp),
                eval(&q, &k, &v, &gm),
                "gate bias",
            );
        }
    }

    #[test]
    fn backward_projection_gradients_match_finite_differences() {
        let (config, q, k, v, coords) = small_setup(18, 500);
        let d = config.dim;
        let features = config.kv_heads * config.shared * d;
        let gate = GateParams::neutral(features);
        let mut st = 909u64;
        let mut rand_proj = |seed_off: u64| {
            st = st.wrapping_add(seed_off);
            let w: Vec<f64> = (0..d * d)
                .map(|i| {
                    st = st.wrapping_mul(6364136223846793005).wrapping_add(1);
                    let noise = ((st >> 24) % 1000) as f64 / 5000.0 - 0.1;
                    if i % (d + 1) == 0 { 1.0 + noise } else { noise }
                })
                .collect();
            Projection::new(d, w).unwrap()
        };
        let proj_k = rand_proj(1);
        let proj_v = rand_proj(2);

        let (out, fwd_state) =
            ssa_forward(&config, &q, &k, &v, &coords, &proj_k, &proj_v, &gate).unwrap();
        let weights: Vec<f64> = (0..out.data().len())
            .map(|i| ((i * 2654435761) % 2000) as f64 / 1000.0 - 1.0)
            .collect();
        let grad_out = HeadTensor::new(
            out.tokens(),
            out.kv_heads(),
            out.shared(),
            out.dim(),
            weights.clone(),
        )
        .unwrap();
        let grads = ssa_backward(
            &fwd_state, &q, &k, &v, &coords, &proj_k, &proj_v, &gate, &grad_out,
        )
        .unwrap();

        let h = 1e-5;
        for idx in (0..d * d).step_by(3) {
            let mut wp = proj_k.weight().to_vec();
            wp[idx] += h;
            let pp = Projection::new(d, wp).unwrap();
            let mut wm = proj_k.weight().to_vec();
            wm[idx] -= h;
            let pm = Projection::new(d, wm).unwrap();
            let lp = {
                let (o, _) =
                    ssa_forward(&config, &q, &k, &v, &coords, &pp, &proj_v, &gate).unwrap();
                scalar_loss(&o, &weights)
            };
            let lm = {
                let (o, _) =
                    ssa_forward(&config, &q, &k, &v, &coords, &pm, &proj_v, &gate).unwrap();
                scalar_loss(&o, &weights)
            };
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grads.proj_k[idx];
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom <= 1e-5,
                "proj_k[{idx}]: analytic {analytic} vs fd {fd}"
            );
        }
        for idx in (1..d * d).step_by(4) {
            let mut wp = proj_v.weight().to_vec();
            wp[idx] += h;
            let pp = Projection::new(d, wp).unwrap();
            let mut wm = proj_v.weight().to_vec();
            wm[idx] -= h;
            let pm = Projection::new(d, wm).unwrap();
            let lp = {
                let (o, _) =
                    ssa_forward(&config, &q, &k, &v, &coords, &proj_k, &pp, &gate).unwrap();
                scalar_loss(&o, &weights)
            };
            let lm = {
                let (o, _) =
                    ssa_forward(&config, &q, &k, &v, &coords, &proj_k, &pm, &gate).unwrap();
                scalar_loss(&o, &weights)
            };
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grads.proj_v[idx];
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom <= 1e-5,
                "proj_v[{idx}]: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
