//! Block compression: per compression block, add intra-block positional
//! encoding to each member token, apply a fixed linear projection, and
//! mean-pool into one summary token per kv-head.
//!
//! The projection stands in for the learned map of the compression module;
//! it is caller-supplied (identity by default) and swappable.

use rayon::prelude::*;

use crate::attention::HeadTensor;
use crate::partition::BlockPartition;
use crate::scalar::Scalar;
use crate::Coord;

use super::pe::sinusoidal_encoding;
use super::{PeSpec, SsaError};

/// Square `dim x dim` linear map applied per head row, `out = W * in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<S> {
    dim: usize,
    weight: Vec<S>,
}

impl<S: Scalar> Projection<S> {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![S::zero(); dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = S::one();
        }
        Self { dim, weight }
    }

    pub fn new(dim: usize, weight: Vec<S>) -> Result<Self, SsaError> {
        if weight.len() != dim * dim {
            return Err(SsaError::BadProjection {
                dim,
                got: weight.len(),
            });
        }
        Ok(Self { dim, weight })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[S] {
        &self.weight
    }

    #[inline]
    pub fn apply(&self, input: &[S], out: &mut [S]) {
        for r in 0..self.dim {
            let row = &self.weight[r * self.dim..(r + 1) * self.dim];
            out[r] = row.iter().zip(input).map(|(&w, &x)| w * x).sum();
        }
    }

    /// `grad_in += W^T grad_out` and `grad_w += grad_out (X) input`.
    #[inline]
    fn backward(&self, input: &[S], grad_out: &[S], grad_in: &mut [S], grad_w: &mut [S]) {
        for r in 0..self.dim {
            let g = grad_out[r];
            let row = &self.weight[r * self.dim..(r + 1) * self.dim];
            let gw_row = &mut grad_w[r * self.dim..(r + 1) * self.dim];
            for c in 0..self.dim {
                grad_in[c] += row[c] * g;
                gw_row[c] += g * input[c];
            }
        }
    }
}

/// One compressed token per non-empty compression block, per kv-head.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTokens<S> {
    pub block_coords: Vec<Coord>,
    /// `num_blocks x kv_heads x dim`.
    pub tokens: HeadTensor<S>,
    pub pool_counts: Vec<usize>,
}

/// Intra-block relative coordinate of a token (`coord mod m`).
#[inline]
fn relative_coord(coord: Coord, m: u32) -> Coord {
    coord.map(|c| c % m)
}

fn member_feature<S: Scalar>(
    tokens: &HeadTensor<S>,
    token: usize,
    head: usize,
    coord: Coord,
    m: u32,
    pe: &PeSpec,
    scratch: &mut [S],
) -> Result<(), SsaError> {
    let d = tokens.dim();
    scratch[..d].copy_from_slice(tokens.row(token, head));
    if pe.enabled {
        let mut enc = vec![S::zero(); d];
        sinusoidal_encoding(&relative_coord(coord, m), d, pe.base, &mut enc)?;
        for c in 0..d {
            scratch[c] += enc[c];
        }
    }
    Ok(())
}

/// Compress one kv tensor (keys or values) over the blocks of `partition`.
pub fn compress_tokens<S: Scalar>(
    tokens: &HeadTensor<S>,
    coords: &[Coord],
    partition: &BlockPartition,
    projection: &Projection<S>,
    pe: &PeSpec,
) -> Result<CompressedTokens<S>, SsaError> {
    if tokens.shared() != 1 {
        return Err(SsaError::Shape("compressed tokens must have shared = 1"));
    }
    if tokens.tokens() != coords.len() || partition.num_tokens() != coords.len() {
        return Err(SsaError::Shape("partition/token mismatch"));
    }
    if projection.dim() != tokens.dim() {
        return Err(SsaError::Shape("projection dim"));
    }
    if pe.enabled {
        // Fail early on indivisible widths.
        let mut probe = vec![S::zero(); tokens.dim()];
        sinusoidal_encoding(&[0, 0, 0], tokens.dim(), pe.base, &mut probe)?;
    }
    let n_b = partition.num_blocks();
    let h_kv = tokens.kv_heads();
    let d = tokens.dim();
    let m = partition.block_size();
    let mut out = HeadTensor::zeros(n_b, h_kv, 1, d);
    out.data_mut()
        .par_chunks_mut(h_kv * d)
        .enumerate()
        .for_each(|(b, block_row)| {
            let members = partition.block_tokens(b);
            let inv = S::from_f64_lossy(1.0 / members.len() as f64);
            let mut feat = vec![S::zero(); d];
            let mut proj = vec![S::zero(); d];
            for g in 0..h_kv {
                let acc = &mut block_row[g * d..(g + 1) * d];
                for &t in members {
                    member_feature(tokens, t, g, coords[t], m, pe, &mut feat)
                        .expect("validated above");
                    projection.apply(&feat, &mut proj);
                    for c in 0..d {
                        acc[c] += proj[c];
                    }
                }
                for c in 0..d {
                    acc[c] = acc[c] * inv;
                }
            }
        });
    Ok(CompressedTokens {
        block_coords: partition.block_coords().to_vec(),
        tokens: out,
        pool_counts: (0..n_b).map(|b| partition.block_range(b).len()).collect(),
    })
}

/// Backward of [`compress_tokens`]: distributes the mean-pool gradient to the
/// members, through the projection. Returns `(grad_tokens, grad_projection)`.
pub fn compress_tokens_backward<S: Scalar>(
    tokens: &HeadTensor<S>,
    coords: &[Coord],
    partition: &BlockPartition,
    projection: &Projection<S>,
    pe: &PeSpec,
    grad_compressed: &HeadTensor<S>,
) -> Result<(HeadTensor<S>, Vec<S>), SsaError> {
    let n_b = partition.num_blocks();
    if grad_compressed.tokens() != n_b
        || grad_compressed.kv_heads() != tokens.kv_heads()
        || grad_compressed.dim() != tokens.dim()
    {
        return Err(SsaError::Shape("grad_compressed shape"));
    }
    let h_kv = tokens.kv_heads();
    let d = tokens.dim();
    let m = partition.block_size();
    let mut grad_tokens = HeadTensor::zeros(tokens.tokens(), h_kv, 1, d);
    let mut grad_w = vec![S::zero(); d * d];
    let mut feat = vec![S::zero(); d];
    let mut grad_out = vec![S::zero(); d];
    for b in 0..n_b {
        let members = partition.block_tokens(b).to_vec();
        let inv = S::from_f64_lossy(1.0 / members.len() as f64);
        for g in 0..h_kv {
            for c in 0..d {
                grad_out[c] = grad_compressed.row(b, g)[c] * inv;
            }
            for &t in &members {
                member_feature(tokens, t, g, coords[t], m, pe, &mut feat)?;
                let grad_in = grad_tokens.row_mut(t, g);
                projection.backward(&feat, &grad_out, grad_in, &mut grad_w);
            }
        }
    }
    Ok((grad_tokens, grad_w))
}
