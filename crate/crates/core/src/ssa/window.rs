//! Local window attention: each token attends to exactly the tokens sharing
//! its window block. Every block is an independent dense attention problem.

use rayon::prelude::*;

use crate::attention::{
    dense_attention, dense_attention_backward, AttentionResult, HeadTensor,
};
use crate::partition::BlockPartition;
use crate::scalar::Scalar;

use super::SsaError;

fn gather_rows<S: Scalar>(src: &HeadTensor<S>, tokens: &[usize]) -> HeadTensor<S> {
    let row = src.kv_heads() * src.shared() * src.dim();
    let mut data = Vec::with_capacity(tokens.len() * row);
    for &t in tokens {
        data.extend_from_slice(&src.data()[t * row..(t + 1) * row]);
    }
    HeadTensor::new(tokens.len(), src.kv_heads(), src.shared(), src.dim(), data).unwrap()
}

fn check_partition<S: Scalar>(
    q: &HeadTensor<S>,
    partition: &BlockPartition,
) -> Result<(), SsaError> {
    if partition.num_tokens() != q.tokens() {
        return Err(SsaError::Shape("partition token count"));
    }
    Ok(())
}

/// Blockwise dense attention, outputs in original token order.
pub fn window_attention<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    partition: &BlockPartition,
    scale: S,
) -> Result<AttentionResult<S>, SsaError> {
    check_partition(q, partition)?;
    let (h_kv, h_s, d) = (q.kv_heads(), q.shared(), q.dim());
    let heads = h_kv * h_s;
    let per_block: Vec<AttentionResult<S>> = (0..partition.num_blocks())
        .into_par_iter()
        .map(|b| {
            let tokens = partition.block_tokens(b);
            dense_attention(
                &gather_rows(q, tokens),
                &gather_rows(k, tokens),
                &gather_rows(v, tokens),
                scale,
            )
        })
        .collect::<Result<_, _>>()?;

    let row = heads * d;
    let mut output = HeadTensor::zeros(q.tokens(), h_kv, h_s, d);
    let mut lse = vec![S::zero(); q.tokens() * heads];
    for (b, res) in per_block.iter().enumerate() {
        for (local, &t) in partition.block_tokens(b).iter().enumerate() {
            output.data_mut()[t * row..(t + 1) * row]
                .copy_from_slice(&res.output.data()[local * row..(local + 1) * row]);
            lse[t * heads..(t + 1) * heads]
                .copy_from_slice(&res.lse[local * heads..(local + 1) * heads]);
        }
    }
    Ok(AttentionResult { output, lse })
}

/// Backward of [`window_attention`] given the forward result.
pub fn window_attention_backward<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    partition: &BlockPartition,
    scale: S,
    result: &AttentionResult<S>,
    grad_output: &HeadTensor<S>,
) -> Result<(HeadTensor<S>, HeadTensor<S>, HeadTensor<S>), SsaError> {
    check_partition(q, partition)?;
    let (h_kv, h_s, d) = (q.kv_heads(), q.shared(), q.dim());
    let heads = h_kv * h_s;
    if result.lse.len() != q.tokens() * heads {
        return Err(SsaError::StateMismatch("forward result size"));
    }
    let per_block: Vec<(HeadTensor<S>, HeadTensor<S>, HeadTensor<S>)> = (0..partition
        .num_blocks())
        .into_par_iter()
        .map(|b| {
            let tokens = partition.block_tokens(b);
            let heads_row = heads;
            let mut lse = Vec::with_capacity(tokens.len() * heads_row);
            for &t in tokens {
                lse.extend_from_slice(&result.lse[t * heads_row..(t + 1) * heads_row]);
            }
            let block_result = AttentionResult {
                output: gather_rows(&result.output, tokens),
                lse,
            };
            dense_attention_backward(
                &gather_rows(q, tokens),
                &gather_rows(k, tokens),
                &gather_rows(v, tokens),
                scale,
                &block_result,
                &gather_rows(grad_output, tokens),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut grad_q = HeadTensor::zeros(q.tokens(), h_kv, h_s, d);
    let mut grad_k = HeadTensor::zeros(k.tokens(), h_kv, 1, d);
    let mut grad_v = HeadTensor::zeros(v.tokens(), h_kv, 1, d);
    let q_row = heads * d;
    let kv_row = h_kv * d;
    for (b, (gq, gk, gv)) in per_block.iter().enumerate() {
        for (local, &t) in partition.block_tokens(b).iter().enumerate() {
            grad_q.data_mut()[t * q_row..(t + 1) * q_row]
                .copy_from_slice(&gq.data()[local * q_row..(local + 1) * q_row]);
            grad_k.data_mut()[t * kv_row..(t + 1) * kv_row]
                .copy_from_slice(&gk.data()[local * kv_row..(local + 1) * kv_row]);
            grad_v.data_mut()[t * kv_row..(t + 1) * kv_row]
                .copy_from_slice(&gv.data()[local * kv_row..(local + 1) * kv_row]);
        }
    }
    Ok((grad_q, grad_k, grad_v))
}
