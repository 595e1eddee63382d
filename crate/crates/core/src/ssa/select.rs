//! Blockwise selection: compression-attention scores, grouped-query score
//! aggregation onto selection blocks, top-k block choice, and the streamed
//! selection attention over exactly the chosen blocks' tokens.

use rayon::prelude::*;

use crate::attention::{dense_attention_with_probs, AttentionResult, HeadTensor};
use crate::partition::{BlockHierarchy, BlockPartition};
use crate::scalar::Scalar;

use super::compress::CompressedTokens;
use super::SsaError;

/// Per-(token, kv-head) choice of selection blocks with the scores backing it.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionIndex<S> {
    pub n_tokens: usize,
    pub kv_heads: usize,
    /// Effective selection count: `min(T, N_b)`.
    pub top_k: usize,
    /// Requested T before clamping.
    pub requested_top_k: usize,
    /// `n_tokens x kv_heads x top_k` block indices, ascending per slot.
    pub indices: Vec<u32>,
    /// Scores of the selected blocks, aligned with `indices`.
    pub scores: Vec<S>,
}

impl<S> SelectionIndex<S> {
    #[inline]
    pub fn slot(&self, t: usize, g: usize) -> &[u32] {
        let start = (t * self.kv_heads + g) * self.top_k;
        &self.indices[start..start + self.top_k]
    }
}

/// Dense attention of each query over the compressed block tokens; exports
/// the post-softmax probability rows used as the compression scores.
pub fn compression_attention<S: Scalar>(
    q: &HeadTensor<S>,
    compressed_keys: &CompressedTokens<S>,
    compressed_values: &CompressedTokens<S>,
    scale: S,
) -> Result<(AttentionResult<S>, Vec<S>), SsaError> {
    if compressed_keys.block_coords != compressed_values.block_coords {
        return Err(SsaError::Shape("compressed key/value block mismatch"));
    }
    let (result, probs) = dense_attention_with_probs(
        q,
        &compressed_keys.tokens,
        &compressed_values.tokens,
        scale,
    )?;
    Ok((result, probs))
}

/// Aggregate compression probabilities onto selection blocks, summing over
/// the shared query heads of each group and over the compression blocks
/// inside each selection block.
pub fn selection_scores<S: Scalar>(
    probs: &[S],
    n_tokens: usize,
    kv_heads: usize,
    shared: usize,
    hierarchy: &BlockHierarchy,
) -> Result<Vec<S>, SsaError> {
    let n_cmp = hierarchy.cmp.num_blocks();
    let n_slc = hierarchy.slc.num_blocks();
    let heads = kv_heads * shared;
    if probs.len() != n_tokens * heads * n_cmp {
        return Err(SsaError::Shape("probability row length"));
    }
    let mut scores = vec![S::zero(); n_tokens * kv_heads * n_slc];
    for t in 0..n_tokens {
        for g in 0..kv_heads {
            let out = &mut scores[(t * kv_heads + g) * n_slc..(t * kv_heads + g + 1) * n_slc];
            for s in 0..shared {
                let h = g * shared + s;
                let row = &probs[(t * heads + h) * n_cmp..(t * heads + h + 1) * n_cmp];
                for (i, &p) in row.iter().enumerate() {
                    out[hierarchy.cmp_to_slc[i]] += p;
                }
            }
        }
    }
    Ok(scores)
}

/// Top-k selection block indices per (token, kv-head). Ties break toward the
/// lower block index; T clamps to the number of blocks.
pub fn topk_blocks<S: Scalar>(
    scores: &[S],
    n_tokens: usize,
    kv_heads: usize,
    n_slc: usize,
    requested_top_k: usize,
) -> Result<SelectionIndex<S>, SsaError> {
    if requested_top_k == 0 {
        return Err(SsaError::Shape("top_k must be >= 1"));
    }
    if scores.len() != n_tokens * kv_heads * n_slc {
        return Err(SsaError::Shape("score row length"));
    }
    let top_k = requested_top_k.min(n_slc);
    let mut indices = vec![0u32; n_tokens * kv_heads * top_k];
    let mut sel_scores = vec![S::zero(); n_tokens * kv_heads * top_k];
    indices
        .par_chunks_mut(top_k)
        .zip(sel_scores.par_chunks_mut(top_k))
        .enumerate()
        .for_each(|(row, (idx_out, score_out))| {
            let row_scores = &scores[row * n_slc..(row + 1) * n_slc];
            let mut order: Vec<u32> = (0..n_slc as u32).collect();
            // Descending score, ascending index on ties.
            order.sort_unstable_by(|&a, &b| {
                row_scores[b as usize]
                    .partial_cmp(&row_scores[a as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut chosen: Vec<u32> = order[..top_k].to_vec();
            chosen.sort_unstable();
            for (slot, &b) in chosen.iter().enumerate() {
                idx_out[slot] = b;
                score_out[slot] = row_scores[b as usize];
            }
        });
    Ok(SelectionIndex {
        n_tokens,
        kv_heads,
        top_k,
        requested_top_k,
        indices,
        scores: sel_scores,
    })
}

fn gather_sorted<S: Scalar>(kv: &HeadTensor<S>, partition: &BlockPartition) -> HeadTensor<S> {
    let (h_kv, d) = (kv.kv_heads(), kv.dim());
    let mut sorted = HeadTensor::zeros(kv.tokens(), h_kv, 1, d);
    let w = h_kv * d;
    for (pos, &orig) in partition.token_perm().iter().enumerate() {
        sorted.data_mut()[pos * w..(pos + 1) * w].copy_from_slice(kv.token_rows(orig));
    }
    sorted
}

fn check_selection_inputs<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    index: &SelectionIndex<S>,
    partition: &BlockPartition,
    tile: usize,
) -> Result<(), SsaError> {
    if k.shared() != 1 || v.shared() != 1 || k.tokens() != v.tokens() {
        return Err(SsaError::Shape("k/v layout"));
    }
    if q.kv_heads() != k.kv_heads() || q.dim() != k.dim() {
        return Err(SsaError::Shape("q/k layout"));
    }
    if index.n_tokens != q.tokens() || index.kv_heads != q.kv_heads() {
        return Err(SsaError::Shape("selection index shape"));
    }
    if partition.num_tokens() != k.tokens() {
        return Err(SsaError::Shape("partition token count"));
    }
    if tile == 0 {
        return Err(SsaError::Shape("tile size must be >= 1"));
    }
    let n_b = partition.num_blocks() as u32;
    if let Some(&bad) = index.indices.iter().find(|&&b| b >= n_b) {
        return Err(SsaError::BlockIndexOutOfRange {
            block: bad,
            num_blocks: n_b as usize,
        });
    }
    Ok(())
}

/// Streamed attention of each query over exactly the tokens of its selected
/// blocks, block by block with an online softmax over inner tiles of `tile`
/// keys. Returns output and logsumexp in original token order.
pub fn selection_attention_forward<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    index: &SelectionIndex<S>,
    partition: &BlockPartition,
    scale: S,
    tile: usize,
) -> Result<AttentionResult<S>, SsaError> {
    check_selection_inputs(q, k, v, index, partition, tile)?;
    let (h_kv, h_s, d) = (q.kv_heads(), q.shared(), q.dim());
    let heads = h_kv * h_s;
    let n_q = q.tokens();
    let k_sorted = gather_sorted(k, partition);
    let v_sorted = gather_sorted(v, partition);
    let offsets = partition.offsets();

    let mut output = HeadTensor::zeros(n_q, h_kv, h_s, d);
    let mut lse = vec![S::zero(); n_q * heads];
    output
        .data_mut()
        .par_chunks_mut(heads * d)
        .zip(lse.par_chunks_mut(heads))
        .enumerate()
        .for_each(|(t, (o_row, l_row))| {
            let mut logits = vec![S::zero(); tile];
            for g in 0..h_kv {
                for s in 0..h_s {
                    let h = g * h_s + s;
                    let q_row = q.row(t, h);
                    let acc = &mut o_row[h * d..(h + 1) * d];
                    let mut m = S::neg_infinity();
                    let mut l = S::neg_infinity();
                    for &b in index.slot(t, g) {
                        let (b_s, b_e) = (offsets[b as usize], offsets[b as usize + 1]);
                        let mut start = b_s;
                        while start < b_e {
                            let end = (start + tile).min(b_e);
                            let mut tile_max = S::neg_infinity();
                            for (idx, j) in (start..end).enumerate() {
                                let sc = scale
                                    * q_row
                                        .iter()
                                        .zip(k_sorted.row(j, g))
                                        .map(|(&a, &b)| a * b)
                                        .sum::<S>();
                                logits[idx] = sc;
                                tile_max = tile_max.max(sc);
                            }
                            let m_new = m.max(tile_max);
                            let rescale = if m.is_finite() {
                                (m - m_new).exp()
                            } else {
                                S::zero()
                            };
                            for c in 0..d {
                                acc[c] = acc[c] * rescale;
                            }
                            let mut row_sum = S::zero();
                            for (idx, j) in (start..end).enumerate() {
                                let p = (logits[idx] - m_new).exp();
                                row_sum += p;
                                let v_row = v_sorted.row(j, g);
                                for c in 0..d {
                                    acc[c] += p * v_row[c];
                                }
                            }
                            let carried = if l.is_finite() {
                                (l - m_new).exp()
                            } else {
                                S::zero()
                            };
                            l = m_new + (carried + row_sum).ln();
                            m = m_new;
                            start = end;
                        }
                    }
                    let norm = (m - l).exp();
                    for c in 0..d {
                        acc[c] = acc[c] * norm;
                    }
                    l_row[h] = l;
                }
            }
        });
    Ok(AttentionResult { output, lse })
}

/// Exact gradients of [`selection_attention_forward`] with the selection
/// indices held constant. Tokens outside every selected block of a
/// (token, head) pair receive no contribution from it; probabilities are
/// recomputed blockwise from the stored logsumexp.
pub fn selection_attention_backward<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    index: &SelectionIndex<S>,
    partition: &BlockPartition,
    scale: S,
    result: &AttentionResult<S>,
    grad_output: &HeadTensor<S>,
) -> Result<(HeadTensor<S>, HeadTensor<S>, HeadTensor<S>), SsaError> {
    check_selection_inputs(q, k, v, index, partition, 1)?;
    let (h_kv, h_s, d) = (q.kv_heads(), q.shared(), q.dim());
    let heads = h_kv * h_s;
    let n_q = q.tokens();
    if result.lse.len() != n_q * heads || result.output.tokens() != n_q {
        return Err(SsaError::StateMismatch("result shape"));
    }
    if grad_output.tokens() != n_q || grad_output.heads() != heads || grad_output.dim() != d {
        return Err(SsaError::Shape("grad_output shape"));
    }
    let k_sorted = gather_sorted(k, partition);
    let v_sorted = gather_sorted(v, partition);
    let offsets = partition.offsets();
    let n_b = partition.num_blocks();

    let delta: Vec<S> = (0..n_q * heads)
        .map(|i| {
            let (t, h) = (i / heads, i % heads);
            grad_output
                .row(t, h)
                .iter()
                .zip(result.output.row(t, h))
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();

    // Query gradient: stream over the selected blocks again.
    let mut grad_q = HeadTensor::zeros(n_q, h_kv, h_s, d);
    grad_q
        .data_mut()
        .par_chunks_mut(heads * d)
        .enumerate()
        .for_each(|(t, gq_row)| {
            for g in 0..h_kv {
                for s in 0..h_s {
                    let h = g * h_s + s;
                    let q_row = q.row(t, h);
                    let go = grad_output.row(t, h);
                    let l = result.lse[t * heads + h];
                    let dl = delta[t * heads + h];
                    let gq = &mut gq_row[h * d..(h + 1) * d];
                    for &b in index.slot(t, g) {
                        for j in offsets[b as usize]..offsets[b as usize + 1] {
                            let k_row = k_sorted.row(j, g);
                            let logit = scale
                                * q_row.iter().zip(k_row).map(|(&a, &b)| a * b).sum::<S>();
                            let p = (logit - l).exp();
                            let pv: S = go
                                .iter()
                                .zip(v_sorted.row(j, g))
                                .map(|(&a, &b)| a * b)
                                .sum();
                            let w = scale * p * (pv - dl);
                            for c in 0..d {
                                gq[c] += w * k_row[c];
                            }
                        }
                    }
                }
            }
        });

    // Reverse index: per (kv-head, block), the queries that selected it,
    // ascending so accumulation order is deterministic.
    let mut selectors: Vec<Vec<u32>> = vec![Vec::new(); h_kv * n_b];
    for t in 0..n_q {
        for g in 0..h_kv {
            for &b in index.slot(t, g) {
                selectors[g * n_b + b as usize].push(t as u32);
            }
        }
    }

    // Key/value gradients in sorted space, one block per work item.
    let mut gk_sorted = vec![S::zero(); k.tokens() * h_kv * d];
    let mut gv_sorted = vec![S::zero(); k.tokens() * h_kv * d];
    {
        let block_of_pos: Vec<usize> = {
            let mut map = vec![0usize; k.tokens()];
            for b in 0..n_b {
                for pos in offsets[b]..offsets[b + 1] {
                    map[pos] = b;
                }
            }
            map
        };
        let w = h_kv * d;
        gk_sorted
            .par_chunks_mut(w)
            .zip(gv_sorted.par_chunks_mut(w))
            .enumerate()
            .for_each(|(pos, (gk_row, gv_row))| {
                let b = block_of_pos[pos];
                for g in 0..h_kv {
                    let k_row = k_sorted.row(pos, g);
                    let v_row = v_sorted.row(pos, g);
                    let gk = &mut gk_row[g * d..(g + 1) * d];
                    let gv = &mut gv_row[g * d..(g + 1) * d];
                    for &t in &selectors[g * n_b + b] {
                        let t = t as usize;
                        for s in 0..h_s {
                            let h = g * h_s + s;
                            let q_row = q.row(t, h);
                            let go = grad_output.row(t, h);
                            let logit = scale
                                * q_row.iter().zip(k_row).map(|(&a, &b)| a * b).sum::<S>();
                            let p = (logit - result.lse[t * heads + h]).exp();
                            let pv: S =
                                go.iter().zip(v_row).map(|(&a, &b)| a * b).sum();
                            let wq = scale * p * (pv - delta[t * heads + h]);
                            for c in 0..d {
                                gk[c] += wq * q_row[c];
                                gv[c] += p * go[c];
                            }
                        }
                    }
                }
            });
    }

    // Scatter back to original token order.
    let mut grad_k = HeadTensor::zeros(k.tokens(), h_kv, 1, d);
    let mut grad_v = HeadTensor::zeros(k.tokens(), h_kv, 1, d);
    let w = h_kv * d;
    for (pos, &orig) in partition.token_perm().iter().enumerate() {
        grad_k.data_mut()[orig * w..(orig + 1) * w].copy_from_slice(&gk_sorted[pos * w..(pos + 1) * w]);
        grad_v.data_mut()[orig * w..(orig + 1) * w].copy_from_slice(&gv_sorted[pos * w..(pos + 1) * w]);
    }
    Ok((grad_q, grad_k, grad_v))
}

/// Fused compression attention + score aggregation + top-k. Produces the same
/// results as composing [`compression_attention`], [`selection_scores`] and
/// [`topk_blocks`], without materializing the `N x heads x N_cmp`
/// probability matrix.
pub fn compression_attention_with_selection<S: Scalar>(
    q: &HeadTensor<S>,
    compressed_keys: &CompressedTokens<S>,
    compressed_values: &CompressedTokens<S>,
    hierarchy: &BlockHierarchy,
    scale: S,
    requested_top_k: usize,
) -> Result<(AttentionResult<S>, SelectionIndex<S>), SsaError> {
    if requested_top_k == 0 {
        return Err(SsaError::Shape("top_k must be >= 1"));
    }
    if compressed_keys.block_coords != compressed_values.block_coords {
        return Err(SsaError::Shape("compressed key/value block mismatch"));
    }
    let ck = &compressed_keys.tokens;
    let cv = &compressed_values.tokens;
    if q.kv_heads() != ck.kv_heads() || q.dim() != ck.dim() {
        return Err(SsaError::Shape("q/compressed layout"));
    }
    let n_cmp = hierarchy.cmp.num_blocks();
    let n_slc = hierarchy.slc.num_blocks();
    if ck.tokens() != n_cmp {
        return Err(SsaError::Shape("compressed block count"));
    }
    let (h_kv, h_s, d) = (q.kv_heads(), q.shared(), q.dim());
    let heads = h_kv * h_s;
    let n_q = q.tokens();
    let top_k = requested_top_k.min(n_slc);

    let mut output = HeadTensor::zeros(n_q, h_kv, h_s, d);
    let mut lse = vec![S::zero(); n_q * heads];
    let mut indices = vec![0u32; n_q * h_kv * top_k];
    let mut sel_scores = vec![S::zero(); n_q * h_kv * top_k];

    // Queries are processed in small groups with the key/value loops tiled,
    // so the compressed tensors are reused from cache across the group
    // instead of being streamed once per query. The per-query summation
    // order over blocks is unchanged, so results are identical to the
    // one-query-at-a-time formulation.
    const GROUP: usize = 8;
    const KEY_TILE: usize = 512;

    output
        .data_mut()
        .par_chunks_mut(GROUP * heads * d)
        .zip(lse.par_chunks_mut(GROUP * heads))
        .zip(indices.par_chunks_mut(GROUP * h_kv * top_k))
        .zip(sel_scores.par_chunks_mut(GROUP * h_kv * top_k))
        .enumerate()
        .for_each(|(chunk, (((o_chunk, l_chunk), idx_chunk), score_chunk))| {
            let t0 = chunk * GROUP;
            let count = o_chunk.len() / (heads * d);
            let rows = count * h_s;
            let mut probs = vec![S::zero(); rows * n_cmp];
            let mut maxes = vec![S::neg_infinity(); rows];
            let mut denoms = vec![S::zero(); rows];
            let mut slc = vec![S::zero(); n_slc];
            for g in 0..h_kv {
                // Logits, key-tile outer so each tile stays hot across rows.
                for j0 in (0..n_cmp).step_by(KEY_TILE) {
                    let j1 = (j0 + KEY_TILE).min(n_cmp);
                    for lt in 0..count {
                        for s in 0..h_s {
                            let q_row = q.row(t0 + lt, g * h_s + s);
                            let row = &mut probs[(lt * h_s + s) * n_cmp..][..n_cmp];
                            for j in j0..j1 {
                                row[j] = scale
                                    * q_row
                                        .iter()
                                        .zip(ck.row(j, g))
                                        .map(|(&a, &b)| a * b)
                                        .sum::<S>();
                            }
                        }
                    }
                }
                for r in 0..rows {
                    let row = &probs[r * n_cmp..(r + 1) * n_cmp];
                    maxes[r] = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
                    denoms[r] = S::zero();
                }
                // Softmax accumulation, value-tile outer; per row the blocks
                // are still visited in ascending order.
                for j0 in (0..n_cmp).step_by(KEY_TILE) {
                    let j1 = (j0 + KEY_TILE).min(n_cmp);
                    for lt in 0..count {
                        for s in 0..h_s {
                            let r = lt * h_s + s;
                            let h = g * h_s + s;
                            let m = maxes[r];
                            let row = &mut probs[r * n_cmp..][..n_cmp];
                            let acc = &mut o_chunk[(lt * heads + h) * d..][..d];
                            let mut denom = denoms[r];
                            for j in j0..j1 {
                                let p = (row[j] - m).exp();
                                denom += p;
                                let v_row = cv.row(j, g);
                                for c in 0..d {
                                    acc[c] += p * v_row[c];
                                }
                                row[j] = p;
                            }
                            denoms[r] = denom;
                        }
                    }
                }
                for lt in 0..count {
                    for s in 0..h_s {
                        let r = lt * h_s + s;
                        let h = g * h_s + s;
                        let (m, denom) = (maxes[r], denoms[r]);
                        let l = m + denom.ln();
                        l_chunk[lt * heads + h] = l;
                        let norm = (m - l).exp();
                        let acc = &mut o_chunk[(lt * heads + h) * d..][..d];
                        for c in 0..d {
                            acc[c] = acc[c] * norm;
                        }
                        let row = &mut probs[r * n_cmp..][..n_cmp];
                        for j in 0..n_cmp {
                            row[j] = row[j] / denom;
                        }
                    }
                }
                // Same summation order as selection_scores: shared head
                // outer, compression block inner.
                for lt in 0..count {
                    slc.iter_mut().for_each(|x| *x = S::zero());
                    for s in 0..h_s {
                        let row = &probs[(lt * h_s + s) * n_cmp..][..n_cmp];
                        for (i, &p) in row.iter().enumerate() {
                            slc[hierarchy.cmp_to_slc[i]] += p;
                        }
                    }
                    let by_score_then_index = |a: &u32, b: &u32| {
                        slc[*b as usize]
                            .partial_cmp(&slc[*a as usize])
                            .unwrap()
                            .then(a.cmp(b))
                    };
                    let mut order: Vec<u32> = (0..n_slc as u32).collect();
                    if top_k < n_slc {
                        order.select_nth_unstable_by(top_k - 1, by_score_then_index);
                    }
                    let chosen = &mut order[..top_k];
                    chosen.sort_unstable();
                    let idx_row = &mut idx_chunk[(lt * h_kv + g) * top_k..][..top_k];
                    let score_row = &mut score_chunk[(lt * h_kv + g) * top_k..][..top_k];
                    for (slot, &b) in chosen.iter().enumerate() {
                        idx_row[slot] = b;
                        score_row[slot] = slc[b as usize];
                    }
                }
            }
        });

    Ok((
        AttentionResult { output, lse },
        SelectionIndex {
            n_tokens: n_q,
            kv_heads: h_kv,
            top_k,
            requested_top_k,
            indices,
            scores: sel_scores,
        },
    ))
}
