//! Dense attention oracle with grouped-query head layout, a tiled
//! online-softmax variant, and the exact backward pass.
//!
//! Query head `(g, s)` attends the keys/values of kv-head `g`; query tensors
//! carry `h_kv * h_s` heads, key/value tensors carry `h_kv` heads. Both the
//! dense and tiled paths return the per-(token, head) logsumexp so the
//! backward pass can recompute probabilities without storing the full score
//! matrix.

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("tensor dimensions must be positive")]
    EmptyTensor,
    #[error("data length {got} does not match tokens*heads*dim = {expected}")]
    BadDataLength { expected: usize, got: usize },
    #[error("non-finite entry at linear index {0}")]
    NonFinite(usize),
    #[error("tile size must be >= 1")]
    BadTile,
    #[error("stale result: {0}")]
    StaleResult(&'static str),
}

/// Token features split per attention head: `tokens x (kv_heads*shared) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<S> {
    tokens: usize,
    kv_heads: usize,
    shared: usize,
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> HeadTensor<S> {
    pub fn new(
        tokens: usize,
        kv_heads: usize,
        shared: usize,
        dim: usize,
        data: Vec<S>,
    ) -> Result<Self, AttentionError> {
        if tokens == 0 || kv_heads == 0 || shared == 0 || dim == 0 {
            return Err(AttentionError::EmptyTensor);
        }
        let expected = tokens * kv_heads * shared * dim;
        if data.len() != expected {
            return Err(AttentionError::BadDataLength {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite(i));
        }
        Ok(Self {
            tokens,
            kv_heads,
            shared,
            dim,
            data,
        })
    }

    pub fn zeros(tokens: usize, kv_heads: usize, shared: usize, dim: usize) -> Self {
        Self {
            tokens,
            kv_heads,
            shared,
            dim,
            data: vec![S::zero(); tokens * kv_heads * shared * dim],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn shared(&self) -> usize {
        self.shared
    }

    pub fn heads(&self) -> usize {
        self.kv_heads * self.shared
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, token: usize, head: usize) -> &[S] {
        let start = (token * self.heads() + head) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, token: usize, head: usize) -> &mut [S] {
        let heads = self.heads();
        let start = (token * heads + head) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// All head rows of one token, flattened to `heads*dim`.
    #[inline]
    pub fn token_rows(&self, token: usize) -> &[S] {
        let w = self.heads() * self.dim;
        &self.data[token * w..(token + 1) * w]
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> HeadTensor<T> {
        HeadTensor {
            tokens: self.tokens,
            kv_heads: self.kv_heads,
            shared: self.shared,
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Attention output plus the per-(token, head) logsumexp needed by backward.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<S> {
    pub output: HeadTensor<S>,
    /// `tokens x heads`, `lse[t*heads + h] = log sum_j exp(scale * q_t . k_j)`.
    pub lse: Vec<S>,
}

pub fn default_scale<S: Scalar>(dim: usize) -> S {
    S::one() / S::from_f64_lossy((dim as f64).sqrt())
}

fn check_qkv<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
) -> Result<(), AttentionError> {
    if k.shared != 1 || v.shared != 1 {
        return Err(AttentionError::ShapeMismatch("k/v must have shared = 1"));
    }
    if q.kv_heads != k.kv_heads || q.kv_heads != v.kv_heads {
        return Err(AttentionError::ShapeMismatch("kv head count"));
    }
    if q.dim != k.dim || q.dim != v.dim {
        return Err(AttentionError::ShapeMismatch("head dim"));
    }
    if k.tokens != v.tokens {
        return Err(AttentionError::ShapeMismatch("key/value token count"));
    }
    Ok(())
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Per-token dense attention kernel: fills the output row, the lse row, and
/// (when given) the normalized probability row for token `t`.
fn dense_row<S: Scalar>(
    t: usize,
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    scale: S,
    o_row: &mut [S],
    l_row: &mut [S],
    mut p_row: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let n_k = k.tokens;
    let (h_kv, h_s, d) = (q.kv_heads, q.shared, q.dim);
    scratch.resize(n_k, S::zero());
    for g in 0..h_kv {
        for s in 0..h_s {
            let h = g * h_s + s;
            let q_row = q.row(t, h);
            for j in 0..n_k {
                scratch[j] = scale * dot(q_row, k.row(j, g));
            }
            let m = scratch.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
            let acc = &mut o_row[h * d..(h + 1) * d];
            let mut denom = S::zero();
            for j in 0..n_k {
                let p = (scratch[j] - m).exp();
                denom += p;
                let v_row = v.row(j, g);
                for c in 0..d {
                    acc[c] += p * v_row[c];
                }
                scratch[j] = p;
            }
            let l = m + denom.ln();
            l_row[h] = l;
            let norm = (m - l).exp();
            for c in 0..d {
                acc[c] = acc[c] * norm;
            }
            if let Some(pr) = p_row.as_deref_mut() {
                let row = &mut pr[h * n_k..(h + 1) * n_k];
                for j in 0..n_k {
                    row[j] = scratch[j] / denom;
                }
            }
        }
    }
}

/// Full attention of every query over all keys (Grouped-Query layout).
/// This is the oracle everything else is checked against.
pub fn dense_attention<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    scale: S,
) -> Result<AttentionResult<S>, AttentionError> {
    check_qkv(q, k, v)?;
    let (h_kv, h_s, d) = (q.kv_heads, q.shared, q.dim);
    let heads = h_kv * h_s;
    let mut output = HeadTensor::zeros(q.tokens, h_kv, h_s, d);
    let mut lse = vec![S::zero(); q.tokens * heads];
    output
        .data
        .par_chunks_mut(heads * d)
        .zip(lse.par_chunks_mut(heads))
        .enumerate()
        .for_each(|(t, (o_row, l_row))| {
            let mut scratch = Vec::new();
            dense_row(t, q, k, v, scale, o_row, l_row, None, &mut scratch);
        });
    Ok(AttentionResult { output, lse })
}

/// Dense attention that additionally exports the post-softmax probability
/// rows (`tokens x heads x kv_tokens`).
pub fn dense_attention_with_probs<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    scale: S,
) -> Result<(AttentionResult<S>, Vec<S>), AttentionError> {
    check_qkv(q, k, v)?;
    let n_k = k.tokens;
    let (h_kv, h_s, d) = (q.kv_heads, q.shared, q.dim);
    let heads = h_kv * h_s;
    let mut output = HeadTensor::zeros(q.tokens, h_kv, h_s, d);
    let mut lse = vec![S::zero(); q.tokens * heads];
    let mut probs = vec![S::zero(); q.tokens * heads * n_k];
    output
        .data
        .par_chunks_mut(heads * d)
        .zip(lse.par_chunks_mut(heads))
        .zip(probs.par_chunks_mut(heads * n_k))
        .enumerate()
        .for_each(|(t, ((o_row, l_row), p_row))| {
            let mut scratch = Vec::new();
            dense_row(t, q, k, v, scale, o_row, l_row, Some(p_row), &mut scratch);
        });
    Ok((AttentionResult { output, lse }, probs))
}

/// Online-softmax attention processing keys in chunks of `tile`. Mathematically
/// identical to [`dense_attention`] for every tile size.
pub fn tiled_attention<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    scale: S,
    tile: usize,
) -> Result<AttentionResult<S>, AttentionError> {
    check_qkv(q, k, v)?;
    if tile == 0 {
        return Err(AttentionError::BadTile);
    }
    let n_q = q.tokens;
    let n_k = k.tokens;
    let (h_kv, h_s, d) = (q.kv_heads, q.shared, q.dim);
    let heads = h_kv * h_s;
    let mut output = HeadTensor::zeros(n_q, h_kv, h_s, d);
    let mut lse = vec![S::zero(); n_q * heads];

    output
        .data
        .par_chunks_mut(heads * d)
        .zip(lse.par_chunks_mut(heads))
        .enumerate()
        .for_each(|(t, (o_row, l_row))| {
            let mut p_tile = vec![S::zero(); tile];
            for g in 0..h_kv {
                for s in 0..h_s {
                    let h = g * h_s + s;
                    let q_row = q.row(t, h);
                    let acc = &mut o_row[h * d..(h + 1) * d];
                    let mut m = S::neg_infinity();
                    let mut l = S::neg_infinity();
                    let mut start = 0usize;
                    while start < n_k {
                        let end = (start + tile).min(n_k);
                        let span = end - start;
                        let mut tile_max = S::neg_infinity();
                        for (idx, j) in (start..end).enumerate() {
                            let sc = scale * dot(q_row, k.row(j, g));
                            p_tile[idx] = sc;
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
                            let p = (p_tile[idx] - m_new).exp();
                            row_sum += p;
                            let v_row = v.row(j, g);
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
                        start += span;
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

fn check_backward<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    result: &AttentionResult<S>,
    grad_output: &HeadTensor<S>,
) -> Result<(), AttentionError> {
    check_qkv(q, k, v)?;
    if result.output.tokens != q.tokens
        || result.output.heads() != q.heads()
        || result.output.dim != q.dim
    {
        return Err(AttentionError::StaleResult("output shape"));
    }
    if result.lse.len() != q.tokens * q.heads() {
        return Err(AttentionError::StaleResult("lse length"));
    }
    if result.lse.iter().any(|l| !l.is_finite()) {
        return Err(AttentionError::StaleResult("non-finite lse"));
    }
    if grad_output.tokens != q.tokens
        || grad_output.heads() != q.heads()
        || grad_output.dim != q.dim
    {
        return Err(AttentionError::ShapeMismatch("grad_output shape"));
    }
    Ok(())
}

/// Exact gradients of [`dense_attention`] with respect to q, k and v.
/// Probabilities are recomputed from the stored logsumexp, so no `N^2`
/// matrix is materialized.
pub fn dense_attention_backward<S: Scalar>(
    q: &HeadTensor<S>,
    k: &HeadTensor<S>,
    v: &HeadTensor<S>,
    scale: S,
    result: &AttentionResult<S>,
    grad_output: &HeadTensor<S>,
) -> Result<(HeadTensor<S>, HeadTensor<S>, HeadTensor<S>), AttentionError> {
    check_backward(q, k, v, result, grad_output)?;
    let n_q = q.tokens;
    let n_k = k.tokens;
    let (h_kv, h_s, d) = (q.kv_heads, q.shared, q.dim);
    let heads = h_kv * h_s;

    // delta[t,h] = grad_output . output, the softmax-Jacobian offset term.
    let delta: Vec<S> = (0..n_q * heads)
        .map(|i| {
            let (t, h) = (i / heads, i % heads);
            dot(grad_output.row(t, h), result.output.row(t, h))
        })
        .collect();

    let mut grad_q = HeadTensor::zeros(n_q, h_kv, h_s, d);
    grad_q
        .data
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
                    for j in 0..n_k {
                        let k_row = k.row(j, g);
                        let p = (scale * dot(q_row, k_row) - l).exp();
                        let w = scale * p * (dot(go, v.row(j, g)) - dl);
                        for c in 0..d {
                            gq[c] += w * k_row[c];
                        }
                    }
                }
            }
        });

    // Key/value gradients parallelize over keys; each key recomputes its own
    // probability column, keeping accumulation deterministic per key.
    let mut grad_k = HeadTensor::zeros(n_k, h_kv, 1, d);
    let mut grad_v = HeadTensor::zeros(n_k, h_kv, 1, d);
    grad_k
        .data
        .par_chunks_mut(h_kv * d)
        .zip(grad_v.data.par_chunks_mut(h_kv * d))
        .enumerate()
        .for_each(|(j, (gk_row, gv_row))| {
            for g in 0..h_kv {
                let k_row = k.row(j, g);
                let v_row = v.row(j, g);
                let gk = &mut gk_row[g * d..(g + 1) * d];
                let gv = &mut gv_row[g * d..(g + 1) * d];
                for t in 0..n_q {
                    for s in 0..h_s {
                        let h = g * h_s + s;
                        let q_row = q.row(t, h);
                        let go = grad_output.row(t, h);
                        let p = (scale * dot(q_row, k_row) - result.lse[t * heads + h]).exp();
                        let w = scale * p * (dot(go, v_row) - delta[t * heads + h]);
                        for c in 0..d {
                            gk[c] += w * q_row[c];
                            gv[c] += p * go[c];
                        }
                    }
                }
            }
        });
    Ok((grad_q, grad_k, grad_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(
        rng: &mut ChaCha8Rng,
        tokens: usize,
        kv_heads: usize,
        shared: usize,
        dim: usize,
        amp: f64,
    ) -> HeadTensor<f64> {
        let data = (0..tokens * kv_heads * shared * dim)
            .map(|_| rng.gen_range(-amp..amp))
            .collect();
        HeadTensor::new(tokens, kv_heads, shared, dim, data).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_token_returns_value() {
        let q = HeadTensor::new(1, 1, 1, 2, vec![0.3, -0.7]).unwrap();
        let k = HeadTensor::new(1, 1, 1, 2, vec![0.1, 0.2]).unwrap();
        let v = HeadTensor::new(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let scale = 0.5;
        let r = dense_attention(&q, &k, &v, scale).unwrap();
        assert!(max_abs_diff(r.output.data(), &[1.0, 2.0]) < 1e-15);
        let expected_lse = scale * (0.3f64 * 0.1 + -0.7 * 0.2);
        assert!((r.lse[0] - expected_lse).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let n = 5;
        let k = HeadTensor::new(n, 1, 1, 2, vec![0.4; n * 2]).unwrap();
        let v_data: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let v = HeadTensor::new(n, 1, 1, 2, v_data.clone()).unwrap();
        let q = HeadTensor::new(1, 1, 1, 2, vec![1.0, -2.0]).unwrap();
        let r = dense_attention(&q, &k, &v, 1.0).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..n).map(|j| v_data[j * 2 + c]).sum::<f64>() / n as f64;
            assert!((r.output.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn two_key_case_by_hand() {
        // q=1, k=[0,1], v=[0,1], scale=1: output = e/(1+e).
        let q = HeadTensor::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let k = HeadTensor::new(2, 1, 1, 1, vec![0.0, 1.0]).unwrap();
        let v = HeadTensor::new(2, 1, 1, 1, vec![0.0, 1.0]).unwrap();
        let r = dense_attention(&q, &k, &v, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.output.data()[0] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn single_tile_matches_dense_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_tensor(&mut rng, 9, 2, 2, 4, 1.0);
        let k = random_tensor(&mut rng, 9, 2, 1, 4, 1.0);
        let v = random_tensor(&mut rng, 9, 2, 1, 4, 1.0);
        let scale = default_scale::<f64>(4);
        let dense = dense_attention(&q, &k, &v, scale).unwrap();
        let tiled = tiled_attention(&q, &k, &v, scale, 9).unwrap();
        assert_eq!(dense.output.data(), tiled.output.data());
        assert_eq!(dense.lse, tiled.lse);
        let tiled_large = tiled_attention(&q, &k, &v, scale, 64).unwrap();
        assert_eq!(dense.output.data(), tiled_large.output.data());
    }

    #[test]
    fn tiled_matches_dense_all_tile_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_tensor(&mut rng, 64, 1, 2, 8, 1.0);
        let k = random_tensor(&mut rng, 64, 1, 1, 8, 1.0);
        let v = random_tensor(&mut rng, 64, 1, 1, 8, 1.0);
        let scale = default_scale::<f64>(8);
        let dense = dense_attention(&q, &k, &v, scale).unwrap();
        for tile in [1usize, 3, 16] {
            let tiled = tiled_attention(&q, &k, &v, scale, tile).unwrap();
            assert!(max_abs_diff(dense.output.data(), tiled.output.data()) <= 1e-12);
            assert!(max_abs_diff(&dense.lse, &tiled.lse) <= 1e-12);
        }
    }

    #[test]
    fn adversarial_logits_no_overflow() {
        // Logits up to +-80 before scaling.
        let q = HeadTensor::new(1, 1, 1, 1, vec![80.0]).unwrap();
        let k = HeadTensor::new(3, 1, 1, 1, vec![1.0, -1.0, 0.5]).unwrap();
        let v = HeadTensor::new(3, 1, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let dense = dense_attention(&q, &k, &v, 1.0).unwrap();
        assert!(dense.output.data().iter().all(|x: &f64| x.is_finite()));
        for tile in [1usize, 2] {
            let tiled = tiled_attention(&q, &k, &v, 1.0, tile).unwrap();
            assert!(max_abs_diff(dense.output.data(), tiled.output.data()) <= 1e-10);
        }
    }

    #[test]
    fn lse_matches_partition_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_tensor(&mut rng, 8, 2, 1, 4, 1.5);
        let k = random_tensor(&mut rng, 12, 2, 1, 4, 1.5);
        let v = random_tensor(&mut rng, 12, 2, 1, 4, 1.5);
        let scale = 0.7;
        let r = dense_attention(&q, &k, &v, scale).unwrap();
        for t in 0..8 {
            for g in 0..2 {
                let direct: f64 = (0..12)
                    .map(|j| {
                        (scale
                            * q.row(t, g)
                                .iter()
                                .zip(k.row(j, g))
                                .map(|(a, b)| a * b)
                                .sum::<f64>())
                        .exp()
                    })
                    .sum();
                let rel = (r.lse[t * 2 + g].exp() - direct).abs() / direct;
                assert!(rel < 1e-10);
            }
        }
    }

    #[test]
    fn convex_hull_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let q = random_tensor(&mut rng, 16, 1, 1, 4, 2.0);
        let k = random_tensor(&mut rng, 16, 1, 1, 4, 2.0);
        let v = random_tensor(&mut rng, 16, 1, 1, 4, 2.0);
        let r = dense_attention(&q, &k, &v, default_scale::<f64>(4)).unwrap();
        for c in 0..4 {
            let min = (0..16).map(|j| v.row(j, 0)[c]).fold(f64::INFINITY, f64::min);
            let max = (0..16)
                .map(|j| v.row(j, 0)[c])
                .fold(f64::NEG_INFINITY, f64::max);
            for t in 0..16 {
                let o = r.output.row(t, 0)[c];
                assert!(o >= min - 1e-12 && o <= max + 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_grad_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_tensor(&mut rng, 6, 1, 2, 3, 1.0);
        let k = random_tensor(&mut rng, 6, 1, 1, 3, 1.0);
        let v = random_tensor(&mut rng, 6, 1, 1, 3, 1.0);
        let scale = default_scale::<f64>(3);
        let r = dense_attention(&q, &k, &v, scale).unwrap();
        let go = HeadTensor::zeros(6, 1, 2, 3);
        let (gq, gk, gv) = dense_attention_backward(&q, &k, &v, scale, &r, &go).unwrap();
        assert!(gq.data().iter().all(|&x| x == 0.0));
        assert!(gk.data().iter().all(|&x| x == 0.0));
        assert!(gv.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_single_token() {
        let q = HeadTensor::new(1, 1, 1, 2, vec![0.3, 0.4]).unwrap();
        let k = HeadTensor::new(1, 1, 1, 2, vec![-0.1, 0.9]).unwrap();
        let v = HeadTensor::new(1, 1, 1, 2, vec![2.0, -1.0]).unwrap();
        let scale = 1.0;
        let r = dense_attention(&q, &k, &v, scale).unwrap();
        let go = HeadTensor::new(1, 1, 1, 2, vec![0.5, -0.25]).unwrap();
        let (gq, gk, gv) = dense_attention_backward(&q, &k, &v, scale, &r, &go).unwrap();
        assert!(max_abs_diff(gv.data(), go.data()) < 1e-15);
        assert!(gq.data().iter().all(|&x| x.abs() < 1e-15));
        assert!(gk.data().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = random_tensor(&mut rng, 16, 2, 2, 4, 1.0);
        let k = random_tensor(&mut rng, 16, 2, 1, 4, 1.0);
        let v = random_tensor(&mut rng, 16, 2, 1, 4, 1.0);
        let go = random_tensor(&mut rng, 16, 2, 2, 4, 1.0);
        let scale = default_scale::<f64>(4);
        let r = dense_attention(&q, &k, &v, scale).unwrap();
        let (gq, gk, gv) = dense_attention_backward(&q, &k, &v, scale, &r, &go).unwrap();

        // Scalar objective: sum(grad_output * output).
        let loss = |q: &HeadTensor<f64>, k: &HeadTensor<f64>, v: &HeadTensor<f64>| -> f64 {
            let r = dense_attention(q, k, v, scale).unwrap();
            r.output
                .data()
                .iter()
                .zip(go.data())
                .map(|(o, g)| o * g)
                .sum()
        };
        let step = 1e-5;
        let check = |analytic: &HeadTensor<f64>,
                     perturb: &dyn Fn(usize, f64) -> (HeadTensor<f64>, HeadTensor<f64>, HeadTensor<f64>)| {
            let norm = analytic
                .data()
                .iter()
                .map(|x| x.abs())
                .fold(0.0f64, f64::max)
                .max(1e-8);
            for i in (0..analytic.data().len()).step_by(7) {
                let (qp, kp, vp) = perturb(i, step);
                let (qm, km, vm) = perturb(i, -step);
                let fd = (loss(&qp, &kp, &vp) - loss(&qm, &km, &vm)) / (2.0 * step);
                let rel = (fd - analytic.data()[i]).abs() / norm;
                assert!(rel < 1e-6, "index {i}: fd {fd} vs {}", analytic.data()[i]);
            }
        };
        check(&gq, &|i, eps| {
            let mut qq = q.clone();
            qq.data_mut()[i] += eps;
            (qq, k.clone(), v.clone())
        });
        check(&gk, &|i, eps| {
            let mut kk = k.clone();
            kk.data_mut()[i] += eps;
            (q.clone(), kk, v.clone())
        });
        check(&gv, &|i, eps| {
            let mut vv = v.clone();
            vv.data_mut()[i] += eps;
            (q.clone(), k.clone(), vv)
        });
    }

    #[test]
    fn shape_mismatch_rejected() {
        let q = HeadTensor::<f64>::zeros(2, 1, 1, 4);
        let k = HeadTensor::<f64>::zeros(2, 1, 1, 3);
        let v = HeadTensor::<f64>::zeros(2, 1, 1, 3);
        assert!(dense_attention(&q, &k, &v, 1.0).is_err());
        let k2 = HeadTensor::<f64>::zeros(2, 2, 1, 4);
        assert!(dense_attention(&q, &k2, &v, 1.0).is_err());
    }
}
