//! Training-objective arithmetic: voxel-category reconstruction losses with a
//! weighted total, diagonal-Gaussian KL, rectified-flow interpolation and its
//! velocity-matching loss, and masked 2D conditioning-token extraction.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::ssa::compress::Projection;
use crate::ssa::pe::sinusoidal_encoding;
use crate::ssa::{PeSpec, SsaError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("voxel index {index} out of range for {len} values")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("flow time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Ssa(#[from] SsaError),
}

/// Index sets partitioning the reconstructed voxels by supervision role,
/// over predicted and ground-truth values aligned by position.
#[derive(Debug, Clone, Default)]
pub struct VoxelCategorySets {
    /// Voxels present in the encoder input.
    pub input: Vec<usize>,
    /// Extra voxels recovered only in the decoder output.
    pub extra: Vec<usize>,
    /// Caller-identified sharp-feature voxels; a subset of input + extra.
    pub sharp: Vec<usize>,
}

/// Weights for the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<S> {
    pub lambda_in: S,
    pub lambda_ext: S,
    pub lambda_sharp: S,
    pub lambda_kl: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self {
            lambda_in: S::one(),
            lambda_ext: S::from_f64_lossy(0.1),
            lambda_sharp: S::one(),
            lambda_kl: S::from_f64_lossy(1e-3),
        }
    }
}

/// One draw from the straight-line noising process.
#[derive(Debug, Clone)]
pub struct FlowSample<S> {
    pub x0: Vec<S>,
    pub eps: Vec<S>,
    pub t: S,
}

impl<S: Scalar> FlowSample<S> {
    pub fn new(x0: Vec<S>, eps: Vec<S>, t: S) -> Result<Self, LossError> {
        if x0.len() != eps.len() {
            return Err(LossError::ShapeMismatch("x0/eps length"));
        }
        let tf = t.as_f64();
        if !(0.0..=1.0).contains(&tf) {
            return Err(LossError::BadTime(tf));
        }
        Ok(Self { x0, eps, t })
    }
}

/// Mean squared error over one index category. Empty categories contribute 0.
pub fn category_loss<S: Scalar>(
    pred: &[S],
    gt: &[S],
    category: &[usize],
) -> Result<S, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::ShapeMismatch("pred/gt length"));
    }
    if category.is_empty() {
        return Ok(S::zero());
    }
    let mut acc = S::zero();
    for &i in category {
        if i >= pred.len() {
            return Err(LossError::IndexOutOfRange {
                index: i,
                len: pred.len(),
            });
        }
        let e = pred[i] - gt[i];
        acc += e * e;
    }
    Ok(acc / S::from_f64_lossy(category.len() as f64))
}

/// Per-term loss values alongside the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossBreakdown<S> {
    pub input: S,
    pub extra: S,
    pub sharp: S,
    pub kl: S,
    pub total: S,
}

/// Weighted sum of the category reconstruction losses and the KL term.
pub fn total_vae_loss<S: Scalar>(
    pred: &[S],
    gt: &[S],
    categories: &VoxelCategorySets,
    kl: S,
    weights: &LossWeights<S>,
) -> Result<VaeLossBreakdown<S>, LossError> {
    let input = category_loss(pred, gt, &categories.input)?;
    let extra = category_loss(pred, gt, &categories.extra)?;
    let sharp = category_loss(pred, gt, &categories.sharp)?;
    let total = weights.lambda_in * input
        + weights.lambda_ext * extra
        + weights.lambda_sharp * sharp
        + weights.lambda_kl * kl;
    Ok(VaeLossBreakdown {
        input,
        extra,
        sharp,
        kl,
        total,
    })
}

/// KL divergence from a diagonal Gaussian to the standard normal, averaged
/// over elements: `mean(mu^2 + e^logvar - 1 - logvar) / 2`.
pub fn kl_divergence<S: Scalar>(mu: &[S], logvar: &[S]) -> Result<S, LossError> {
    if mu.len() != logvar.len() {
        return Err(LossError::ShapeMismatch("mu/logvar length"));
    }
    if mu.is_empty() {
        return Ok(S::zero());
    }
    let mut acc = S::zero();
    for (&m, &lv) in mu.iter().zip(logvar) {
        if !m.is_finite() || !lv.is_finite() {
            return Err(LossError::NonFinite);
        }
        acc += m * m + lv.exp() - S::one() - lv;
    }
    let half = S::from_f64_lossy(0.5);
    Ok(half * acc / S::from_f64_lossy(mu.len() as f64))
}

/// Straight-line interpolation `(1 - t) x0 + t eps`.
pub fn rf_interpolate<S: Scalar>(sample: &FlowSample<S>) -> Vec<S> {
    let t = sample.t;
    let one_m_t = S::one() - t;
    sample
        .x0
        .iter()
        .zip(&sample.eps)
        .map(|(&x, &e)| one_m_t * x + t * e)
        .collect()
}

/// Velocity-matching loss: mean squared error of `v_pred` against the
/// constant target velocity `eps - x0`.
pub fn cfm_loss<S: Scalar>(v_pred: &[S], sample: &FlowSample<S>) -> Result<S, LossError> {
    if v_pred.len() != sample.x0.len() {
        return Err(LossError::ShapeMismatch("v_pred length"));
    }
    if v_pred.is_empty() {
        return Ok(S::zero());
    }
    let mut acc = S::zero();
    for ((&v, &x), &e) in v_pred.iter().zip(&sample.x0).zip(&sample.eps) {
        let d = v - (e - x);
        acc += d * d;
    }
    Ok(acc / S::from_f64_lossy(v_pred.len() as f64))
}

/// Foreground conditioning tokens from a 2D feature grid: the masked pixels
/// in row-major order, each projected and offset by a 2D positional encoding.
pub fn extract_foreground_tokens<S: Scalar>(
    features: &[S],
    height: usize,
    width: usize,
    channels: usize,
    mask: &[bool],
    projection: &Projection<S>,
    pe: &PeSpec,
) -> Result<Vec<S>, LossError> {
    if features.len() != height * width * channels {
        return Err(LossError::ShapeMismatch("feature grid size"));
    }
    if mask.len() != height * width {
        return Err(LossError::ShapeMismatch("mask size"));
    }
    if projection.dim() != channels {
        return Err(LossError::Ssa(SsaError::BadProjection {
            dim: projection.dim(),
            got: channels,
        }));
    }
    let mut tokens = Vec::new();
    let mut encoded = vec![S::zero(); channels];
    let mut row_buf = vec![S::zero(); channels];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let feat = &features[(y * width + x) * channels..(y * width + x + 1) * channels];
            row_buf.clear();
            row_buf.extend_from_slice(feat);
            projection.apply(feat, &mut encoded);
            if pe.enabled {
                row_buf.iter_mut().for_each(|v| *v = S::zero());
                sinusoidal_encoding(&[y as u32, x as u32], channels, pe.base, &mut row_buf)?;
                for (o, &p) in encoded.iter_mut().zip(&row_buf) {
                    *o += p;
                }
            }
            tokens.extend_from_slice(&encoded);
        }
    }
    Ok(tokens)
}
