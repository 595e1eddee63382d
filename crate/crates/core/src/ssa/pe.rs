//! Sinusoidal absolute positional encoding over integer coordinates.
//!
//! Channels are split evenly across axes; each axis gets sin/cos pairs at
//! geometrically spaced frequencies, interleaved `[sin f0, cos f0, sin f1,
//! ...]`. Coordinate (0, ..) therefore encodes to sin channels 0 and cos
//! channels 1.

use crate::scalar::Scalar;

use super::SsaError;

pub const DEFAULT_PE_BASE: f64 = 10_000.0;

/// Encode one coordinate of `axes.len()` components into `channels` values.
/// `channels` must be divisible by `2 * axes.len()`.
pub fn sinusoidal_encoding<S: Scalar>(
    axes: &[u32],
    channels: usize,
    base: f64,
    out: &mut [S],
) -> Result<(), SsaError> {
    let n_axes = axes.len();
    if channels == 0 || channels % (2 * n_axes) != 0 {
        return Err(SsaError::IndivisibleChannels {
            channels,
            axes: n_axes,
        });
    }
    debug_assert_eq!(out.len(), channels);
    let per_axis = channels / n_axes;
    let freqs = per_axis / 2;
    for (a, &coord) in axes.iter().enumerate() {
        let block = &mut out[a * per_axis..(a + 1) * per_axis];
        for f in 0..freqs {
            let omega = base.powf(-(f as f64) / freqs as f64);
            let angle = coord as f64 * omega;
            block[2 * f] = S::from_f64_lossy(angle.sin());
            block[2 * f + 1] = S::from_f64_lossy(angle.cos());
        }
    }
    Ok(())
}

/// Batch form over 3D coordinates: one row of `channels` per coordinate.
pub fn positional_encoding<S: Scalar>(
    coords: &[[u32; 3]],
    channels: usize,
    base: f64,
) -> Result<Vec<S>, SsaError> {
    let mut rows = vec![S::zero(); coords.len() * channels];
    for (c, row) in coords.iter().zip(rows.chunks_mut(channels)) {
        sinusoidal_encoding(c, channels, base, row)?;
    }
    Ok(rows)
}
