//! Rotary position embedding with optional YaRN (NTK-by-parts) rescaling.
//!
//! Rotation pairs dimension `i` with `i + dim/2` (Llama "rotate half").

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// YaRN ramp bounds and temperature follow the reference defaults.
const YARN_BETA_FAST: f64 = 32.0;
const YARN_BETA_SLOW: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Rope<T> {
    dim: usize,
    inv_freq: Vec<T>,
    /// cos/sin multiplier (YaRN attention temperature; 1 without scaling).
    mscale: T,
    max_positions: Option<usize>,
}

impl<T: Scalar> Rope<T> {
    /// Plain RoPE over `dim` dimensions with unbounded positions.
    pub fn new(dim: usize, theta: f64) -> Self {
        let half = dim / 2;
        let inv_freq = (0..half)
            .map(|i| T::of(1.0 / theta.powf(2.0 * i as f64 / dim as f64)))
            .collect();
        Self {
            dim,
            inv_freq,
            mscale: T::one(),
            max_positions: None,
        }
    }

    /// RoPE whose table covers `original_max · factor` positions, with YaRN
    /// frequency interpolation when `factor > 1`.
    pub fn yarn(dim: usize, theta: f64, original_max: usize, factor: f64) -> Result<Self> {
        if !(factor >= 1.0) {
            return Err(Error::InvalidArgument(format!("yarn factor {factor} < 1")));
        }
        let freqs = yarn_inv_freq(dim, theta, original_max, factor);
        let mscale = if factor > 1.0 { 0.1 * factor.ln() + 1.0 } else { 1.0 };
        Ok(Self {
            dim,
            inv_freq: freqs.into_iter().map(T::of).collect(),
            mscale: T::of(mscale),
            max_positions: Some(effective_context(original_max, factor)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inv_freq(&self) -> &[T] {
        &self.inv_freq
    }

    pub fn mscale(&self) -> T {
        self.mscale
    }

    pub fn max_positions(&self) -> Option<usize> {
        self.max_positions
    }

    pub fn check_position(&self, last: usize) -> Result<()> {
        match self.max_positions {
            Some(max) if last >= max => Err(Error::PositionOverflow { position: last, max }),
            _ => Ok(()),
        }
    }

    /// Rotates every `dim`-wide head block of each row, rows being
    /// consecutive positions starting at `offset`. Blocks are located at
    /// `head_stride * h + head_offset` within a row.
    pub fn apply(&self, x: &mut Tensor<T>, offset: usize, head_stride: usize, head_offset: usize) {
        self.rotate(x, offset, head_stride, head_offset, false);
    }

    /// Transpose of [`Rope::apply`], used in backward passes.
    pub fn apply_transpose(
        &self,
        x: &mut Tensor<T>,
        offset: usize,
        head_stride: usize,
        head_offset: usize,
    ) {
        self.rotate(x, offset, head_stride, head_offset, true);
    }

    fn rotate(
        &self,
        x: &mut Tensor<T>,
        offset: usize,
        head_stride: usize,
        head_offset: usize,
        transpose: bool,
    ) {
        let half = self.dim / 2;
        let width = x.cols();
        let heads = width / head_stride;
        for r in 0..x.rows() {
            let pos = T::of((offset + r) as f64);
            let row = x.row_mut(r);
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let angle = pos * f;
                let c = angle.cos() * self.mscale;
                let mut s = angle.sin() * self.mscale;
                if transpose {
                    s = -s;
                }
                for h in 0..heads {
                    let base = h * head_stride + head_offset;
                    let a = row[base + i];
                    let b = row[base + i + half];
                    row[base + i] = a * c - b * s;
                    row[base + i + half] = b * c + a * s;
                }
            }
        }
    }
}

/// Context length reached by scaling `original` positions by `factor`.
pub fn effective_context(original: usize, factor: f64) -> usize {
    (original as f64 * factor).round() as usize
}

fn correction_dim(rotations: f64, dim: usize, theta: f64, original_max: usize) -> f64 {
    dim as f64 * (original_max as f64 / (rotations * 2.0 * std::f64::consts::PI)).ln()
        / (2.0 * theta.ln())
}

/// YaRN "NTK-by-parts" inverse frequencies. High-frequency dimensions keep
/// their original frequency, low-frequency ones are interpolated by
/// `1/factor`, with a linear ramp in between.
pub fn yarn_inv_freq(dim: usize, theta: f64, original_max: usize, factor: f64) -> Vec<f64> {
    let half = dim / 2;
    let base: Vec<f64> = (0..half)
        .map(|i| 1.0 / theta.powf(2.0 * i as f64 / dim as f64))
        .collect();
    if factor <= 1.0 {
        return base;
    }
    let low = correction_dim(YARN_BETA_FAST, dim, theta, original_max)
        .floor()
        .max(0.0);
    let mut high = correction_dim(YARN_BETA_SLOW, dim, theta, original_max)
        .ceil()
        .min(dim as f64 - 1.0);
    if (high - low).abs() < f64::EPSILON {
        high += 0.001;
    }
    base.iter()
        .enumerate()
        .map(|(i, &extrapolated)| {
            let ramp = ((i as f64 - low) / (high - low)).clamp(0.0, 1.0);
            let keep = 1.0 - ramp;
            let interpolated = extrapolated / factor;
            interpolated * (1.0 - keep) + extrapolated * keep
        })
        .collect()
}
