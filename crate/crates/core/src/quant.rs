//! Simulated FP4 (1 sign bit, 3 exponent bits) stochastic quantizer.
//!
//! Values are normalized by the tensor's largest magnitude, rounded
//! stochastically to one of the two neighbouring grid levels so that the
//! result is unbiased, and scaled back. The grid is logarithmic:
//! `{0} ∪ {±2^-j : j = 0..=6}`.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Stochastic,
    /// Pass-through; used to check that quantization hooks alone change nothing.
    Identity,
}

/// Bit layout of the simulated format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSpec {
    pub sign_bits: u32,
    pub exponent_bits: u32,
    pub mode: QuantMode,
}

impl QuantizerSpec {
    pub fn fp4() -> Self {
        Self {
            sign_bits: 1,
            exponent_bits: 3,
            mode: QuantMode::Stochastic,
        }
    }

    pub fn identity() -> Self {
        Self {
            mode: QuantMode::Identity,
            ..Self::fp4()
        }
    }

    pub fn with_mode(mode: QuantMode) -> Self {
        Self { mode, ..Self::fp4() }
    }
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self::fp4()
    }
}

/// The finite set of normalized values a quantized element may take.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    /// Non-negative magnitudes in ascending order, starting with 0 and ending with 1.
    magnitudes: Vec<f64>,
    mode: QuantMode,
}

/// Builds the level set for `spec`.
///
/// One exponent code is reserved for zero; the remaining `2^e - 1` codes
/// map to `2^0, 2^-1, …`. With three exponent bits that leaves 2^-6 as
/// the smallest positive level.
pub fn build_grid(spec: &QuantizerSpec) -> QuantGrid {
    let codes = 1usize << spec.exponent_bits;
    let mut magnitudes = Vec::with_capacity(codes);
    magnitudes.push(0.0);
    for j in (0..codes - 1).rev() {
        magnitudes.push((-(j as f64)).exp2());
    }
    QuantGrid {
        magnitudes,
        mode: spec.mode,
    }
}

impl QuantGrid {
    pub fn fp4() -> Self {
        build_grid(&QuantizerSpec::fp4())
    }

    pub fn identity() -> Self {
        build_grid(&QuantizerSpec::identity())
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn is_identity(&self) -> bool {
        self.mode == QuantMode::Identity
    }

    /// All levels, negative through positive, sorted ascending.
    pub fn levels(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.magnitudes.iter().skip(1).rev().map(|m| -m).collect();
        out.extend_from_slice(&self.magnitudes);
        out
    }

    pub fn min_positive(&self) -> f64 {
        self.magnitudes[1]
    }

    /// Neighbouring magnitudes `(lo, hi)` with `lo <= m <= hi`, for `m` in `[0, 1]`.
    fn bracket(&self, m: f64) -> (f64, f64) {
        let idx = self.magnitudes.partition_point(|&level| level < m);
        if idx >= self.magnitudes.len() {
            let top = *self.magnitudes.last().unwrap();
            return (top, top);
        }
        let hi = self.magnitudes[idx];
        if hi == m || idx == 0 {
            (hi, hi)
        } else {
            (self.magnitudes[idx - 1], hi)
        }
    }

    /// Stochastically rounds one normalized value. Values already on the
    /// grid come back unchanged without consuming randomness.
    fn round_normalized<R: Rng + ?Sized>(&self, v: f64, rng: &mut R) -> f64 {
        let m = v.abs();
        let (lo, hi) = self.bracket(m);
        let out = if lo == hi {
            lo
        } else {
            let p_up = (m - lo) / (hi - lo);
            if rng.random::<f64>() < p_up {
                hi
            } else {
                lo
            }
        };
        out.copysign(v)
    }

    /// Exact per-element variance of quantizing a normalized value `v`.
    pub fn rounding_variance(&self, v: f64) -> f64 {
        let (lo, hi) = self.bracket(v.abs());
        (hi - v.abs()) * (v.abs() - lo)
    }
}

/// Quantizes a flat slice with per-slice max-magnitude scaling.
pub fn quantize_values<R: Rng + ?Sized>(
    values: &[f64],
    grid: &QuantGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    tensor::check_finite(values)?;
    if grid.is_identity() {
        return Ok(values.to_vec());
    }
    let scale = tensor::norm_inf(values);
    if scale == 0.0 {
        return Ok(values.to_vec());
    }
    Ok(values
        .iter()
        .map(|&x| grid.round_normalized(x / scale, rng) * scale)
        .collect())
}

/// Unbiased stochastic quantization of `x` onto `grid`, scaled by `‖x‖∞`.
pub fn quantize<R: Rng + ?Sized>(x: &Tensor, grid: &QuantGrid, rng: &mut R) -> Result<Tensor> {
    let data = quantize_values(x.data(), grid, rng)?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Monte-Carlo moments of the quantizer output.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: Tensor,
    /// Sum over elements of the per-element sample variance.
    pub total_variance: f64,
    pub per_element_variance: Vec<f64>,
}

/// Estimates `E[q(x)]` and `Σ_i Var(q(x)_i)` from `trials` independent draws.
pub fn empirical_moments<R: Rng + ?Sized>(
    x: &Tensor,
    grid: &QuantGrid,
    trials: usize,
    rng: &mut R,
) -> Result<Moments> {
    if trials < 2 {
        return Err(crate::Error::Config(format!(
            "empirical_moments needs at least 2 trials, got {trials}"
        )));
    }
    let n = x.len();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for t in 0..trials {
        let q = quantize_values(x.data(), grid, rng)?;
        let count = (t + 1) as f64;
        for i in 0..n {
            let delta = q[i] - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (q[i] - mean[i]);
        }
    }
    let per_element_variance: Vec<f64> = m2.iter().map(|s| s / (trials - 1) as f64).collect();
    Ok(Moments {
        mean: Tensor::new(x.shape().to_vec(), mean)?,
        total_variance: per_element_variance.iter().sum(),
        per_element_variance,
    })
}
