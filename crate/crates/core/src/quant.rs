//! Symmetric uniform N-bit quantization with straight-through-estimator
//! backward contracts and learned-step-size scale gradients.
//!
//! The forward maps x to clamp(round(x/s), q_min, q_max) with zero-point
//! fixed at 0; rounding is half-to-even. Scales are trainable, one per
//! denoising timestep for activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Smallest scale a table may hold; projection after optimizer steps keeps
/// every entry at or above this floor.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Bit-width and derived integer range, per-tensor granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    bits: u8,
}

impl QuantParams {
    pub fn new(bits: u8) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidBits { bits });
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Lower clamp bound, -2^(bits-1).
    pub fn q_min(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Upper clamp bound, 2^(bits-1) - 1.
    pub fn q_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

/// Positive quantization scales indexed by denoising timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    scales: Vec<f64>,
    learnable: bool,
}

impl ScaleTable {
    pub fn new(len: usize, init: f64, learnable: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("scale table"));
        }
        if init <= 0.0 || !init.is_finite() {
            return Err(Error::NonPositiveScale { scale: init });
        }
        Ok(Self {
            scales: vec![init; len],
            learnable,
        })
    }

    pub fn from_scales(scales: Vec<f64>, learnable: bool) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::EmptyInput("scale table"));
        }
        if let Some(&bad) = scales.iter().find(|s| **s <= 0.0 || !s.is_finite()) {
            return Err(Error::NonPositiveScale { scale: bad });
        }
        Ok(Self { scales, learnable })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub fn get(&self, t: usize) -> Result<f64> {
        self.scales.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            len: self.scales.len(),
        })
    }

    pub fn set(&mut self, t: usize, value: f64) -> Result<()> {
        if t >= self.scales.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                len: self.scales.len(),
            });
        }
        self.scales[t] = value.max(SCALE_FLOOR);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scales
    }

    /// Projects every entry back onto the positive floor.
    pub fn clamp_floor(&mut self) {
        for s in &mut self.scales {
            if !(*s >= SCALE_FLOOR) {
                *s = SCALE_FLOOR;
            }
        }
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.scales
    }
}

/// Integer payload plus the scale that dequantizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    ints: IntTensor,
    scale: f64,
    bits: u8,
}

impl QuantizedTensor {
    pub fn ints(&self) -> &IntTensor {
        &self.ints
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }
}

/// ints = clamp(round_half_even(x/s), q_min, q_max).
pub fn quantize(x: &Tensor, scale: f64, p: QuantParams) -> Result<QuantizedTensor> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::NonPositiveScale { scale });
    }
    let (lo, hi) = (p.q_min(), p.q_max());
    let ints = x
        .data()
        .iter()
        .map(|&v| ((v / scale).round_ties_even() as i64).clamp(lo, hi))
        .collect();
    Ok(QuantizedTensor {
        ints: IntTensor::from_raw(x.shape().to_vec(), ints),
        scale,
        bits: p.bits(),
    })
}

/// scale * ints, elementwise.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    q.ints.to_tensor(q.scale)
}

/// Quantize-then-dequantize: the straight-through forward.
pub fn fake_quant(x: &Tensor, scale: f64, p: QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, scale, p)?))
}

/// STE input gradient: upstream where x/s lies inside [q_min, q_max],
/// zero on clipped coordinates.
pub fn ste_backward_input(
    x: &Tensor,
    scale: f64,
    p: QuantParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::NonPositiveScale { scale });
    }
    let (lo, hi) = (p.q_min() as f64, p.q_max() as f64);
    upstream.zip_with(x, "ste_backward_input", |g, v| {
        let r = v / scale;
        if (lo..=hi).contains(&r) {
            g
        } else {
            0.0
        }
    })
}

/// Learned-step-size scale gradient: per element round(x/s) - x/s when
/// unclipped, the hit clamp bound when clipped; summed against the upstream
/// gradient and normalized by 1/sqrt(numel * q_max).
pub fn ste_backward_scale(
    x: &Tensor,
    scale: f64,
    p: QuantParams,
    upstream: &Tensor,
) -> Result<f64> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::NonPositiveScale { scale });
    }
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            context: "ste_backward_scale",
            expected: x.shape().to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    let (lo, hi) = (p.q_min() as f64, p.q_max() as f64);
    let mut acc = 0.0f64;
    for (&v, &g) in x.data().iter().zip(upstream.data().iter()) {
        let r = v / scale;
        let local = if r <= lo {
            lo
        } else if r >= hi {
            hi
        } else {
            r.round_ties_even() - r
        };
        acc += g * local;
    }
    let norm = 1.0 / ((x.numel() as f64) * (p.q_max() as f64)).sqrt();
    Ok(acc * norm)
}

/// Calibration initializer: max|calib| / q_max, floored at `SCALE_FLOOR`.
pub fn init_scale(calib: &Tensor, p: QuantParams) -> Result<f64> {
    if calib.numel() == 0 {
        return Err(Error::EmptyInput("calibration tensor"));
    }
    Ok((calib.max_abs() / p.q_max() as f64).max(SCALE_FLOOR))
}
