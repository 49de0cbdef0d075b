//! Channel-wise asymmetric integer quantization for cached KV vectors.
//!
//! Each group of `channel_size` consecutive elements gets its own scale and
//! zero point so that `x ≈ scale * (code - zero_point)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::round_even;

/// Smallest scale used for constant groups.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector {
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i64>,
    pub bits: u32,
    pub channel_size: usize,
}

impl QuantizedVector {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Bytes taken by the packed codes (two 4-bit codes share a byte).
    pub fn code_bytes(&self) -> usize {
        (self.codes.len() * self.bits as usize).div_ceil(8)
    }
}

fn max_code(bits: u32) -> f64 {
    ((1u32 << bits) - 1) as f64
}

pub fn quantize(x: &[f64], bits: u32, channel_size: usize) -> Result<QuantizedVector> {
    if x.is_empty() {
        return Err(Error::contract("quantize of an empty vector"));
    }
    if bits != 4 && bits != 8 {
        return Err(Error::contract(format!("unsupported bit width {bits}")));
    }
    if channel_size == 0 || !x.len().is_multiple_of(channel_size) {
        return Err(Error::contract(format!(
            "channel size {channel_size} does not divide length {}",
            x.len()
        )));
    }
    let qmax = max_code(bits);
    let groups = x.len() / channel_size;
    let mut out = QuantizedVector {
        codes: Vec::with_capacity(x.len()),
        scales: Vec::with_capacity(groups),
        zero_points: Vec::with_capacity(groups),
        bits,
        channel_size,
    };
    for group in x.chunks(channel_size) {
        let (lo, hi) = group
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let scale = ((hi - lo) / qmax).max(MIN_SCALE);
        let zero = round_even(-lo / scale);
        out.scales.push(scale);
        out.zero_points.push(zero as i64);
        for &v in group {
            let code = round_even(v / scale + zero).clamp(0.0, qmax);
            out.codes.push(code as u8);
        }
    }
    Ok(out)
}

pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    q.codes
        .chunks(q.channel_size)
        .zip(q.scales.iter().zip(&q.zero_points))
        .flat_map(|(codes, (&scale, &zero))| {
            codes.iter().map(move |&c| scale * (c as i64 - zero) as f64)
        })
        .collect()
}

/// Quantize-then-dequantize, the values a quantized cache hands back.
pub fn fake_quantize(x: &[f64], bits: u32, channel_size: usize) -> Result<Vec<f64>> {
    Ok(dequantize(&quantize(x, bits, channel_size)?))
}
