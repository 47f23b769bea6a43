//! Symmetric per-tensor INT8 quantization.

use serde::{Deserialize, Serialize};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Symmetric quantizer; the zero point is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantScheme {
    pub fn with_scale(scale: f64) -> Self {
        Self {
            bits: 8,
            scale,
            zero_point: 0,
        }
    }

    /// Scale that maps `max_abs` onto code 127. An all-zero tensor gets scale 1.
    pub fn for_max_abs(max_abs: f64) -> Self {
        if max_abs > 0.0 && max_abs.is_finite() {
            Self::with_scale(max_abs / QMAX as f64)
        } else {
            Self::with_scale(1.0)
        }
    }

    pub fn fit(values: &[f64]) -> Self {
        Self::for_max_abs(values.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    pub fn quantize(&self, x: f64) -> i8 {
        quantize_code(x, self.scale) as i8
    }

    pub fn dequantize(&self, code: i8) -> f64 {
        code as f64 * self.scale
    }

    pub fn fake(&self, x: f64) -> f64 {
        fake_quantize(x, self.scale)
    }

    pub fn quantize_all(&self, values: &[f64]) -> Vec<i8> {
        values.iter().map(|&v| self.quantize(v)).collect()
    }

    /// Number of levels of the code range.
    pub fn levels(&self) -> u32 {
        1 << self.bits
    }
}

#[inline]
fn quantize_code(x: f64, scale: f64) -> i32 {
    // `as` saturates and maps NaN to 0, so the clamp covers every input.
    ((x / scale).round() as i32).clamp(QMIN, QMAX)
}

/// `dequant(quant(x))` in one step.
#[inline]
pub fn fake_quantize(x: f64, scale: f64) -> f64 {
    quantize_code(x, scale) as f64 * scale
}

/// A weight tensor stored as codes plus its scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub scheme: QuantScheme,
    pub codes: Vec<i8>,
}

impl QuantizedTensor {
    pub fn from_values(values: &[f64]) -> Self {
        let scheme = QuantScheme::fit(values);
        Self {
            codes: scheme.quantize_all(values),
            scheme,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.scheme.dequantize(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_tensor() {
        let q = QuantizedTensor::from_values(&[-1.0, 0.0, 1.0]);
        assert_eq!(q.scheme.scale, 1.0 / 127.0);
        assert_eq!(q.codes, vec![-127, 0, 127]);
    }

    #[test]
    fn all_zero_tensor_has_unit_scale() {
        let q = QuantizedTensor::from_values(&[0.0; 4]);
        assert_eq!(q.scheme.scale, 1.0);
        assert_eq!(q.codes, vec![0; 4]);
    }

    #[test]
    fn codes_saturate() {
        let s = QuantScheme::with_scale(0.5);
        assert_eq!(s.quantize(1e9), 127);
        assert_eq!(s.quantize(-1e9), -128);
        assert_eq!(s.quantize(f64::NAN), 0);
    }

    #[test]
    fn requantization_is_idempotent() {
        let s = QuantScheme::with_scale(0.0371);
        for i in -5000..5000 {
            let x = i as f64 * 0.00113;
            let c = s.quantize(x);
            assert_eq!(s.quantize(s.dequantize(c)), c);
        }
    }
}
