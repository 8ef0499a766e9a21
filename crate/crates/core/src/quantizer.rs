//! Symmetric per-layer linear weight quantizer and fake quantization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MIN_BITS: u32 = 3;
pub const MAX_BITS: u32 = 8;

/// Number of positive quantization levels, `2^(Q-1) - 1`.
pub fn levels(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

/// Grid step `max|θ| / (2^(Q-1) - 1)`.
pub fn step_size(theta: &[f64], bits: u32) -> f64 {
    let m = theta.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    m / levels(bits)
}

/// `round(θ (2^(Q-1)-1) / max|θ|) · max|θ| / (2^(Q-1)-1)`, rounding half away from zero.
///
/// An all-zero input is returned unchanged.
pub fn quantize(theta: &[f64], bits: u32) -> Vec<f64> {
    assert!(bits >= 2, "quantizer needs at least 2 bits");
    let m = theta.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if m == 0.0 {
        return theta.to_vec();
    }
    quantize_with_max(theta, bits, m)
}

/// Quantize with an externally supplied range (frozen-scale policy).
pub fn quantize_with_max(theta: &[f64], bits: u32, max_abs: f64) -> Vec<f64> {
    if max_abs == 0.0 {
        return theta.to_vec();
    }
    let l = levels(bits);
    theta
        .iter()
        .map(|&x| {
            // f64::round rounds half away from zero. Scaling as (k / l) * max
            // maps the extreme level back to exactly ±max, which makes the
            // quantizer idempotent bit for bit.
            let k = (x * l / max_abs).round();
            (k / l) * max_abs
        })
        .collect()
}

/// Quantization error `q(θ) - θ`.
pub fn quant_error(theta: &[f64], bits: u32) -> Vec<f64> {
    quantize(theta, bits)
        .into_iter()
        .zip(theta)
        .map(|(q, &x)| q - x)
        .collect()
}

pub fn quantize_tensor(t: &Tensor, bits: u32) -> Tensor {
    Tensor::from_vec(t.shape(), quantize(t.data(), bits))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// Range taken from the current weights at every step.
    #[default]
    Recompute,
    /// Range fixed at the value recorded when the config was created.
    Frozen,
}

/// Per-layer bit-widths for the non-exempt layers of a [`ParamSet`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: BTreeMap<String, u32>,
    #[serde(default)]
    pub scale_policy: ScalePolicy,
    /// Per-layer ranges used under [`ScalePolicy::Frozen`].
    #[serde(default)]
    pub frozen_max: BTreeMap<String, f64>,
    /// Quantize biases too (off: biases stay full precision).
    #[serde(default)]
    pub quantize_bias: bool,
}

impl QuantConfig {
    /// Same bit-width on every non-exempt layer.
    pub fn uniform(params: &ParamSet, bits: u32) -> Self {
        QuantConfig {
            bits: params
                .quantizable()
                .map(|l| (l.name.clone(), bits))
                .collect(),
            ..Default::default()
        }
    }

    pub fn from_bits(bits: BTreeMap<String, u32>) -> Self {
        QuantConfig {
            bits,
            ..Default::default()
        }
    }

    /// Record current per-layer ranges and switch to the frozen policy.
    pub fn freeze_scales(&mut self, params: &ParamSet) {
        self.frozen_max = params
            .quantizable()
            .map(|l| (l.name.clone(), l.weight.max_abs()))
            .collect();
        self.scale_policy = ScalePolicy::Frozen;
    }

    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        for layer in params.layers() {
            match (layer.exempt, self.bits.get(&layer.name)) {
                (false, None) => {
                    return Err(Error::config(format!(
                        "missing bit-width for non-exempt layer `{}`",
                        layer.name
                    )))
                }
                (true, Some(_)) => {
                    return Err(Error::config(format!(
                        "exempt layer `{}` must not carry a bit-width",
                        layer.name
                    )))
                }
                (false, Some(&b)) if !(2..=32).contains(&b) => {
                    return Err(Error::config(format!(
                        "bit-width {b} for `{}` outside 2..=32",
                        layer.name
                    )))
                }
                _ => {}
            }
        }
        for name in self.bits.keys() {
            if params.layer(name).is_none() {
                return Err(Error::UnknownLayer(name.clone()));
            }
        }
        Ok(())
    }

    /// Average bits per non-exempt weight element.
    pub fn average_bits(&self, params: &ParamSet) -> f64 {
        let mut bits = 0.0;
        let mut n = 0.0;
        for l in params.quantizable() {
            let c = l.element_count() as f64;
            bits += c * self.bits.get(&l.name).copied().unwrap_or(32) as f64;
            n += c;
        }
        if n == 0.0 {
            0.0
        } else {
            bits / n
        }
    }
}

/// Parameter view whose non-exempt weights are replaced by their quantized
/// values. Gradients taken at this view are the straight-through gradients
/// for the master weights.
pub fn fake_quant(params: &ParamSet, config: &QuantConfig) -> Result<ParamSet> {
    config.validate(params)?;
    let mut out = params.clone();
    for layer in out.layers_mut() {
        if layer.exempt {
            continue;
        }
        let bits = config.bits[&layer.name];
        let q = |t: &Tensor| match config.scale_policy {
            ScalePolicy::Recompute => quantize_tensor(t, bits),
            ScalePolicy::Frozen => {
                let m = config
                    .frozen_max
                    .get(&layer.name)
                    .copied()
                    .unwrap_or_else(|| t.max_abs());
                Tensor::from_vec(t.shape(), quantize_with_max(t.data(), bits, m))
            }
        };
        layer.weight = q(&layer.weight);
        if config.quantize_bias {
            if let Some(b) = &layer.bias {
                layer.bias = Some(quantize_tensor(b, bits));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_bit_example() {
        let q = quantize(&[-1.0, 0.5], 4);
        assert_eq!(q[0], -1.0);
        assert!((q[1] - 4.0 / 7.0).abs() < 1e-15);
        let d = quant_error(&[-1.0, 0.5], 4);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 1.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = 1.0 / 7.0;
        let theta: Vec<f64> = [-7, -3, 0, 2, 5].iter().map(|&k| k as f64 * s).collect();
        let q = quantize(&theta, 4);
        for (a, b) in q.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(quant_error(&theta, 4).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn all_zero_is_unchanged() {
        assert_eq!(quantize(&[0.0, 0.0], 3), vec![0.0, 0.0]);
    }

    #[test]
    fn thirty_two_bits_is_nearly_lossless() {
        let theta = [0.123, -0.987, 0.5];
        let e = quant_error(&theta, 32);
        assert!(e.iter().all(|d| d.abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn quantizer_algebra(theta in prop::collection::vec(-1.0f64..1.0, 1..40), bits in 3u32..=8) {
            let q = quantize(&theta, bits);
            prop_assert_eq!(quantize(&q, bits), q.clone());
            let neg: Vec<f64> = theta.iter().map(|x| -x).collect();
            let qn = quantize(&neg, bits);
            for (a, b) in qn.iter().zip(&q) {
                prop_assert_eq!(*a, -*b);
            }
            let s = step_size(&theta, bits);
            for d in quant_error(&theta, bits) {
                prop_assert!(d.abs() <= s / 2.0 + 1e-15);
            }
            let mut levels: Vec<i64> = q.iter().map(|x| (x / s.max(f64::MIN_POSITIVE)).round() as i64).collect();
            levels.sort_unstable();
            levels.dedup();
            prop_assert!(levels.len() as u64 <= (1u64 << bits) - 1);
        }
    }
}
