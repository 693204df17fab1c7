//! Uniform symmetric quantizers with power-of-two-friendly step sizes.
//!
//! Signed:    clip(d * round(x / d), -(t - d), t)
//! Unsigned:  clip(d * round(x / d), 0, t - d)
//!
//! Rounding breaks halves away from zero. Inside the graph, the rounding node
//! is a straight-through estimator, so the gradient with respect to x is 1
//! exactly where the pre-clip value lies inside the clip interval (boundaries
//! included) and 0 outside; the clipped region's gradient flows into the
//! bound expressions, i.e. into the step size and threshold.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// A concrete quantization scheme: threshold, bit-width, signedness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    pub threshold: f32,
    pub bits: u8,
    pub signed: bool,
}

impl QuantScheme {
    pub fn new(threshold: f32, bits: u8, signed: bool) -> Result<Self> {
        if threshold <= 0.0 || !threshold.is_finite() {
            return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
        }
        if bits == 0 {
            return Err(Error::invalid("bit-width must be at least 1"));
        }
        Ok(QuantScheme { threshold, bits, signed })
    }

    /// Constant gap between adjacent levels: 2t/2^b signed, t/2^b unsigned.
    pub fn step_size(&self) -> f32 {
        step_size(self.threshold, self.bits, self.signed)
    }

    pub fn clip_lo(&self) -> f32 {
        if self.signed {
            -(self.threshold - self.step_size())
        } else {
            0.0
        }
    }

    pub fn clip_hi(&self) -> f32 {
        if self.signed {
            self.threshold
        } else {
            self.threshold - self.step_size()
        }
    }
}

pub fn step_size(threshold: f32, bits: u8, signed: bool) -> f32 {
    let levels = (1u64 << bits) as f32;
    if signed {
        2.0 * threshold / levels
    } else {
        threshold / levels
    }
}

fn check_params(op: &'static str, delta: f32, threshold: f32, signed: bool) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("{op}: step size must be positive, got {delta}")));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::invalid(format!("{op}: threshold must be positive, got {threshold}")));
    }
    let limit = if signed { 2.0 * threshold } else { threshold };
    if delta > limit {
        return Err(Error::invalid(format!(
            "{op}: step size {delta} exceeds {limit} for threshold {threshold}"
        )));
    }
    Ok(())
}

/// Elementwise signed quantization of a plain tensor (no graph).
pub fn quantize_signed_value(x: &Tensor, delta: f32, threshold: f32) -> Result<Tensor> {
    check_params("quantize_signed", delta, threshold, true)?;
    let lo = delta - threshold;
    let hi = threshold;
    let data = x
        .data()
        .iter()
        .map(|&v| (delta * (v / delta).round()).max(lo).min(hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Elementwise unsigned quantization of a plain tensor (no graph).
pub fn quantize_unsigned_value(x: &Tensor, delta: f32, threshold: f32) -> Result<Tensor> {
    check_params("quantize_unsigned", delta, threshold, false)?;
    let hi = threshold - delta;
    let data = x
        .data()
        .iter()
        .map(|&v| (delta * (v / delta).round()).max(0.0).min(hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn check_scalar(g: &Graph, op: &'static str, id: TensorId) -> Result<()> {
    if g.numel(id) != 1 {
        return Err(Error::shape(op, format!("expected scalar, got {:?}", g.shape(id))));
    }
    Ok(())
}

/// Signed quantizer as graph ops; `delta` and `threshold` are scalar nodes.
pub fn quantize_signed(g: &mut Graph, x: TensorId, delta: TensorId, threshold: TensorId) -> Result<TensorId> {
    check_scalar(g, "quantize_signed", delta)?;
    check_scalar(g, "quantize_signed", threshold)?;
    check_params("quantize_signed", g.item(delta), g.item(threshold), true)?;
    let scaled = g.div(x, delta)?;
    let rounded = g.ste_round(scaled);
    let pre_clip = g.mul(rounded, delta)?;
    // -(t - d) == d - t
    let lo = g.sub(delta, threshold)?;
    let lower = g.max(pre_clip, lo)?;
    g.min(lower, threshold)
}

/// Unsigned quantizer as graph ops.
pub fn quantize_unsigned(g: &mut Graph, x: TensorId, delta: TensorId, threshold: TensorId) -> Result<TensorId> {
    check_scalar(g, "quantize_unsigned", delta)?;
    check_scalar(g, "quantize_unsigned", threshold)?;
    check_params("quantize_unsigned", g.item(delta), g.item(threshold), false)?;
    let scaled = g.div(x, delta)?;
    let rounded = g.ste_round(scaled);
    let pre_clip = g.mul(rounded, delta)?;
    let zero = g.scalar_const(0.0);
    let lower = g.max(pre_clip, zero)?;
    let hi = g.sub(threshold, delta)?;
    g.min(lower, hi)
}

/// Reference quantizer used for verification: walks the integer level grid
/// instead of clipping float values. Enumerates the 2^b representable levels
/// and returns the one selected by round-then-clamp on the level index.
pub fn oracle_quantize(x: f32, scheme: &QuantScheme) -> f32 {
    let delta = scheme.step_size();
    let half_levels = 1i64 << (scheme.bits - 1);
    let (idx_lo, idx_hi) = if scheme.signed {
        (-(half_levels - 1), half_levels)
    } else {
        (0, (1i64 << scheme.bits) - 1)
    };
    let grid: Vec<f32> = (idx_lo..=idx_hi).map(|k| delta * k as f32).collect();
    debug_assert_eq!(grid.len(), 1 << scheme.bits);
    let k = (x / delta).round() as i64;
    let k = k.clamp(idx_lo, idx_hi);
    grid[(k - idx_lo) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q_signed(x: f32, t: f32, b: u8) -> f32 {
        let d = step_size(t, b, true);
        quantize_signed_value(&Tensor::scalar(x), d, t).unwrap().item()
    }

    fn q_unsigned(x: f32, t: f32, b: u8) -> f32 {
        let d = step_size(t, b, false);
        quantize_unsigned_value(&Tensor::scalar(x), d, t).unwrap().item()
    }

    #[test]
    fn signed_examples() {
        // t=1, b=2 -> d=0.5
        assert_eq!(q_signed(0.3, 1.0, 2), 0.5);
        assert_eq!(q_signed(-0.9, 1.0, 2), -0.5); // clipped at -(t-d)
        assert_eq!(q_signed(0.0, 1.0, 5), 0.0);
    }

    #[test]
    fn unsigned_examples() {
        // t=1, b=2 -> d=0.25
        assert_eq!(q_unsigned(0.8, 1.0, 2), 0.75); // clipped at t-d
        assert_eq!(q_unsigned(-0.3, 1.0, 2), 0.0);
        assert_eq!(q_unsigned(0.26, 1.0, 2), 0.25);
    }

    #[test]
    fn oracle_grids() {
        // signed t=1, b=1 -> d=1, grid {0, 1}
        let s = QuantScheme::new(1.0, 1, true).unwrap();
        let outs: Vec<f32> = [-2.0f32, -0.4, 0.4, 0.6, 2.0].iter().map(|&x| oracle_quantize(x, &s)).collect();
        for o in &outs {
            assert!(*o == 0.0 || *o == 1.0);
        }
        assert_eq!(oracle_quantize(2.0, &s), 1.0);
        assert_eq!(oracle_quantize(-2.0, &s), 0.0);

        // unsigned t=2, b=2 -> d=0.5, grid {0, 0.5, 1.0, 1.5}
        let u = QuantScheme::new(2.0, 2, false).unwrap();
        for (x, want) in [(-1.0, 0.0), (0.6, 0.5), (1.1, 1.0), (9.0, 1.5)] {
            assert_eq!(oracle_quantize(x, &u), want);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(quantize_signed_value(&Tensor::scalar(0.0), 0.0, 1.0).is_err());
        assert!(quantize_signed_value(&Tensor::scalar(0.0), 0.5, -1.0).is_err());
        assert!(QuantScheme::new(1.0, 0, true).is_err());
    }

    #[test]
    fn graph_matches_value_path() {
        let mut g = Graph::new();
        let t = 1.0f32;
        for &b in &[1u8, 2, 3, 8] {
            let d = step_size(t, b, true);
            let xs: Vec<f32> = (0..200).map(|i| -2.0 + i as f32 * 0.02).collect();
            let x = g.constant(Tensor::from_vec(xs.clone()));
            let dd = g.scalar_const(d);
            let tt = g.scalar_const(t);
            let y = quantize_signed(&mut g, x, dd, tt).unwrap();
            let want = quantize_signed_value(&Tensor::from_vec(xs), d, t).unwrap();
            assert_eq!(g.data(y), want.data());
        }
    }

    #[test]
    fn ste_gradient_contract() {
        // gradient w.r.t. x: 1 where pre-clip value inside [-(t-d), t], else 0;
        // boundary counts as inside.
        let t = 1.0f32;
        let b = 2u8;
        let d = step_size(t, b, true); // 0.5
        let xs = vec![0.3f32, -0.9, 1.0, 1.3, -0.5, 0.75];
        // pre-clip: 0.5, -1.0(clip), 1.0(boundary), 1.5(clip), -0.5(boundary), 1.0? round(1.5)=2 -> 1.0 boundary
        let expect = [1.0f32, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(xs).with_grad());
        let dd = g.scalar_const(d);
        let tt = g.scalar_const(t);
        let y = quantize_signed(&mut g, x, dd, tt).unwrap();
        let loss = g.reduce_sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &expect);
    }

    #[test]
    fn clip_gradient_flows_to_bounds() {
        // x clipped above: d(loss)/d(threshold) = 1 through the hi bound
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(5.0));
        let dd = g.leaf(Tensor::scalar(0.5).with_grad());
        let tt = g.leaf(Tensor::scalar(1.0).with_grad());
        let y = quantize_signed(&mut g, x, dd, tt).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(tt).unwrap(), &[1.0]);
        assert_eq!(g.grad(dd).unwrap(), &[0.0]);
    }
}
