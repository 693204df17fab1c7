//! Compression metrics, losses, and target schedules.
//!
//! The expected weight compression rate is 32 * total weights / expected
//! quantized bits; the hinge loss penalizes falling short of the target rate
//! and vanishes (with zero gradient) once the target is met. Activation
//! bit-widths are not learned: a memory budget for the largest single tensor
//! pins each feature map's bits directly.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::hmq::{HmqState, SearchSpace};
use crate::tensor::Tensor;

pub const FLOAT_BITS: f64 = 32.0;
/// 8-bit ceiling on weights and activations puts a floor of 4 on both rates.
pub const MIN_COMPRESSION_RATE: f64 = 4.0;
/// Number of cycles over which targets ramp from 4 to their final values.
pub const RAMP_CYCLES: usize = 4;

#[derive(Debug, Clone)]
pub struct CompressionTargets {
    pub weight_rate: f64,
    pub activation_rate: f64,
    pub activation_budget_bits: u64,
    pub lambda: f64,
}

impl CompressionTargets {
    pub fn new(weight_rate: f64, activation_rate: f64, activation_budget_bits: u64, lambda: f64) -> Result<Self> {
        if weight_rate < MIN_COMPRESSION_RATE {
            return Err(Error::invalid(format!(
                "weight compression target {weight_rate} below the 8-bit floor of {MIN_COMPRESSION_RATE}"
            )));
        }
        if activation_rate < MIN_COMPRESSION_RATE {
            return Err(Error::invalid(format!(
                "activation compression target {activation_rate} below the 8-bit floor of {MIN_COMPRESSION_RATE}"
            )));
        }
        Ok(CompressionTargets {
            weight_rate,
            activation_rate,
            activation_budget_bits,
            lambda,
        })
    }
}

/// Expected weight compression rate from Gumbel-perturbed joints (f64 path).
pub fn expected_wcr(blocks: &[(&HmqState, &SearchSpace, usize)]) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::invalid("expected_wcr needs at least one weight tensor"));
    }
    let mut total = 0.0f64;
    let mut quantized = 0.0f64;
    for (state, space, numel) in blocks {
        let marginal = state.bit_marginal(space)?;
        let expected_bits: f64 = marginal
            .iter()
            .zip(space.bit_widths())
            .map(|(&p, &b)| p * b as f64)
            .sum();
        total += *numel as f64;
        quantized += expected_bits * *numel as f64;
    }
    Ok(FLOAT_BITS * total / quantized)
}

/// Compression rate from frozen argmax choices.
pub fn actual_wcr(choices: &[(u8, usize)]) -> Result<f64> {
    if choices.is_empty() {
        return Err(Error::invalid("actual_wcr needs at least one weight tensor"));
    }
    let total: f64 = choices.iter().map(|&(_, n)| n as f64).sum();
    let quantized: f64 = choices.iter().map(|&(b, n)| b as f64 * n as f64).sum();
    Ok(FLOAT_BITS * total / quantized)
}

/// Hinge toward the target rate: max(0, target - rate) / target.
pub fn compression_loss(rate: f64, target: f64) -> f64 {
    (target - rate).max(0.0) / target
}

/// Total objective: task loss plus lambda * hinge^2.
pub fn total_loss(task: f64, hinge: f64, lambda: f64) -> f64 {
    task + lambda * hinge * hinge
}

/// Maximum bits per element for a tensor under the budget, capped at 8.
pub fn activation_bits(numel: usize, budget_bits: u64) -> Result<u8> {
    if numel == 0 {
        return Err(Error::invalid("activation tensor is empty"));
    }
    let raw = budget_bits / numel as u64;
    if raw < 1 {
        return Err(Error::InfeasibleBudget {
            tensor: String::new(),
            size: numel,
            budget: budget_bits,
        });
    }
    Ok(raw.min(8) as u8)
}

/// Target activation compression rate implied by the budget.
pub fn activation_rate(sizes: &[usize], budget_bits: u64) -> Result<f64> {
    let max = sizes
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("activation_rate needs at least one tensor"))?;
    if budget_bits == 0 {
        return Err(Error::invalid("activation budget must be positive"));
    }
    Ok(FLOAT_BITS * *max as f64 / budget_bits as f64)
}

/// Budget that realizes a requested activation compression rate.
pub fn budget_for_rate(sizes: &[usize], rate: f64) -> Result<u64> {
    let max = sizes
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("budget_for_rate needs at least one tensor"))?;
    if rate < MIN_COMPRESSION_RATE {
        return Err(Error::invalid(format!(
            "activation compression rate {rate} below the 8-bit floor of {MIN_COMPRESSION_RATE}"
        )));
    }
    Ok((FLOAT_BITS * *max as f64 / rate).floor() as u64)
}

/// Per-cycle targets: both rates start at 4 and climb in equal steps during
/// the first `RAMP_CYCLES` cycles, holding the final values afterwards.
pub fn ramp_targets(cycle: usize, final_weight_rate: f64, final_activation_rate: f64) -> (f64, f64) {
    let f = cycle.min(RAMP_CYCLES) as f64 / RAMP_CYCLES as f64;
    let w = MIN_COMPRESSION_RATE + (final_weight_rate - MIN_COMPRESSION_RATE) * f;
    let a = MIN_COMPRESSION_RATE + (final_activation_rate - MIN_COMPRESSION_RATE) * f;
    (w, a)
}

/// Build the expected compression rate into the graph from the per-block
/// probability nodes of this pass. Returns the rate node.
pub fn expected_wcr_node(g: &mut Graph, blocks: &[(TensorId, &SearchSpace, usize)]) -> Result<TensorId> {
    if blocks.is_empty() {
        return Err(Error::invalid("expected_wcr needs at least one weight tensor"));
    }
    let mut denom: Option<TensorId> = None;
    let mut total = 0.0f64;
    for (probs, space, numel) in blocks {
        let grid: Vec<f32> = space.bit_grid().iter().map(|&b| b * *numel as f32).collect();
        let weights = g.constant(Tensor::from_vec(grid));
        let weighted = g.mul(*probs, weights)?;
        let bits = g.reduce_sum(weighted);
        denom = Some(match denom {
            None => bits,
            Some(d) => g.add(d, bits)?,
        });
        total += *numel as f64;
    }
    let numerator = g.scalar_const((FLOAT_BITS * total) as f32);
    g.div(numerator, denom.expect("nonempty"))
}

/// Attach the hinge loss and total objective to the graph:
/// J = task + lambda * (max(0, (R_w - rate)) / R_w)^2.
/// Returns (total, hinge) nodes.
pub fn attach_compression_loss(
    g: &mut Graph,
    task: TensorId,
    rate: TensorId,
    weight_target: f64,
    lambda: f64,
) -> Result<(TensorId, TensorId)> {
    if weight_target <= 0.0 {
        return Err(Error::invalid("weight compression target must be positive"));
    }
    let target = g.scalar_const(weight_target as f32);
    let shortfall = g.sub(target, rate)?;
    let zero = g.scalar_const(0.0);
    // zero first: ties at the hinge boundary keep a zero gradient
    let clipped = g.max(zero, shortfall)?;
    let hinge = g.div(clipped, target)?;
    let squared = g.mul(hinge, hinge)?;
    let lam = g.scalar_const(lambda as f32);
    let penalty = g.mul(squared, lam)?;
    let total = g.add(task, penalty)?;
    Ok((total, hinge))
}
