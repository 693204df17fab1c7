//! The trainable mixed-precision quantization block.
//!
//! Each block owns a logit matrix over a finite search space of
//! (threshold, bit-width) pairs, where thresholds are nine consecutive
//! powers of two. A Gumbel-Softmax over the logits yields a joint
//! distribution whose expected step size and expected threshold parametrize
//! the quantizer during training; at inference the argmax pair is used.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::quant;
use crate::rng::RunRng;
use crate::tensor::Tensor;

/// Number of thresholds in every search space: 2^M down to 2^(M-8).
pub const THRESHOLD_COUNT: usize = 9;

/// Temperature floor and decay rate of the annealing schedule.
pub const TEMPERATURE_FLOOR: f64 = 0.5;

/// Finite search space of quantization schemes for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    /// Descending thresholds 2^M, 2^(M-1), ..., 2^(M-8).
    thresholds: Vec<f32>,
    bit_widths: Vec<u8>,
    max_exponent: i32,
    signed: bool,
}

impl SearchSpace {
    pub fn new(max_exponent: i32, bit_widths: &[u8], signed: bool) -> Result<Self> {
        if bit_widths.is_empty() {
            return Err(Error::invalid("bit-width set must be nonempty"));
        }
        if bit_widths.iter().any(|&b| b < 1 || b > 8) {
            return Err(Error::invalid(format!("bit-widths must lie in 1..=8, got {:?}", bit_widths)));
        }
        if !(-100..=100).contains(&max_exponent) {
            return Err(Error::invalid(format!("threshold exponent {max_exponent} out of range")));
        }
        let mut bits = bit_widths.to_vec();
        bits.sort_unstable();
        bits.dedup();
        let thresholds = (0..THRESHOLD_COUNT)
            .map(|k| (max_exponent - k as i32) as f64)
            .map(|e| (e.exp2()) as f32)
            .collect();
        Ok(SearchSpace {
            thresholds,
            bit_widths: bits,
            max_exponent,
            signed,
        })
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn bit_widths(&self) -> &[u8] {
        &self.bit_widths
    }

    pub fn max_exponent(&self) -> i32 {
        self.max_exponent
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn len(&self) -> usize {
        self.thresholds.len() * self.bit_widths.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Step size of the (threshold index, bit index) pair.
    pub fn step(&self, ti: usize, bi: usize) -> f32 {
        quant::step_size(self.thresholds[ti], self.bit_widths[bi], self.signed)
    }

    pub fn scheme(&self, ti: usize, bi: usize) -> quant::QuantScheme {
        quant::QuantScheme {
            threshold: self.thresholds[ti],
            bits: self.bit_widths[bi],
            signed: self.signed,
        }
    }

    /// Flattened (row-major over thresholds x bits) step-size grid.
    fn step_grid(&self) -> Vec<f32> {
        let mut grid = Vec::with_capacity(self.len());
        for ti in 0..self.thresholds.len() {
            for bi in 0..self.bit_widths.len() {
                grid.push(self.step(ti, bi));
            }
        }
        grid
    }

    fn threshold_grid(&self) -> Vec<f32> {
        let mut grid = Vec::with_capacity(self.len());
        for &t in &self.thresholds {
            for _ in 0..self.bit_widths.len() {
                grid.push(t);
            }
        }
        grid
    }

    pub(crate) fn bit_grid(&self) -> Vec<f32> {
        let mut grid = Vec::with_capacity(self.len());
        for _ in 0..self.thresholds.len() {
            for &b in &self.bit_widths {
                grid.push(b as f32);
            }
        }
        grid
    }
}

/// Minimal integer exponent with 2^M >= x, for x > 0.
pub fn min_pow2_exponent(x: f32) -> Result<i32> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("need a positive finite maximum, got {x}")));
    }
    let mut m = (x as f64).log2().ceil() as i32;
    // guard against float rounding on exact powers of two
    while (m as f64).exp2() < x as f64 {
        m += 1;
    }
    while m > i32::MIN && ((m - 1) as f64).exp2() >= x as f64 {
        m -= 1;
    }
    Ok(m)
}

/// Search space for a weight tensor: M anchored to max |theta|, signed.
pub fn build_weight_search_space(theta: &Tensor, bit_widths: &[u8]) -> Result<SearchSpace> {
    if theta.numel() == 0 {
        return Err(Error::invalid("weight tensor is empty"));
    }
    let max_abs = theta.max_abs();
    if max_abs == 0.0 {
        return Err(Error::invalid(
            "weight tensor is all zeros; threshold exponent undefined",
        ));
    }
    SearchSpace::new(min_pow2_exponent(max_abs)?, bit_widths, true)
}

/// Search space for an activation tensor: M anchored to the calibrated
/// maximum, single bit-width capped at 8.
pub fn build_activation_search_space(max_act: f32, bits: u8, signed: bool) -> Result<SearchSpace> {
    if !(max_act > 0.0) {
        return Err(Error::invalid(format!(
            "calibrated activation maximum must be positive, got {max_act}"
        )));
    }
    let capped = bits.min(8).max(1);
    SearchSpace::new(min_pow2_exponent(max_act)?, &[capped], signed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmqMode {
    Training,
    Frozen,
}

/// Trainable state of one quantization block.
#[derive(Debug, Clone)]
pub struct HmqState {
    /// Logit matrix, |T| x |B| row-major.
    pub pi: Tensor,
    /// Gumbel(0,1) samples from the latest training forward pass.
    pub gumbel: Vec<f32>,
    pub temperature: f32,
    pub mode: HmqMode,
    /// Argmax (threshold index, bit index) once frozen.
    pub frozen_choice: Option<(usize, usize)>,
}

/// Initial state: probability 0.9 on (max threshold, max bit-width) and the
/// remaining 0.1 spread uniformly.
pub fn init_pi(space: &SearchSpace) -> HmqState {
    let rows = space.thresholds().len();
    let cols = space.bit_widths().len();
    let k = rows * cols;
    let rest = 0.1 / (k - 1) as f64;
    let mut logits = vec![(rest.ln()) as f32; k];
    // thresholds are stored descending, so row 0 is the max threshold;
    // bit-widths ascending, so the last column is the max bit-width.
    logits[cols - 1] = (0.9f64.ln()) as f32;
    HmqState {
        pi: Tensor::new(vec![rows, cols], logits).expect("grid sized").with_grad(),
        gumbel: vec![0.0; k],
        temperature: 1.0,
        mode: HmqMode::Training,
        frozen_choice: None,
    }
}

impl HmqState {
    /// Class probabilities softmax(pi), in f64.
    pub fn pi_hat(&self) -> Vec<f64> {
        stable_softmax(self.pi.data())
    }

    /// Argmax entry of pi; ties prefer larger bit-width, then larger threshold.
    pub fn argmax(&self, space: &SearchSpace) -> (usize, usize) {
        let cols = space.bit_widths().len();
        let data = self.pi.data();
        let mut best = (0usize, 0usize);
        let mut best_v = f32::NEG_INFINITY;
        for ti in 0..space.thresholds().len() {
            for bi in 0..cols {
                let v = data[ti * cols + bi];
                let better = v > best_v
                    || (v == best_v
                        && (space.bit_widths()[bi] > space.bit_widths()[best.1]
                            || (space.bit_widths()[bi] == space.bit_widths()[best.1]
                                && space.thresholds()[ti] > space.thresholds()[best.0])));
                if better {
                    best_v = v;
                    best = (ti, bi);
                }
            }
        }
        best
    }

    /// Switch to the argmax scheme for phase 2 and inference.
    pub fn freeze(&mut self, space: &SearchSpace) -> (usize, usize) {
        let choice = self.argmax(space);
        self.mode = HmqMode::Frozen;
        self.frozen_choice = Some(choice);
        choice
    }

    pub fn frozen_scheme(&self, space: &SearchSpace) -> Option<quant::QuantScheme> {
        self.frozen_choice.map(|(ti, bi)| space.scheme(ti, bi))
    }

    /// Bit-width marginal of the current Gumbel-perturbed joint, in f64.
    pub fn bit_marginal(&self, space: &SearchSpace) -> Result<Vec<f64>> {
        let p = joint_probs(self)?;
        let cols = space.bit_widths().len();
        let mut marg = vec![0.0f64; cols];
        for (i, v) in p.iter().enumerate() {
            marg[i % cols] += v;
        }
        Ok(marg)
    }
}

fn stable_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Gumbel-Softmax joint distribution over the search space:
/// P[t,b] = exp((log pi_hat[t,b] + g[t,b]) / tau) / sum over all pairs.
///
/// Computed in f64 from the stored logits and the samples of the latest
/// forward pass. The in-graph training path mirrors this in f32.
pub fn joint_probs(state: &HmqState) -> Result<Vec<f64>> {
    if !(state.temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {}",
            state.temperature
        )));
    }
    let tau = state.temperature as f64;
    let log_pi_hat = log_softmax_f64(state.pi.data());
    let z: Vec<f64> = log_pi_hat
        .iter()
        .zip(&state.gumbel)
        .map(|(&lp, &g)| (lp + g as f64) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let denom: f64 = logits.iter().map(|&v| (v as f64 - m).exp()).sum();
    let log_denom = denom.ln();
    logits.iter().map(|&v| v as f64 - m - log_denom).collect()
}

/// Expected step size under the joint distribution.
pub fn expected_delta(state: &HmqState, space: &SearchSpace) -> Result<f64> {
    let p = joint_probs(state)?;
    Ok(p.iter()
        .zip(space.step_grid())
        .map(|(&pv, dv)| pv * dv as f64)
        .sum())
}

/// Expected threshold under the threshold marginal.
pub fn expected_threshold(state: &HmqState, space: &SearchSpace) -> Result<f64> {
    let p = joint_probs(state)?;
    Ok(p.iter()
        .zip(space.threshold_grid())
        .map(|(&pv, tv)| pv * tv as f64)
        .sum())
}

/// Temperature after `updates` annealing steps within a cycle:
/// max(exp(-i * e^-2), 0.5).
pub fn anneal_temperature(updates: u64) -> f32 {
    let r = (-2.0f64).exp();
    (-(updates as f64) * r).exp().max(TEMPERATURE_FLOOR) as f32
}

/// Differentiable pieces produced by one training-mode forward pass.
pub struct HmqPass {
    pub output: TensorId,
    /// Joint probabilities node, flattened |T|*|B|.
    pub probs: Option<TensorId>,
    pub expected_delta: Option<TensorId>,
    pub expected_threshold: Option<TensorId>,
}

/// In-graph Gumbel-Softmax joint plus the expected step size and threshold,
/// all differentiable with respect to the `pi` node.
pub fn expectation_nodes(
    g: &mut Graph,
    pi_node: TensorId,
    gumbel: &[f32],
    tau: f32,
    space: &SearchSpace,
) -> Result<(TensorId, TensorId, TensorId)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let k = space.len();
    if gumbel.len() != k {
        return Err(Error::shape(
            "expectation_nodes",
            format!("{} gumbel samples for a {}-scheme space", gumbel.len(), k),
        ));
    }
    let flat = g.reshape(pi_node, vec![k])?;
    let log_pi_hat = g.log_softmax(flat)?;
    let noise = g.constant(Tensor::from_vec(gumbel.to_vec()));
    let perturbed = g.add(log_pi_hat, noise)?;
    let tau_node = g.scalar_const(tau);
    let z = g.div(perturbed, tau_node)?;
    let probs = g.softmax(z)?;

    let step_grid = g.constant(Tensor::from_vec(space.step_grid()));
    let weighted_steps = g.mul(probs, step_grid)?;
    let delta = g.reduce_sum(weighted_steps);

    let threshold_grid = g.constant(Tensor::from_vec(space.threshold_grid()));
    let weighted_thresholds = g.mul(probs, threshold_grid)?;
    let threshold = g.reduce_sum(weighted_thresholds);
    Ok((probs, delta, threshold))
}

/// Quantize `x` through the block.
///
/// Training mode draws fresh Gumbel noise, forms the Gumbel-Softmax joint
/// from the `pi` node, and quantizes with the expected step size and
/// threshold. Frozen mode quantizes with the argmax scheme deterministically.
pub fn hmq_forward(
    g: &mut Graph,
    x: TensorId,
    state: &mut HmqState,
    space: &SearchSpace,
    pi_node: Option<TensorId>,
    rng: &mut RunRng,
) -> Result<HmqPass> {
    match state.mode {
        HmqMode::Frozen => {
            let scheme = state
                .frozen_scheme(space)
                .ok_or_else(|| Error::invalid("frozen block has no argmax choice"))?;
            let delta = g.scalar_const(scheme.step_size());
            let threshold = g.scalar_const(scheme.threshold);
            let output = if space.signed() {
                quant::quantize_signed(g, x, delta, threshold)?
            } else {
                quant::quantize_unsigned(g, x, delta, threshold)?
            };
            Ok(HmqPass {
                output,
                probs: None,
                expected_delta: None,
                expected_threshold: None,
            })
        }
        HmqMode::Training => {
            let pi_node = pi_node.ok_or_else(|| Error::invalid("training forward needs the pi node"))?;
            state.gumbel = rng.gumbel_vec(space.len());
            let (probs, delta, threshold) =
                expectation_nodes(g, pi_node, &state.gumbel, state.temperature, space)?;
            let output = if space.signed() {
                quant::quantize_signed(g, x, delta, threshold)?
            } else {
                quant::quantize_unsigned(g, x, delta, threshold)?
            };
            Ok(HmqPass {
                output,
                probs: Some(probs),
                expected_delta: Some(delta),
                expected_threshold: Some(threshold),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_with(bits: &[u8]) -> SearchSpace {
        SearchSpace::new(0, bits, true).unwrap()
    }

    #[test]
    fn weight_space_exponents() {
        let mk = |v: f32| {
            let t = Tensor::from_vec(vec![v, -v / 2.0]);
            build_weight_search_space(&t, &[2, 8]).unwrap().max_exponent()
        };
        assert_eq!(mk(0.7), 0);
        assert_eq!(mk(1.0), 0); // 2^0 >= 1 holds exactly
        assert_eq!(mk(5.3), 3);
        assert_eq!(mk(0.3), -1); // 2^-1 = 0.5 covers 0.3, 2^-2 does not
    }

    #[test]
    fn min_pow2_edges() {
        assert_eq!(min_pow2_exponent(1.0).unwrap(), 0);
        assert_eq!(min_pow2_exponent(0.5).unwrap(), -1);
        assert_eq!(min_pow2_exponent(0.50001).unwrap(), 0);
        assert_eq!(min_pow2_exponent(8.0).unwrap(), 3);
        assert_eq!(min_pow2_exponent(8.0001).unwrap(), 4);
        assert!(min_pow2_exponent(0.0).is_err());
        assert!(min_pow2_exponent(-3.0).is_err());
    }

    #[test]
    fn all_zero_weights_rejected() {
        let t = Tensor::from_vec(vec![0.0; 4]);
        assert!(build_weight_search_space(&t, &[8]).is_err());
    }

    #[test]
    fn threshold_set_is_nine_powers_of_two() {
        let s = space_with(&[2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(s.thresholds().len(), THRESHOLD_COUNT);
        assert_eq!(s.thresholds()[0], 1.0);
        assert_eq!(s.thresholds()[8], 1.0 / 256.0);
        for &t in s.thresholds() {
            assert_eq!(t.log2().fract(), 0.0);
        }
    }

    #[test]
    fn activation_space_caps_bits() {
        let s = build_activation_search_space(6.0, 12, false).unwrap();
        assert_eq!(s.max_exponent(), 3);
        assert_eq!(s.bit_widths(), &[8]);
        let s = build_activation_search_space(0.9, 8, false).unwrap();
        assert_eq!(s.max_exponent(), 0);
        assert!(build_activation_search_space(0.0, 8, false).is_err());
    }

    #[test]
    fn init_pi_distribution() {
        let space = space_with(&[2, 3, 4, 5, 6, 7, 8]);
        let state = init_pi(&space);
        let p = state.pi_hat();
        assert_eq!(p.len(), 63);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // max: row 0 (largest threshold), last column (largest bit-width);
        // logits are f32, so the target probabilities come back at f32 precision
        assert!((p[6] - 0.9).abs() < 1e-6);
        for (i, &v) in p.iter().enumerate() {
            if i != 6 {
                assert!((v - 0.1 / 62.0).abs() < 1e-8);
            }
        }
        assert_eq!(state.argmax(&space), (0, 6));
    }

    #[test]
    fn joint_probs_uniform_cases() {
        let space = space_with(&[2, 8]);
        let k = space.len();
        let mut state = init_pi(&space);
        state.pi = Tensor::new(vec![9, 2], vec![0.25; k]).unwrap().with_grad();
        state.gumbel = vec![0.0; k];
        state.temperature = 1.7;
        let p = joint_probs(&state).unwrap();
        for &v in &p {
            assert!((v - 1.0 / k as f64).abs() < 1e-12);
        }
        // large temperature flattens any logits toward uniform
        state.pi = Tensor::new(vec![9, 2], (0..k).map(|i| i as f32 * 0.05).collect()).unwrap();
        state.temperature = 1e6;
        let p = joint_probs(&state).unwrap();
        for &v in &p {
            assert!((v - 1.0 / k as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let space = space_with(&[2, 8]);
        let mut rng = RunRng::new(11);
        let mut state = init_pi(&space);
        state.gumbel = rng.gumbel_vec(space.len());
        state.temperature = 0.01;
        let p = joint_probs(&state).unwrap();
        let log_pi_hat: Vec<f64> = {
            let ph = state.pi_hat();
            ph.iter().map(|v| v.ln()).collect()
        };
        let scores: Vec<f64> = log_pi_hat
            .iter()
            .zip(&state.gumbel)
            .map(|(&lp, &g)| lp + g as f64)
            .collect();
        let arg = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(p[arg] >= 0.99);
    }

    #[test]
    fn joint_probs_rejects_bad_temperature() {
        let space = space_with(&[8]);
        let mut state = init_pi(&space);
        state.temperature = 0.0;
        assert!(joint_probs(&state).is_err());
    }

    #[test]
    fn expected_values_hand_checked() {
        // T = {1} effective via one-hot rows is awkward; use degenerate logits.
        let space = space_with(&[2, 8]);
        let mut state = init_pi(&space);
        // one-hot on (t=1 -> row 0, b=2 -> col 0)
        let mut logits = vec![-1e4f32; space.len()];
        logits[0] = 0.0;
        state.pi = Tensor::new(vec![9, 2], logits).unwrap();
        state.gumbel = vec![0.0; space.len()];
        state.temperature = 1.0;
        let d = expected_delta(&state, &space).unwrap();
        assert!((d - 0.5).abs() < 1e-9);
        let t = expected_threshold(&state, &space).unwrap();
        assert!((t - 1.0).abs() < 1e-9);

        // even split between (1,2) and (1,8): (0.5 + 2/256)/2
        let mut logits = vec![-1e4f32; space.len()];
        logits[0] = 0.0;
        logits[1] = 0.0;
        state.pi = Tensor::new(vec![9, 2], logits).unwrap();
        let d = expected_delta(&state, &space).unwrap();
        assert!((d - 0.25390625).abs() < 1e-9);
    }

    #[test]
    fn expected_threshold_marginal() {
        // two thresholds 2 and 1 with marginals 0.75 / 0.25 -> 1.75
        let space = SearchSpace::new(1, &[4], true).unwrap();
        let mut state = init_pi(&space);
        let mut logits = vec![-1e4f32; 9];
        logits[0] = (0.75f64.ln()) as f32;
        logits[1] = (0.25f64.ln()) as f32;
        state.pi = Tensor::new(vec![9, 1], logits).unwrap();
        state.gumbel = vec![0.0; 9];
        state.temperature = 1.0;
        let t = expected_threshold(&state, &space).unwrap();
        assert!((t - 1.75).abs() < 1e-6);
        let p = joint_probs(&state).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule_values() {
        assert_eq!(anneal_temperature(0), 1.0);
        let t2 = anneal_temperature(2);
        assert!((t2 as f64 - (-2.0 * (-2.0f64).exp()).exp()).abs() < 1e-6);
        assert!((t2 - 0.7629).abs() < 1e-3);
        assert_eq!(anneal_temperature(10), 0.5);
        assert_eq!(anneal_temperature(1000), 0.5);
        // non-increasing
        let mut prev = f32::INFINITY;
        for i in 0..20 {
            let t = anneal_temperature(i);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn freeze_takes_argmax_and_ties_prefer_bits() {
        let space = space_with(&[2, 8]);
        let mut state = init_pi(&space);
        assert_eq!(state.freeze(&space), (0, 1));
        assert_eq!(state.mode, HmqMode::Frozen);

        // exact tie between (row 3, col 0) and (row 1, col 1): bits win
        let mut logits = vec![-5.0f32; space.len()];
        logits[3 * 2] = 2.0;
        logits[1 * 2 + 1] = 2.0;
        state.pi = Tensor::new(vec![9, 2], logits.clone()).unwrap();
        assert_eq!(state.argmax(&space), (1, 1));

        // shift invariance
        let shifted: Vec<f32> = logits.iter().map(|v| v + 7.5).collect();
        state.pi = Tensor::new(vec![9, 2], shifted).unwrap();
        assert_eq!(state.argmax(&space), (1, 1));

        // same bits, tie across thresholds: larger threshold (smaller row) wins
        let mut logits = vec![-5.0f32; space.len()];
        logits[4 * 2] = 2.0;
        logits[2 * 2] = 2.0;
        state.pi = Tensor::new(vec![9, 2], logits).unwrap();
        assert_eq!(state.argmax(&space), (2, 0));
    }

    #[test]
    fn graph_path_matches_f64_reference() {
        let space = space_with(&[2, 3, 8]);
        let mut rng = RunRng::new(5);
        let mut state = init_pi(&space);
        // random-ish logits
        let logits: Vec<f32> = (0..space.len()).map(|_| (rng.normal() * 0.7) as f32).collect();
        state.pi = Tensor::new(vec![9, 3], logits).unwrap().with_grad();
        state.temperature = 0.8;

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.3, -0.2, 0.9]));
        let pi_node = g.leaf(state.pi.clone());
        let pass = hmq_forward(&mut g, x, &mut state, &space, Some(pi_node), &mut rng).unwrap();

        let p_ref = joint_probs(&state).unwrap();
        let p_graph = g.data(pass.probs.unwrap());
        for (a, &b) in p_ref.iter().zip(p_graph) {
            assert!((a - b as f64).abs() < 1e-5, "joint probs diverge: {a} vs {b}");
        }
        let d_ref = expected_delta(&state, &space).unwrap();
        assert!((d_ref - g.item(pass.expected_delta.unwrap()) as f64).abs() < 1e-5);
        let t_ref = expected_threshold(&state, &space).unwrap();
        assert!((t_ref - g.item(pass.expected_threshold.unwrap()) as f64).abs() < 1e-5);
    }

    #[test]
    fn frozen_forward_is_deterministic_composition() {
        let space = space_with(&[2, 8]);
        let mut state = init_pi(&space);
        state.freeze(&space); // (t=1, b=8)
        let mut rng = RunRng::new(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.3));
        let pass = hmq_forward(&mut g, x, &mut state, &space, None, &mut rng).unwrap();
        let want = quant::quantize_signed_value(&Tensor::scalar(0.3), 2.0 / 256.0, 1.0).unwrap();
        assert_eq!(g.data(pass.output), want.data());
        // no RNG consumption happened: two frozen passes agree bitwise
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::scalar(0.3));
        let pass2 = hmq_forward(&mut g2, x2, &mut state, &space, None, &mut rng).unwrap();
        assert_eq!(g.data(pass.output), g2.data(pass2.output));
    }

    #[test]
    fn training_one_hot_equals_frozen() {
        let space = space_with(&[2, 8]);
        let mut state = init_pi(&space);
        // effectively one-hot on (0, 1): huge logit gap survives any Gumbel draw
        let mut logits = vec![-2e3f32; space.len()];
        logits[1] = 2e3;
        state.pi = Tensor::new(vec![9, 2], logits).unwrap().with_grad();
        state.temperature = 0.5;
        let xs = Tensor::from_vec(vec![0.31, -0.77, 0.02]);

        let mut rng = RunRng::new(123);
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let pi_node = g.leaf(state.pi.clone());
        let pass = hmq_forward(&mut g, x, &mut state, &space, Some(pi_node), &mut rng).unwrap();

        let mut frozen = state.clone();
        frozen.freeze(&space);
        let scheme = frozen.frozen_scheme(&space).unwrap();
        let want = quant::quantize_signed_value(&xs, scheme.step_size(), scheme.threshold).unwrap();
        for (a, b) in g.data(pass.output).iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
