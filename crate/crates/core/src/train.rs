//! Two-phase fine-tuning.
//!
//! Phase 1 trains weights and block logits jointly over temperature cycles:
//! each cycle resets the Gumbel-Softmax temperature and anneals it, while
//! the weight/activation compression targets ramp from 4 to their final
//! values across the first four cycles. Phase 2 freezes every block at its
//! argmax scheme and fine-tunes the weights alone.

use crate::compression::{self, CompressionTargets};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::hmq::{self, SearchSpace};
use crate::metrics::{EpochMetrics, SchemeRow, StepMetrics};
use crate::model::{self, forward, insert_leaves, QuantMode, QuantModel};
use crate::optim::{RAdam, RAdamConfig};
use crate::rng::RunRng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    pub epochs_phase1: usize,
    pub cycles: usize,
    pub epochs_phase2: usize,
    pub lr_weights: f32,
    pub lr_hmq: f32,
    pub lambda: f64,
    pub target_wcr: f64,
    /// Final activation compression rate; mutually exclusive with the budget.
    pub target_acr: Option<f64>,
    /// Final activation memory budget in bits.
    pub activation_budget_bits: Option<u64>,
    pub weight_bits: Vec<u8>,
    pub batch_size: usize,
    pub temp_updates_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 3,
            pretrain_lr: 2e-3,
            epochs_phase1: 30,
            cycles: 6,
            epochs_phase2: 20,
            lr_weights: 1e-4,
            lr_hmq: 1e-4 * 1e3,
            lambda: 32.0,
            target_wcr: 8.0,
            target_acr: Some(4.0),
            activation_budget_bits: None,
            weight_bits: vec![2, 3, 4, 5, 6, 7, 8],
            batch_size: 64,
            temp_updates_per_epoch: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || self.epochs_phase1 % self.cycles != 0 {
            return Err(Error::invalid(format!(
                "phase-1 epochs ({}) must split evenly into cycles ({})",
                self.epochs_phase1, self.cycles
            )));
        }
        if self.lr_weights <= 0.0 || self.lr_hmq <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.temp_updates_per_epoch == 0 {
            return Err(Error::invalid("temperature updates per epoch must be positive"));
        }
        if self.weight_bits.is_empty() || self.weight_bits.iter().any(|&b| b < 1 || b > 8) {
            return Err(Error::invalid("weight bit-widths must be a nonempty subset of 1..=8"));
        }
        if self.target_acr.is_none() && self.activation_budget_bits.is_none() {
            return Err(Error::invalid(
                "either the activation compression rate or the budget must be set",
            ));
        }
        Ok(())
    }
}

/// Top-1 accuracy over a dataset. `Active` requires every block frozen so
/// the pass is deterministic.
pub fn evaluate(qm: &mut QuantModel, ds: &Dataset, batch_size: usize, mode: QuantMode) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if mode == QuantMode::Active && !qm.all_frozen() {
        return Err(Error::invalid("evaluation requires frozen blocks"));
    }
    let mut scratch = RunRng::new(0);
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (bx, by) = ds.batch(chunk, None);
        let mut g = Graph::new();
        let nodes = insert_leaves(&mut g, qm, false, false);
        let batch_node = g.constant(bx);
        let out = forward(&mut g, qm, &nodes, batch_node, mode, &mut scratch)?;
        let logits = g.data(out.logits);
        let classes = g.shape(out.logits)[1];
        for (row, &label) in logits.chunks(classes).zip(&by) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Deterministic quantized accuracy with the current argmax choices,
/// without disturbing training state.
pub fn eval_quantized(qm: &QuantModel, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut frozen = qm.clone();
    frozen.freeze_all();
    evaluate(&mut frozen, ds, batch_size, QuantMode::Active)
}

/// One float-model pass over the training split recording each activation
/// slot's maximum absolute value.
pub fn calibrate_activations(qm: &mut QuantModel, ds: &Dataset, batch_size: usize) -> Result<Vec<f32>> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot calibrate on an empty dataset"));
    }
    let mut scratch = RunRng::new(0);
    let mut maxima = vec![0.0f32; qm.model.act_slots.len()];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (bx, _) = ds.batch(chunk, None);
        let mut g = Graph::new();
        let nodes = insert_leaves(&mut g, qm, false, false);
        let batch_node = g.constant(bx);
        let out = forward(&mut g, qm, &nodes, batch_node, QuantMode::Bypass, &mut scratch)?;
        for (m, &id) in maxima.iter_mut().zip(&out.act_values) {
            for &v in g.data(id) {
                *m = m.max(v.abs());
            }
        }
    }
    Ok(maxima)
}

pub struct PretrainOutcome {
    pub epoch_metrics: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub optimizer: RAdam,
}

/// Plain float training of the un-instrumented model.
pub fn pretrain(
    qm: &mut QuantModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RunRng,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut opt = RAdam::new(RAdamConfig::with_lr(cfg.pretrain_lr), &qm.model.param_sizes());
    let mut epoch_metrics = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = train.batch(chunk, Some(rng));
            let mut g = Graph::new();
            let nodes = insert_leaves(&mut g, qm, true, false);
            let batch_node = g.constant(bx);
            let out = forward(&mut g, qm, &nodes, batch_node, QuantMode::Bypass, rng)?;
            let loss = g.cross_entropy_with_logits(out.logits, &by)?;
            g.backward(loss)?;
            loss_sum += g.item(loss) as f64;
            batches += 1;
            apply_step(qm, &g, &nodes.params, &mut opt, "pretrain")?;
        }
        let acc = evaluate(qm, test, cfg.batch_size, QuantMode::Bypass)?;
        epoch_metrics.push(EpochMetrics {
            epoch,
            phase: 0,
            cycle: 0,
            mean_task_loss: loss_sum / batches.max(1) as f64,
            test_accuracy: acc,
        });
    }
    let final_accuracy = evaluate(qm, test, cfg.batch_size, QuantMode::Bypass)?;
    Ok(PretrainOutcome {
        epoch_metrics,
        final_accuracy,
        optimizer: opt,
    })
}

fn apply_step(qm: &mut QuantModel, g: &Graph, param_nodes: &[TensorId], opt: &mut RAdam, what: &str) -> Result<()> {
    let grads: Vec<Option<&[f32]>> = param_nodes.iter().map(|&id| g.grad(id)).collect();
    let mut slices: Vec<&mut [f32]> = qm.model.params.iter_mut().map(|p| p.tensor.data_mut()).collect();
    opt.step(&mut slices, &grads).map_err(|e| match e {
        Error::NonFiniteGradient { param } => Error::NonFiniteGradient {
            param: format!("{what} {param}"),
        },
        other => other,
    })
}

pub struct QuantizeOutcome {
    pub step_metrics: Vec<StepMetrics>,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub quantized_accuracy: f64,
    pub final_expected_wcr: f64,
    pub final_actual_wcr: f64,
    pub final_acr: f64,
    pub targets: CompressionTargets,
    pub weight_optimizer: RAdam,
    pub pi_optimizer: RAdam,
    /// Steps skipped because a gradient was non-finite.
    pub skipped_steps: u64,
}

fn weight_argmax_choices(qm: &QuantModel) -> Vec<(u8, usize)> {
    qm.weight_hmqs
        .iter()
        .map(|b| {
            let (_, bi) = match b.state.frozen_choice {
                Some(c) => c,
                None => b.state.argmax(&b.space),
            };
            (b.space.bit_widths()[bi], b.numel)
        })
        .collect()
}

/// Resolve the final activation budget and rate from the config.
pub fn resolve_targets(cfg: &TrainConfig, qm: &QuantModel) -> Result<CompressionTargets> {
    let sizes: Vec<usize> = qm.model.act_slots.iter().map(|s| s.numel).collect();
    if sizes.is_empty() {
        return Err(Error::invalid("model has no activation slots"));
    }
    let (budget, rate) = match (cfg.activation_budget_bits, cfg.target_acr) {
        (Some(b), None) => (b, compression::activation_rate(&sizes, b)?),
        (None, Some(r)) => (compression::budget_for_rate(&sizes, r)?, r),
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "set either the activation budget or the compression rate, not both",
            ))
        }
        (None, None) => return Err(Error::invalid("activation target missing")),
    };
    CompressionTargets::new(cfg.target_wcr, rate, budget, cfg.lambda)
}

/// Mutable bookkeeping shared by the two phases.
pub struct PhaseState {
    pub step_metrics: Vec<StepMetrics>,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub weight_optimizer: RAdam,
    pub pi_optimizer: RAdam,
    pub skipped_steps: u64,
    global_step: u64,
    epoch_index: usize,
}

/// Cyclic joint training of weights and block logits with temperature
/// resets and target ramps.
pub fn run_phase1(
    qm: &mut QuantModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    targets: &CompressionTargets,
    rng: &mut RunRng,
) -> Result<PhaseState> {
    cfg.validate()?;
    let act_sizes: Vec<usize> = qm.model.act_slots.iter().map(|s| s.numel).collect();
    let steps_per_epoch = (train.len() + cfg.batch_size - 1) / cfg.batch_size;
    let temp_every = (steps_per_epoch / cfg.temp_updates_per_epoch).max(1);
    let epochs_per_cycle = cfg.epochs_phase1 / cfg.cycles;

    let weight_opt = RAdam::new(RAdamConfig::with_lr(cfg.lr_weights), &qm.model.param_sizes());
    let pi_sizes: Vec<usize> = qm
        .weight_hmqs
        .iter()
        .chain(qm.act_hmqs.iter())
        .map(|b| b.space.len())
        .collect();
    let pi_opt = RAdam::new(RAdamConfig::with_lr(cfg.lr_hmq), &pi_sizes);
    let mut state = PhaseState {
        step_metrics: Vec::new(),
        epoch_metrics: Vec::new(),
        weight_optimizer: weight_opt,
        pi_optimizer: pi_opt,
        skipped_steps: 0,
        global_step: 0,
        epoch_index: 0,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for cycle in 0..cfg.cycles {
        let (r_w, r_a) = compression::ramp_targets(cycle, targets.weight_rate, targets.activation_rate);
        let cycle_budget = compression::budget_for_rate(&act_sizes, r_a)?;
        qm.update_activation_bits(cycle_budget)?;
        let mut step_in_cycle = 0u64;
        for _ in 0..epochs_per_cycle {
            rng.shuffle(&mut order);
            let mut loss_sum = 0.0f64;
            let mut batches = 0u64;
            for chunk in order.chunks(cfg.batch_size) {
                let tau = hmq::anneal_temperature(step_in_cycle / temp_every as u64);
                qm.set_temperature(tau);
                let (bx, by) = train.batch(chunk, Some(rng));
                let mut g = Graph::new();
                let nodes = insert_leaves(&mut g, qm, true, true);
                let batch_node = g.constant(bx);
                let fwd = forward(&mut g, qm, &nodes, batch_node, QuantMode::Active, rng)?;
                let j_task = g.cross_entropy_with_logits(fwd.logits, &by)?;
                let blocks: Vec<(TensorId, &SearchSpace, usize)> = fwd
                    .weight_probs
                    .iter()
                    .zip(&qm.weight_hmqs)
                    .map(|(p, b)| (p.expect("training pass yields probs"), &b.space, b.numel))
                    .collect();
                let rate_node = compression::expected_wcr_node(&mut g, &blocks)?;
                let (total, hinge) = compression::attach_compression_loss(&mut g, j_task, rate_node, r_w, cfg.lambda)?;
                g.backward(total)?;

                let finite = grads_finite(&g, &nodes.params)
                    && grads_finite(&g, &flatten_pis(&nodes.weight_pis, &nodes.act_pis));
                if !finite {
                    state.skipped_steps += 1;
                    eprintln!("step {}: non-finite gradient, update skipped", state.global_step);
                } else {
                    apply_step(qm, &g, &nodes.params, &mut state.weight_optimizer, "phase1")?;
                    apply_pi_step(qm, &g, &nodes, &mut state.pi_optimizer)?;
                }

                loss_sum += g.item(j_task) as f64;
                batches += 1;
                state.step_metrics.push(StepMetrics {
                    step: state.global_step,
                    cycle,
                    tau,
                    r_w_target: r_w,
                    r_a_target: r_a,
                    expected_wcr: g.item(rate_node) as f64,
                    actual_wcr: compression::actual_wcr(&weight_argmax_choices(qm))?,
                    j_task: g.item(j_task) as f64,
                    j_w: g.item(hinge) as f64,
                });
                state.global_step += 1;
                step_in_cycle += 1;
            }
            let acc = eval_quantized(qm, test, cfg.batch_size)?;
            state.epoch_metrics.push(EpochMetrics {
                epoch: state.epoch_index,
                phase: 1,
                cycle,
                mean_task_loss: loss_sum / batches.max(1) as f64,
                test_accuracy: acc,
            });
            state.epoch_index += 1;
        }
    }
    Ok(state)
}

/// Weight-only fine-tuning with every block frozen at its argmax scheme.
pub fn run_phase2(
    qm: &mut QuantModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    targets: &CompressionTargets,
    rng: &mut RunRng,
    state: &mut PhaseState,
) -> Result<()> {
    qm.freeze_all();
    let final_tau = qm
        .weight_hmqs
        .first()
        .map(|b| b.state.temperature)
        .unwrap_or(hmq::TEMPERATURE_FLOOR as f32);
    let frozen_actual = compression::actual_wcr(&weight_argmax_choices(qm))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs_phase2 {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = train.batch(chunk, Some(rng));
            let mut g = Graph::new();
            let nodes = insert_leaves(&mut g, qm, true, false);
            let batch_node = g.constant(bx);
            let fwd = forward(&mut g, qm, &nodes, batch_node, QuantMode::Active, rng)?;
            let j_task = g.cross_entropy_with_logits(fwd.logits, &by)?;
            g.backward(j_task)?;
            if !grads_finite(&g, &nodes.params) {
                state.skipped_steps += 1;
                eprintln!("step {}: non-finite gradient, update skipped", state.global_step);
            } else {
                apply_step(qm, &g, &nodes.params, &mut state.weight_optimizer, "phase2")?;
            }
            loss_sum += g.item(j_task) as f64;
            batches += 1;
            state.step_metrics.push(StepMetrics {
                step: state.global_step,
                cycle: cfg.cycles,
                tau: final_tau,
                r_w_target: targets.weight_rate,
                r_a_target: targets.activation_rate,
                expected_wcr: frozen_actual,
                actual_wcr: frozen_actual,
                j_task: g.item(j_task) as f64,
                j_w: 0.0,
            });
            state.global_step += 1;
        }
        let acc = eval_quantized(qm, test, cfg.batch_size)?;
        state.epoch_metrics.push(EpochMetrics {
            epoch: state.epoch_index,
            phase: 2,
            cycle: cfg.cycles,
            mean_task_loss: loss_sum / batches.max(1) as f64,
            test_accuracy: acc,
        });
        state.epoch_index += 1;
    }
    Ok(())
}

/// Phases 1 and 2 on a calibrated, attached model.
pub fn run_two_phase(
    qm: &mut QuantModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    targets: &CompressionTargets,
    rng: &mut RunRng,
) -> Result<QuantizeOutcome> {
    let mut state = run_phase1(qm, train, test, cfg, targets, rng)?;
    run_phase2(qm, train, test, cfg, targets, rng, &mut state)?;
    let quantized_accuracy = evaluate(qm, test, cfg.batch_size, QuantMode::Active)?;
    let frozen_actual = compression::actual_wcr(&weight_argmax_choices(qm))?;
    let final_expected = state
        .step_metrics
        .iter()
        .rev()
        .find(|m| m.cycle < cfg.cycles)
        .map(|m| m.expected_wcr)
        .unwrap_or(frozen_actual);
    Ok(QuantizeOutcome {
        step_metrics: state.step_metrics,
        epoch_metrics: state.epoch_metrics,
        quantized_accuracy,
        final_expected_wcr: final_expected,
        final_actual_wcr: frozen_actual,
        final_acr: targets.activation_rate,
        targets: targets.clone(),
        weight_optimizer: state.weight_optimizer,
        pi_optimizer: state.pi_optimizer,
        skipped_steps: state.skipped_steps,
    })
}

fn flatten_pis(weight_pis: &[Option<TensorId>], act_pis: &[Option<TensorId>]) -> Vec<TensorId> {
    weight_pis.iter().chain(act_pis).filter_map(|p| *p).collect()
}

fn grads_finite(g: &Graph, ids: &[TensorId]) -> bool {
    ids.iter().all(|&id| match g.grad(id) {
        Some(grad) => grad.iter().all(|v| v.is_finite()),
        None => true,
    })
}

fn apply_pi_step(qm: &mut QuantModel, g: &Graph, nodes: &model::ForwardNodes, opt: &mut RAdam) -> Result<()> {
    let grads: Vec<Option<&[f32]>> = nodes
        .weight_pis
        .iter()
        .chain(nodes.act_pis.iter())
        .map(|p| p.and_then(|id| g.grad(id)))
        .collect();
    let (w, a) = (&mut qm.weight_hmqs, &mut qm.act_hmqs);
    let mut slices: Vec<&mut [f32]> = w
        .iter_mut()
        .map(|b| b.state.pi.data_mut())
        .chain(a.iter_mut().map(|b| b.state.pi.data_mut()))
        .collect();
    opt.step(&mut slices, &grads)
}

/// Final scheme table (one row per quantized tensor).
pub fn scheme_table(qm: &QuantModel) -> Vec<SchemeRow> {
    let row = |b: &crate::model::HmqBlock, kind: &'static str| -> SchemeRow {
        let (ti, bi) = b.state.frozen_choice.unwrap_or_else(|| b.state.argmax(&b.space));
        let scheme = b.space.scheme(ti, bi);
        SchemeRow {
            tensor: b.name.clone(),
            kind,
            threshold: scheme.threshold,
            bits: scheme.bits,
            delta: scheme.step_size(),
            signed: scheme.signed,
            numel: b.numel,
        }
    };
    qm.weight_hmqs
        .iter()
        .map(|b| row(b, "weight"))
        .chain(qm.act_hmqs.iter().map(|b| row(b, "activation")))
        .collect()
}
