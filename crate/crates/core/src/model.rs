//! Small model zoo with quantization-block slots.
//!
//! Every weight-bearing layer carries one weight block; every layer
//! activation (post-nonlinearity outputs and the final logits, first and
//! last layers included) carries one activation block. Pooling and flatten
//! outputs reuse the preceding activation block rather than adding one.
//! Residual joins group the two joined tensors for the activation budget.

use crate::compression;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::hmq::{self, HmqMode, HmqState, SearchSpace};
use crate::rng::RunRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp2,
    Cnn4,
    Resnet8,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp2" => Ok(Arch::Mlp2),
            "cnn4" => Ok(Arch::Cnn4),
            "resnet8" => Ok(Arch::Resnet8),
            other => Err(Error::invalid(format!(
                "unknown architecture `{other}` (expected mlp2, cnn4 or resnet8)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Mlp2 => "mlp2",
            Arch::Cnn4 => "cnn4",
            Arch::Resnet8 => "resnet8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d { stride: usize, pad: usize },
    Dense,
    Relu,
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    /// Adds the recorded output of an earlier layer (by index).
    ResidualAdd { from: usize },
}

/// One layer plus its quantization slots.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub weight_param: Option<usize>,
    pub bias_param: Option<usize>,
    /// Index into the weight-block list.
    pub weight_slot: Option<usize>,
    /// Index into the activation-block list.
    pub act_slot: Option<usize>,
}

/// Metadata for an activation slot, fixed at build time.
#[derive(Debug, Clone)]
pub struct ActSlot {
    pub name: String,
    /// Elements of this tensor for a single sample.
    pub numel: usize,
    /// Unsigned after relu-family nonlinearities, signed otherwise.
    pub signed: bool,
    /// Tensors sharing a residual join share a budget group.
    pub group: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Param>,
    pub act_slots: Vec<ActSlot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Dims {
    Image(usize, usize, usize),
    Flat(usize),
}

impl Dims {
    fn numel(&self) -> usize {
        match *self {
            Dims::Image(c, h, w) => c * h * w,
            Dims::Flat(n) => n,
        }
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    act_slots: Vec<ActSlot>,
    dims: Dims,
    weight_slots: usize,
    rng_scale: f64,
}

impl Builder {
    fn new(input: (usize, usize, usize)) -> Self {
        Builder {
            layers: Vec::new(),
            params: Vec::new(),
            act_slots: Vec::new(),
            dims: Dims::Image(input.0, input.1, input.2),
            weight_slots: 0,
            rng_scale: 1.0,
        }
    }

    fn he_init(&mut self, rng: &mut RunRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt() * self.rng_scale;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| (rng.normal() * std) as f32).collect();
        Tensor::new(shape, data).expect("init shape").with_grad()
    }

    fn conv(&mut self, name: &str, rng: &mut RunRng, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        let Dims::Image(c, h, w) = self.dims else {
            panic!("conv after flatten in architecture builder");
        };
        let weight = self.he_init(rng, vec![out_ch, c, kernel, kernel], c * kernel * kernel);
        let bias = Tensor::zeros(vec![out_ch]).with_grad();
        let wp = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            kind: ParamKind::Weight,
            tensor: weight,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            kind: ParamKind::Bias,
            tensor: bias,
        });
        let slot = self.weight_slots;
        self.weight_slots += 1;
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv2d { stride, pad },
            weight_param: Some(wp),
            bias_param: Some(wp + 1),
            weight_slot: Some(slot),
            act_slot: None,
        });
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        self.dims = Dims::Image(out_ch, oh, ow);
        self.layers.len() - 1
    }

    fn dense(&mut self, name: &str, rng: &mut RunRng, out_features: usize) -> usize {
        let in_features = self.dims.numel();
        if !matches!(self.dims, Dims::Flat(_)) {
            panic!("dense requires flatten first");
        }
        let weight = self.he_init(rng, vec![in_features, out_features], in_features);
        let bias = Tensor::zeros(vec![out_features]).with_grad();
        let wp = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            kind: ParamKind::Weight,
            tensor: weight,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            kind: ParamKind::Bias,
            tensor: bias,
        });
        let slot = self.weight_slots;
        self.weight_slots += 1;
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Dense,
            weight_param: Some(wp),
            bias_param: Some(wp + 1),
            weight_slot: Some(slot),
            act_slot: None,
        });
        self.dims = Dims::Flat(out_features);
        self.layers.len() - 1
    }

    fn relu(&mut self, name: &str) -> usize {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Relu,
            weight_param: None,
            bias_param: None,
            weight_slot: None,
            act_slot: None,
        });
        self.layers.len() - 1
    }

    fn pool(&mut self, name: &str, kernel: usize, stride: usize) -> usize {
        let Dims::Image(c, h, w) = self.dims else {
            panic!("pool after flatten");
        };
        self.dims = Dims::Image(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1);
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::AvgPool { kernel, stride },
            weight_param: None,
            bias_param: None,
            weight_slot: None,
            act_slot: None,
        });
        self.layers.len() - 1
    }

    fn global_pool(&mut self, name: &str) -> usize {
        let Dims::Image(c, _, _) = self.dims else {
            panic!("global pool after flatten");
        };
        self.dims = Dims::Flat(c);
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::GlobalAvgPool,
            weight_param: None,
            bias_param: None,
            weight_slot: None,
            act_slot: None,
        });
        self.layers.len() - 1
    }

    fn flatten(&mut self, name: &str) -> usize {
        self.dims = Dims::Flat(self.dims.numel());
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Flatten,
            weight_param: None,
            bias_param: None,
            weight_slot: None,
            act_slot: None,
        });
        self.layers.len() - 1
    }

    fn residual_add(&mut self, name: &str, from: usize) -> usize {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind: LayerKind::ResidualAdd { from },
            weight_param: None,
            bias_param: None,
            weight_slot: None,
            act_slot: None,
        });
        self.layers.len() - 1
    }

    /// Attach an activation slot to the given layer's output.
    fn quantize_activation(&mut self, layer: usize, signed: bool, group: Option<usize>) {
        let slot = self.act_slots.len();
        self.act_slots.push(ActSlot {
            name: format!("{}.act", self.layers[layer].name),
            numel: self.dims.numel(),
            signed,
            group,
        });
        self.layers[layer].act_slot = Some(slot);
    }
}

/// Build a float model with quantization slots wired but no blocks attached.
pub fn build_model(arch: Arch, input: (usize, usize, usize), num_classes: usize, rng: &mut RunRng) -> Model {
    let mut b = Builder::new(input);
    match arch {
        Arch::Mlp2 => {
            b.flatten("flatten");
            b.dense("fc1", rng, 64);
            let r = b.relu("relu1");
            b.quantize_activation(r, false, None);
            let d = b.dense("fc2", rng, num_classes);
            b.quantize_activation(d, true, None);
        }
        Arch::Cnn4 => {
            b.conv("conv1", rng, 16, 3, 1, 1);
            let r = b.relu("relu1");
            b.quantize_activation(r, false, None);
            b.pool("pool1", 2, 2);
            b.conv("conv2", rng, 32, 3, 1, 1);
            let r = b.relu("relu2");
            b.quantize_activation(r, false, None);
            b.pool("pool2", 2, 2);
            b.conv("conv3", rng, 64, 3, 1, 1);
            let r = b.relu("relu3");
            b.quantize_activation(r, false, None);
            b.conv("conv4", rng, 96, 3, 1, 1);
            let r = b.relu("relu4");
            b.quantize_activation(r, false, None);
            b.global_pool("gap");
            b.flatten("flatten");
            let d = b.dense("fc", rng, num_classes);
            b.quantize_activation(d, true, None);
        }
        Arch::Resnet8 => {
            b.conv("stem", rng, 16, 3, 1, 1);
            let r = b.relu("stem_relu");
            // feeds the first join
            b.quantize_activation(r, false, Some(0));
            let mut skip_layer = r;
            for blk in 0..3 {
                b.conv(&format!("block{blk}_conv1"), rng, 16, 3, 1, 1);
                let r1 = b.relu(&format!("block{blk}_relu1"));
                b.quantize_activation(r1, false, None);
                let c2 = b.conv(&format!("block{blk}_conv2"), rng, 16, 3, 1, 1);
                // branch output meets the skip tensor at the join
                b.quantize_activation(c2, true, Some(blk));
                b.residual_add(&format!("block{blk}_add"), skip_layer);
                let r2 = b.relu(&format!("block{blk}_relu2"));
                let group = if blk + 1 < 3 { Some(blk + 1) } else { None };
                b.quantize_activation(r2, false, group);
                skip_layer = r2;
            }
            b.global_pool("gap");
            b.flatten("flatten");
            let d = b.dense("fc", rng, num_classes);
            b.quantize_activation(d, true, None);
        }
    }
    Model {
        arch,
        input,
        num_classes,
        layers: b.layers,
        params: b.params,
        act_slots: b.act_slots,
    }
}

impl Model {
    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.weight_slot.is_some()).count()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.numel()).collect()
    }

    /// Largest single activation tensor (per sample) among quantized slots.
    pub fn max_act_numel(&self) -> usize {
        self.act_slots.iter().map(|s| s.numel).max().unwrap_or(0)
    }
}

/// One attached quantization block.
#[derive(Debug, Clone)]
pub struct HmqBlock {
    pub name: String,
    pub space: SearchSpace,
    pub state: HmqState,
    /// |theta| for weight blocks; per-sample |X| for activation blocks.
    pub numel: usize,
    pub group: Option<usize>,
}

/// Model plus attached quantization blocks.
#[derive(Debug, Clone)]
pub struct QuantModel {
    pub model: Model,
    pub weight_hmqs: Vec<HmqBlock>,
    pub act_hmqs: Vec<HmqBlock>,
}

/// Attach blocks to a pre-trained model: weight search spaces anchored to
/// max |theta|, activation spaces to calibrated maxima with budget-implied
/// bit-widths.
pub fn attach_hmqs(
    model: Model,
    weight_bits: &[u8],
    calibrated_max: &[f32],
    budget_bits: u64,
) -> Result<QuantModel> {
    if calibrated_max.len() != model.act_slots.len() {
        return Err(Error::invalid(format!(
            "{} calibrated maxima for {} activation slots",
            calibrated_max.len(),
            model.act_slots.len()
        )));
    }
    let mut weight_hmqs = Vec::new();
    for layer in &model.layers {
        if let (Some(wp), Some(_)) = (layer.weight_param, layer.weight_slot) {
            let param = &model.params[wp];
            let space = hmq::build_weight_search_space(&param.tensor, weight_bits)
                .map_err(|e| Error::invalid(format!("{}: {e}", param.name)))?;
            let state = hmq::init_pi(&space);
            weight_hmqs.push(HmqBlock {
                name: param.name.clone(),
                space,
                state,
                numel: param.tensor.numel(),
                group: None,
            });
        }
    }
    let mut act_hmqs = Vec::new();
    for (slot, &max_act) in model.act_slots.iter().zip(calibrated_max) {
        let bits = group_bits(&model.act_slots, slot, budget_bits)?;
        let space = hmq::build_activation_search_space(max_act, bits, slot.signed)
            .map_err(|e| Error::invalid(format!("{}: {e}", slot.name)))?;
        let state = hmq::init_pi(&space);
        act_hmqs.push(HmqBlock {
            name: slot.name.clone(),
            space,
            state,
            numel: slot.numel,
            group: slot.group,
        });
    }
    Ok(QuantModel {
        model,
        weight_hmqs,
        act_hmqs,
    })
}

/// Budget-implied bit-width for a slot, using the group maximum at joins.
fn group_bits(slots: &[ActSlot], slot: &ActSlot, budget_bits: u64) -> Result<u8> {
    let numel = match slot.group {
        None => slot.numel,
        Some(gid) => slots
            .iter()
            .filter(|s| s.group == Some(gid))
            .map(|s| s.numel)
            .max()
            .unwrap_or(slot.numel),
    };
    compression::activation_bits(numel, budget_bits).map_err(|e| match e {
        Error::InfeasibleBudget { size, budget, .. } => Error::InfeasibleBudget {
            tensor: slot.name.clone(),
            size,
            budget,
        },
        other => other,
    })
}

impl QuantModel {
    /// Wrap a float model with no blocks attached; only `QuantMode::Bypass`
    /// forwards are valid until `attach_hmqs` replaces this.
    pub fn bare(model: Model) -> Self {
        QuantModel {
            model,
            weight_hmqs: Vec::new(),
            act_hmqs: Vec::new(),
        }
    }

    /// Re-derive every activation block's bit-width for a new budget
    /// (threshold logits are preserved). Called when the ramp moves.
    pub fn update_activation_bits(&mut self, budget_bits: u64) -> Result<()> {
        for (block, slot) in self.act_hmqs.iter_mut().zip(&self.model.act_slots) {
            let bits = group_bits(&self.model.act_slots, slot, budget_bits)?;
            if block.space.bit_widths() != [bits] {
                let space = SearchSpace::new(block.space.max_exponent(), &[bits], block.space.signed())?;
                block.space = space;
            }
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for block in self.weight_hmqs.iter_mut().chain(self.act_hmqs.iter_mut()) {
            block.state.freeze(&block.space);
        }
    }

    pub fn set_temperature(&mut self, tau: f32) {
        for block in self.weight_hmqs.iter_mut().chain(self.act_hmqs.iter_mut()) {
            block.state.temperature = tau;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.weight_hmqs
            .iter()
            .chain(self.act_hmqs.iter())
            .all(|b| b.state.mode == HmqMode::Frozen)
    }
}

/// How a forward pass treats the quantization blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Blocks bypassed entirely (the un-instrumented float model).
    Bypass,
    /// Blocks applied in their current mode (training samples, frozen does not).
    Active,
}

pub struct ForwardResult {
    pub logits: TensorId,
    /// Joint-probability nodes of the weight blocks (training mode only).
    pub weight_probs: Vec<Option<TensorId>>,
    /// Pre-quantization activation values at each slot (for calibration).
    pub act_values: Vec<TensorId>,
}

/// Node bundle the caller prepares so parameters and logits stay addressable
/// after the pass.
pub struct ForwardNodes {
    pub params: Vec<TensorId>,
    pub weight_pis: Vec<Option<TensorId>>,
    pub act_pis: Vec<Option<TensorId>>,
}

pub fn insert_leaves(g: &mut Graph, qm: &QuantModel, train_params: bool, train_pis: bool) -> ForwardNodes {
    let params = qm
        .model
        .params
        .iter()
        .map(|p| {
            if train_params {
                g.leaf(p.tensor.clone())
            } else {
                g.constant(p.tensor.clone())
            }
        })
        .collect();
    let mk = |g: &mut Graph, blocks: &[HmqBlock]| -> Vec<Option<TensorId>> {
        blocks
            .iter()
            .map(|b| {
                if b.state.mode == HmqMode::Training {
                    Some(if train_pis {
                        g.leaf(b.state.pi.clone())
                    } else {
                        g.constant(b.state.pi.clone())
                    })
                } else {
                    None
                }
            })
            .collect()
    };
    let weight_pis = mk(g, &qm.weight_hmqs);
    let act_pis = mk(g, &qm.act_hmqs);
    ForwardNodes {
        params,
        weight_pis,
        act_pis,
    }
}

/// Run the network. `mode == Bypass` ignores all blocks; `Active` applies
/// each block in its own training/frozen mode.
pub fn forward(
    g: &mut Graph,
    qm: &mut QuantModel,
    nodes: &ForwardNodes,
    batch: TensorId,
    mode: QuantMode,
    rng: &mut RunRng,
) -> Result<ForwardResult> {
    if mode == QuantMode::Active
        && (qm.weight_hmqs.len() != qm.model.weight_layer_count()
            || qm.act_hmqs.len() != qm.model.act_slots.len())
    {
        return Err(Error::invalid(
            "quantized forward requires attached blocks; call attach_hmqs first",
        ));
    }
    let layer_count = qm.model.layers.len();
    let mut outputs: Vec<TensorId> = Vec::with_capacity(layer_count);
    let mut current = batch;
    let mut weight_probs = vec![None; qm.model.weight_layer_count()];
    let mut act_values = vec![None; qm.model.act_slots.len()];

    for li in 0..layer_count {
        let layer = qm.model.layers[li].clone();
        current = match layer.kind {
            LayerKind::Conv2d { stride, pad } => {
                let w = nodes.params[layer.weight_param.expect("conv weight")];
                let bias = nodes.params[layer.bias_param.expect("conv bias")];
                let slot = layer.weight_slot.expect("conv slot");
                let wq = apply_weight_block(g, qm, nodes, slot, w, mode, rng, &mut weight_probs)?;
                g.conv2d(current, wq, Some(bias), stride, pad)?
            }
            LayerKind::Dense => {
                let w = nodes.params[layer.weight_param.expect("dense weight")];
                let bias = nodes.params[layer.bias_param.expect("dense bias")];
                let slot = layer.weight_slot.expect("dense slot");
                let wq = apply_weight_block(g, qm, nodes, slot, w, mode, rng, &mut weight_probs)?;
                let mm = g.matmul(current, wq)?;
                g.add_bias(mm, bias)?
            }
            LayerKind::Relu => g.relu(current),
            LayerKind::AvgPool { kernel, stride } => g.avg_pool2d(current, kernel, stride)?,
            LayerKind::GlobalAvgPool => g.global_avg_pool(current)?,
            LayerKind::Flatten => {
                let n = g.shape(current)[0];
                let numel = g.numel(current) / n;
                g.reshape(current, vec![n, numel])?
            }
            LayerKind::ResidualAdd { from } => g.add(current, outputs[from])?,
        };
        if let Some(slot) = layer.act_slot {
            act_values[slot] = Some(current);
            if mode == QuantMode::Active {
                let block = &mut qm.act_hmqs[slot];
                let pass = hmq::hmq_forward(g, current, &mut block.state, &block.space, nodes.act_pis[slot], rng)?;
                current = pass.output;
            }
        }
        outputs.push(current);
    }
    Ok(ForwardResult {
        logits: current,
        weight_probs,
        act_values: act_values.into_iter().map(|v| v.expect("all slots visited")).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_weight_block(
    g: &mut Graph,
    qm: &mut QuantModel,
    nodes: &ForwardNodes,
    slot: usize,
    w: TensorId,
    mode: QuantMode,
    rng: &mut RunRng,
    weight_probs: &mut [Option<TensorId>],
) -> Result<TensorId> {
    if mode == QuantMode::Bypass {
        return Ok(w);
    }
    let block = &mut qm.weight_hmqs[slot];
    let pass = hmq::hmq_forward(g, w, &mut block.state, &block.space, nodes.weight_pis[slot], rng)?;
    weight_probs[slot] = pass.probs;
    Ok(pass.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn4_slot_counts() {
        let mut rng = RunRng::new(0);
        let m = build_model(Arch::Cnn4, (1, 28, 28), 10, &mut rng);
        assert_eq!(m.weight_layer_count(), 5);
        assert_eq!(m.act_slots.len(), 5);
        // first layer activation is the largest tensor: 16 x 28 x 28
        assert_eq!(m.max_act_numel(), 16 * 28 * 28);
        // weight + bias per weight-bearing layer
        assert_eq!(m.params.len(), 10);
    }

    #[test]
    fn resnet8_groups_join_tensors() {
        let mut rng = RunRng::new(0);
        let m = build_model(Arch::Resnet8, (3, 32, 32), 10, &mut rng);
        assert_eq!(m.weight_layer_count(), 8);
        // stem relu + 3 x (mid relu, branch out, post-add relu) + logits
        assert_eq!(m.act_slots.len(), 11);
        for gid in 0..3usize {
            let members: Vec<&ActSlot> = m.act_slots.iter().filter(|s| s.group == Some(gid)).collect();
            assert_eq!(members.len(), 2, "join {gid} must group exactly two tensors");
        }
    }
}
