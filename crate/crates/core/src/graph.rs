//! Eager reverse-mode differentiation graph.
//!
//! Nodes are appended in execution order, so reverse traversal by index is a
//! valid reverse topological order. Gradients accumulate additively across
//! fan-out. The rounding node backpropagates the incoming gradient unchanged
//! (straight-through estimator); elementwise `max`/`min` route the gradient
//! to the first argument on ties, which makes clip boundaries count as
//! "inside" for the quantizer contract.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Bin {
        kind: BinKind,
        bc: Broadcast,
        lhs: TensorId,
        rhs: TensorId,
    },
    Matmul {
        lhs: TensorId,
        rhs: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        dims: ConvDims,
    },
    AddBias {
        input: TensorId,
        bias: TensorId,
    },
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    SteRound(TensorId),
    Softmax(TensorId),
    LogSoftmax(TensorId),
    AvgPool2d {
        input: TensorId,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(TensorId),
    Reshape(TensorId),
    ReduceSum(TensorId),
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let requires_grad = t.requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f32) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn item(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- elementwise binary ops -------------------------------------------

    fn broadcast(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(Broadcast, Vec<usize>)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            Ok((Broadcast::Same, sa.clone()))
        } else if self.numel(a) == 1 {
            Ok((Broadcast::LeftScalar, sb.clone()))
        } else if self.numel(b) == 1 {
            Ok((Broadcast::RightScalar, sa.clone()))
        } else {
            Err(Error::shape(op, format!("operands {:?} vs {:?}", sa, sb)))
        }
    }

    fn binary(&mut self, kind: BinKind, op_name: &'static str, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (bc, shape) = self.broadcast(op_name, a, b)?;
        let la = &self.nodes[a.0].data;
        let lb = &self.nodes[b.0].data;
        let f = |x: f32, y: f32| -> f32 {
            match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
                BinKind::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
                BinKind::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
            }
        };
        let data: Vec<f32> = match bc {
            Broadcast::Same => la.iter().zip(lb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LeftScalar => {
                let x = la[0];
                lb.iter().map(|&y| f(x, y)).collect()
            }
            Broadcast::RightScalar => {
                let y = lb[0];
                la.iter().map(|&x| f(x, y)).collect()
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Op::Bin { kind, bc, lhs: a, rhs: b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn max(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Max, "max", a, b)
    }

    pub fn min(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Min, "min", a, b)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { lhs: a, rhs: b, m, k, n }))
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", si, sw)));
        }
        if si[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("channels/kernel mismatch: input {:?}, weight {:?}", si, sw),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs out channels {}", self.shape(b), sw[0]),
                ));
            }
        }
        let dims = ConvDims::new(si[0], si[1], si[2], si[3], sw[0], sw[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} does not fit input {:?} with pad {}", sw[2], si, pad)))?;
        let cols = kernels::im2col(&self.nodes[input.0].data, &dims);
        let mut pos = kernels::mm_abt(
            &cols,
            &self.nodes[weight.0].data,
            dims.out_positions(),
            dims.patch_len(),
            dims.out_ch,
        );
        if let Some(b) = bias {
            let bd = &self.nodes[b.0].data;
            for row in pos.chunks_mut(dims.out_ch) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let data = kernels::positions_to_nchw(&pos, &dims);
        let mut deps = vec![input, weight];
        if let Some(b) = bias {
            deps.push(b);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(
            vec![dims.batch, dims.out_ch, dims.out_h, dims.out_w],
            data,
            rg,
            Op::Conv2d { input, weight, bias, dims },
        ))
    }

    /// Row-wise bias add: x[n, f] + b[f].
    pub fn add_bias(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 2 || sb.len() != 1 || si[1] != sb[0] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", si, sb)));
        }
        let bd = self.nodes[bias.0].data.clone();
        let data: Vec<f32> = self.nodes[input.0]
            .data
            .chunks(si[1])
            .flat_map(|row| row.iter().zip(&bd).map(|(&x, &b)| x + b).collect::<Vec<_>>())
            .collect();
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(si, data, rg, Op::AddBias { input, bias }))
    }

    // ---- unary -------------------------------------------------------------

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Relu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Log(x))
    }

    /// Round to nearest, halves away from zero; identity Jacobian on backward.
    pub fn ste_round(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.round()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::SteRound(x))
    }

    fn last_axis(&self, op: &'static str, x: TensorId) -> Result<(usize, usize)> {
        let shape = &self.nodes[x.0].shape;
        let width = *shape
            .last()
            .ok_or_else(|| Error::shape(op, "zero-rank tensor"))?;
        if width == 0 {
            return Err(Error::shape(op, "empty last axis"));
        }
        Ok((self.numel(x) / width, width))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, width) = self.last_axis("softmax", x)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0f64;
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let e = ((v - m) as f64).exp();
                    denom += e;
                    e
                })
                .collect();
            for (o, e) in data[r * width..(r + 1) * width].iter_mut().zip(exps) {
                *o = (e / denom) as f32;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis; avoids the log(softmax(x)) underflow.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, width) = self.last_axis("log_softmax", x)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let denom: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
            let log_denom = denom.ln();
            for (o, &v) in data[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = ((v - m) as f64 - log_denom) as f32;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::LogSoftmax(x)))
    }

    // ---- pooling / shape ----------------------------------------------------

    pub fn avg_pool2d(&mut self, x: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("avg_pool2d", format!("{:?}", s)));
        }
        if kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape(
                "avg_pool2d",
                format!("kernel {} stride {} on {:?}", kernel, stride, s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = &self.nodes[x.0].data;
        let inv = 1.0 / (kernel * kernel) as f32;
        let mut data = vec![0.0f32; n * c * oh * ow];
        for img in 0..n * c {
            let base = img * h * w;
            let obase = img * oh * ow;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f32;
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            acc += src[base + (y * stride + dy) * w + xo * stride + dx];
                        }
                    }
                    data[obase + y * ow + xo] = acc * inv;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c, oh, ow], data, rg, Op::AvgPool2d { input: x, kernel, stride }))
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; n * c];
        for i in 0..n * c {
            let acc: f64 = src[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).sum();
            data[i] = (acc / plane as f64) as f32;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], data, rg, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape(x)))
    }

    /// Sum of all elements, as a rank-1 scalar.
    pub fn reduce_sum(&mut self, x: TensorId) -> TensorId {
        let acc: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![acc as f32], rg, Op::ReduceSum(x))
    }

    /// Mean cross-entropy between logits [n, classes] and integer labels.
    pub fn cross_entropy_with_logits(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits {:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows vs {} labels", n, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, c)));
        }
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let denom: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
            loss += denom.ln() + m as f64 - row[y] as f64;
        }
        loss /= n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss as f32],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------------

    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let go = node.grad.as_ref().expect("grad present").clone();
        match &node.op {
            Op::Leaf => {}
            Op::Bin { kind, bc, lhs, rhs } => {
                let (kind, bc, lhs, rhs) = (*kind, *bc, *lhs, *rhs);
                let la = before[lhs.0].data.clone();
                let lb = before[rhs.0].data.clone();
                let out = node.data.clone();
                bin_backward(before, kind, bc, lhs, rhs, &la, &lb, &out, &go);
            }
            Op::Matmul { lhs, rhs, m, k, n } => {
                let (lhs, rhs, m, k, n) = (*lhs, *rhs, *m, *k, *n);
                if before[lhs.0].requires_grad {
                    let da = kernels::mm_abt(&go, &before[rhs.0].data, m, n, k);
                    accumulate(before, lhs, &da);
                }
                if before[rhs.0].requires_grad {
                    let db = kernels::mm_atb(&before[lhs.0].data, &go, m, k, n);
                    accumulate(before, rhs, &db);
                }
            }
            Op::Conv2d { input, weight, bias, dims } => {
                let (input, weight, bias, dims) = (*input, *weight, *bias, *dims);
                let go_pos = kernels::nchw_to_positions(&go, &dims);
                if let Some(b) = bias {
                    if before[b.0].requires_grad {
                        let mut db = vec![0.0f64; dims.out_ch];
                        for row in go_pos.chunks(dims.out_ch) {
                            for (acc, &g) in db.iter_mut().zip(row) {
                                *acc += g as f64;
                            }
                        }
                        let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                        accumulate(before, b, &db);
                    }
                }
                let need_input = before[input.0].requires_grad;
                let need_weight = before[weight.0].requires_grad;
                if need_weight {
                    let cols = kernels::im2col(&before[input.0].data, &dims);
                    let dw = kernels::mm_atb(&go_pos, &cols, dims.out_positions(), dims.out_ch, dims.patch_len());
                    accumulate(before, weight, &dw);
                }
                if need_input {
                    let dcols = kernels::mm(
                        &go_pos,
                        &before[weight.0].data,
                        dims.out_positions(),
                        dims.out_ch,
                        dims.patch_len(),
                    );
                    let dx = kernels::col2im(&dcols, &dims);
                    accumulate(before, input, &dx);
                }
            }
            Op::AddBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let width = before[bias.0].data.len();
                if before[input.0].requires_grad {
                    accumulate(before, input, &go);
                }
                if before[bias.0].requires_grad {
                    let mut db = vec![0.0f64; width];
                    for row in go.chunks(width) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g as f64;
                        }
                    }
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    accumulate(before, bias, &db);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let dx: Vec<f32> = before[x.0]
                        .data
                        .iter()
                        .zip(&go)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(before, x, &dx);
                }
            }
            Op::Exp(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let dx: Vec<f32> = node.data.iter().zip(&go).map(|(&o, &g)| g * o).collect();
                    accumulate(before, x, &dx);
                }
            }
            Op::Log(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let dx: Vec<f32> = before[x.0].data.iter().zip(&go).map(|(&v, &g)| g / v).collect();
                    accumulate(before, x, &dx);
                }
            }
            Op::SteRound(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    accumulate(before, x, &go);
                }
            }
            Op::Softmax(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let width = *node.shape.last().expect("softmax rank >= 1");
                    let mut dx = vec![0.0f32; go.len()];
                    for r in 0..go.len() / width {
                        let range = r * width..(r + 1) * width;
                        let s = &node.data[range.clone()];
                        let g = &go[range.clone()];
                        let dot: f64 = s.iter().zip(g).map(|(&sv, &gv)| sv as f64 * gv as f64).sum();
                        for ((o, &sv), &gv) in dx[range].iter_mut().zip(s).zip(g) {
                            *o = sv * (gv - dot as f32);
                        }
                    }
                    accumulate(before, x, &dx);
                }
            }
            Op::LogSoftmax(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let width = *node.shape.last().expect("log_softmax rank >= 1");
                    let mut dx = vec![0.0f32; go.len()];
                    for r in 0..go.len() / width {
                        let range = r * width..(r + 1) * width;
                        let out = &node.data[range.clone()];
                        let g = &go[range.clone()];
                        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
                        for ((o, &lv), &gv) in dx[range].iter_mut().zip(out).zip(g) {
                            *o = gv - (lv.exp() as f64 * sum_g) as f32;
                        }
                    }
                    accumulate(before, x, &dx);
                }
            }
            Op::AvgPool2d { input, kernel, stride } => {
                let (input, kernel, stride) = (*input, *kernel, *stride);
                if before[input.0].requires_grad {
                    let is = &before[input.0].shape;
                    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
                    let (oh, ow) = (node.shape[2], node.shape[3]);
                    let inv = 1.0 / (kernel * kernel) as f32;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for img in 0..n * c {
                        let base = img * h * w;
                        let obase = img * oh * ow;
                        for y in 0..oh {
                            for xo in 0..ow {
                                let g = go[obase + y * ow + xo] * inv;
                                for dy in 0..kernel {
                                    for dx_ in 0..kernel {
                                        dx[base + (y * stride + dy) * w + xo * stride + dx_] += g;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(before, input, &dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let is = &before[x.0].shape;
                    let plane = is[2] * is[3];
                    let inv = 1.0 / plane as f32;
                    let mut dx = vec![0.0f32; before[x.0].data.len()];
                    for (i, &g) in go.iter().enumerate() {
                        for o in dx[i * plane..(i + 1) * plane].iter_mut() {
                            *o = g * inv;
                        }
                    }
                    accumulate(before, x, &dx);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    accumulate(before, x, &go);
                }
            }
            Op::ReduceSum(x) => {
                let x = *x;
                if before[x.0].requires_grad {
                    let g = go[0];
                    let dx = vec![g; before[x.0].data.len()];
                    accumulate(before, x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                if before[logits.0].requires_grad {
                    let c = before[logits.0].shape[1];
                    let n = labels.len();
                    let scale = go[0] / n as f32;
                    let src = before[logits.0].data.clone();
                    let mut dx = vec![0.0f32; src.len()];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &src[r * c..(r + 1) * c];
                        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                        let denom: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
                        for (j, (&v, o)) in row.iter().zip(dx[r * c..(r + 1) * c].iter_mut()).enumerate() {
                            let p = (((v - m) as f64).exp() / denom) as f32;
                            *o = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(before, logits, &dx);
                }
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], id: TensorId, contrib: &[f32]) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let len = nodes[id.0].data.len();
    debug_assert_eq!(len, contrib.len());
    let grad = nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
    for (g, &c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

fn accumulate_scalar(nodes: &mut [Node], id: TensorId, contrib: f64) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let grad = nodes[id.0].grad.get_or_insert_with(|| vec![0.0; 1]);
    grad[0] += contrib as f32;
}

#[allow(clippy::too_many_arguments)]
fn bin_backward(
    nodes: &mut [Node],
    kind: BinKind,
    bc: Broadcast,
    lhs: TensorId,
    rhs: TensorId,
    la: &[f32],
    lb: &[f32],
    out: &[f32],
    go: &[f32],
) {
    // Per-element partials (dl, dr) for out = f(l, r).
    let partials = |x: f32, y: f32, o: f32| -> (f32, f32) {
        match kind {
            BinKind::Add => (1.0, 1.0),
            BinKind::Sub => (1.0, -1.0),
            BinKind::Mul => (y, x),
            BinKind::Div => (1.0 / y, -o / y),
            // ties go to the left operand
            BinKind::Max => {
                if x >= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinKind::Min => {
                if x <= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    };
    let need_l = nodes[lhs.0].requires_grad;
    let need_r = nodes[rhs.0].requires_grad;
    match bc {
        Broadcast::Same => {
            if need_l {
                let dl: Vec<f32> = (0..go.len())
                    .map(|i| go[i] * partials(la[i], lb[i], out[i]).0)
                    .collect();
                accumulate(nodes, lhs, &dl);
            }
            if need_r {
                let dr: Vec<f32> = (0..go.len())
                    .map(|i| go[i] * partials(la[i], lb[i], out[i]).1)
                    .collect();
                accumulate(nodes, rhs, &dr);
            }
        }
        Broadcast::LeftScalar => {
            let x = la[0];
            if need_l {
                let dl: f64 = (0..go.len())
                    .map(|i| go[i] as f64 * partials(x, lb[i], out[i]).0 as f64)
                    .sum();
                accumulate_scalar(nodes, lhs, dl);
            }
            if need_r {
                let dr: Vec<f32> = (0..go.len())
                    .map(|i| go[i] * partials(x, lb[i], out[i]).1)
                    .collect();
                accumulate(nodes, rhs, &dr);
            }
        }
        Broadcast::RightScalar => {
            let y = lb[0];
            if need_l {
                let dl: Vec<f32> = (0..go.len())
                    .map(|i| go[i] * partials(la[i], y, out[i]).0)
                    .collect();
                accumulate(nodes, lhs, &dl);
            }
            if need_r {
                let dr: f64 = (0..go.len())
                    .map(|i| go[i] as f64 * partials(la[i], y, out[i]).1 as f64)
                    .sum();
                accumulate_scalar(nodes, rhs, dr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(g: &mut Graph, data: Vec<f32>) -> TensorId {
        g.leaf(Tensor::from_vec(data).with_grad())
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let a_data = vec![0.5, -1.0, 2.0, 3.0, 4.0, -0.25, 7.0, 8.0, 9.0];
        let a = g.constant(Tensor::new(vec![3, 3], a_data.clone()).unwrap());
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.data(c), &a_data[..]);
    }

    #[test]
    fn conv2d_ones() {
        // 3x3 input of ones, 2x2 kernel of ones, stride 1, no pad -> 2x2 of 4
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.data(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn ste_round_forward_and_backward() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![0.6, -1.5]);
        let y = g.ste_round(x);
        assert_eq!(g.data(y), &[1.0, -2.0]);
        let w = g.constant(Tensor::from_vec(vec![0.7, 0.0]));
        let p = g.mul(y, w).unwrap();
        let loss = g.reduce_sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.7, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w * w), w = [1, -2] -> grad [2, -4]
        let mut g = Graph::new();
        let w = leaf_grad(&mut g, vec![1.0, -2.0]);
        let sq = g.mul(w, w).unwrap();
        let loss = g.reduce_sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn relu_kills_negative_branch() {
        let mut g = Graph::new();
        let neg = g.constant(Tensor::scalar(-3.0));
        let c = leaf_grad(&mut g, vec![2.0]);
        let r = g.relu(neg);
        let loss = g.mul(r, c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[0.0]);
    }

    #[test]
    fn fanout_accumulates_twice() {
        // loss = y + y where y = 3x  ->  dx = 6
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0]);
        let three = g.scalar_const(3.0);
        let y = g.mul(x, three).unwrap();
        let loss = g.add(y, y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0, 2.0]);
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn max_ties_go_left() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![1.0]);
        let b = leaf_grad(&mut g, vec![1.0]);
        let m = g.max(a, b).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0]);
        assert!(g.grad(b).is_none() || g.grad(b).unwrap() == [0.0]);
    }

    #[test]
    fn scalar_broadcast_div() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![2.0, 4.0]);
        let s = leaf_grad(&mut g, vec![2.0]);
        let y = g.div(x, s).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0]);
        let loss = g.reduce_sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
        // d/ds sum(x/s) = -sum(x)/s^2 = -6/4
        assert_eq!(g.grad(s).unwrap(), &[-1.5]);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = g.cross_entropy_with_logits(logits, &[0]).unwrap();
        assert!((g.item(loss) - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(g.cross_entropy_with_logits(logits, &[5]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.data(s).chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
