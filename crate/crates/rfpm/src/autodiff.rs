//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation; [`Node`] handles index into it. The
//! recorded graph is acyclic by construction (parents always have smaller
//! ids), so a backward pass is a single reverse sweep over the tape.
//! Gradients flow through temporary buffers and are added into each
//! requires-grad node's `grad` at the end of the sweep, so calling
//! [`Node::backward`] twice without clearing accumulates exactly twice the
//! gradient.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RfpmError};
use crate::tensor::Tensor;

/// Leaky-relu slope used by every pyramid and decoder activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Plain-tensor convolution parameter bundle (weights, bias, stride, padding).
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Seeded uniform init in `±sqrt(1/(in_channels*kh*kw))`.
    pub fn init<R: Rng>(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[out_c, in_c, k, k], bound, rng),
            bias: Tensor::rand_uniform(&[out_c], bound, rng),
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (_, _, kh, kw) = self.weight.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(RfpmError::Shape(format!(
                "kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if self.stride == 0 {
            return Err(RfpmError::Parameter("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel identity kernel: `weight[o][i][c][c] = 1` iff `o == i`.
pub fn identity_kernel(channels: usize, k: usize) -> Conv2dParams {
    let mut weight = Tensor::zeros(&[channels, channels, k, k]);
    let c = k / 2;
    for ch in 0..channels {
        let idx = ((ch * channels + ch) * k + c) * k + c;
        weight.data_mut()[idx] = 1.0;
    }
    Conv2dParams {
        weight,
        bias: Tensor::zeros(&[channels]),
        stride: 1,
        padding: k / 2,
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        input: usize,
        argmax: Vec<usize>,
    },
    BilinearSample {
        input: usize,
        coords: usize,
    },
    Add {
        a: usize,
        b: usize,
        broadcast_b: bool,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
        broadcast_b: bool,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    AddScalar {
        input: usize,
    },
    PowF {
        input: usize,
        exponent: f64,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Sigmoid {
        input: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    Upsample2x {
        input: usize,
    },
    Correlate {
        a: usize,
        b: usize,
        radius: usize,
        normalize: bool,
    },
    SumChannels {
        input: usize,
    },
    SumAll {
        input: usize,
    },
    MeanAll {
        input: usize,
    },
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                f(*input);
                f(*weight);
                f(*bias);
            }
            Op::MaxPool2x2 { input, .. }
            | Op::Scale { input, .. }
            | Op::AddScalar { input }
            | Op::PowF { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Upsample2x { input }
            | Op::SumChannels { input }
            | Op::SumAll { input }
            | Op::MeanAll { input } => f(*input),
            Op::BilinearSample { input, coords } => {
                f(*input);
                f(*coords);
            }
            Op::Add { a, b, .. } | Op::Sub { a, b } | Op::Mul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::ConcatChannels { inputs } => inputs.iter().copied().for_each(f),
            Op::Correlate { a, b, .. } => {
                f(*a);
                f(*b);
            }
        }
    }
}

struct NodeData {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording tape shared by all nodes of one graph.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<NodeData>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Node {
        let mut inner = self.inner.borrow_mut();
        inner.push(NodeData {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Node {
            tape: self.clone(),
            id: inner.len() - 1,
        }
    }

    fn push_derived(&self, value: Tensor, op: Op) -> Node {
        let requires_grad = {
            let inner = self.inner.borrow();
            let mut any = false;
            op.for_each_parent(|p| any |= inner[p].requires_grad);
            any
        };
        self.push(value, op, requires_grad)
    }

    /// Constant input node; gradients do not flow into it.
    pub fn leaf(&self, value: Tensor) -> Node {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input node; `backward` populates its gradient.
    pub fn param(&self, value: Tensor) -> Node {
        self.push(value, Op::Leaf, true)
    }

    /// Channel concatenation of (B,C_i,H,W) nodes, order preserved.
    pub fn concat_channels(&self, nodes: &[Node]) -> Result<Node> {
        if nodes.is_empty() {
            return Err(RfpmError::Shape("concat_channels of zero tensors".into()));
        }
        for n in nodes {
            if !Rc::ptr_eq(&self.inner, &n.tape.inner) {
                return Err(RfpmError::Shape("nodes belong to different tapes".into()));
            }
        }
        let value = {
            let inner = self.inner.borrow();
            let first = inner[nodes[0].id].value.dims4()?;
            let (b, _, h, w) = first;
            let mut c_total = 0;
            for n in nodes {
                let (nb, nc, nh, nw) = inner[n.id].value.dims4()?;
                if nb != b || nh != h || nw != w {
                    return Err(RfpmError::Shape(format!(
                        "concat_channels mismatch: ({b},{h},{w}) vs ({nb},{nh},{nw})"
                    )));
                }
                c_total += nc;
            }
            let mut out = Tensor::zeros(&[b, c_total, h, w]);
            let plane = h * w;
            for bi in 0..b {
                let mut dst = bi * c_total * plane;
                for n in nodes {
                    let t = &inner[n.id].value;
                    let nc = t.shape()[1];
                    let src = bi * nc * plane;
                    out.data_mut()[dst..dst + nc * plane]
                        .copy_from_slice(&t.data()[src..src + nc * plane]);
                    dst += nc * plane;
                }
            }
            out
        };
        Ok(self.push_derived(
            value,
            Op::ConcatChannels {
                inputs: nodes.iter().map(|n| n.id).collect(),
            },
        ))
    }
}

/// Handle to one tape entry.
#[derive(Clone)]
pub struct Node {
    tape: Tape,
    id: usize,
}

impl Node {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow()[self.id].value.clone()
    }

    /// The tape this node is recorded on.
    pub fn tape_handle(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, if a backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow()[self.id].grad.clone()
    }

    fn check_same_tape(&self, others: &[&Node]) -> Result<()> {
        for o in others {
            if !Rc::ptr_eq(&self.tape.inner, &o.tape.inner) {
                return Err(RfpmError::Shape("nodes belong to different tapes".into()));
            }
        }
        Ok(())
    }

    /// Cross-correlation convolution with bias and symmetric zero padding.
    pub fn conv2d(&self, weight: &Node, bias: &Node, stride: usize, pad: usize) -> Result<Node> {
        self.check_same_tape(&[weight, bias])?;
        let value = {
            let inner = self.tape.inner.borrow();
            conv2d_forward(
                &inner[self.id].value,
                &inner[weight.id].value,
                &inner[bias.id].value,
                stride,
                pad,
            )?
        };
        Ok(self.tape.push_derived(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                stride,
                pad,
            },
        ))
    }

    /// 2x2 max pooling; ties route the gradient to the first element in
    /// row-major window order.
    pub fn max_pool2x2(&self) -> Result<Node> {
        let (value, argmax) = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            let (b, c, h, w) = t.dims4()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(RfpmError::Shape(format!(
                    "max_pool2x2 needs even spatial dims, got {h}x{w}"
                )));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(&[b, c, oh, ow]);
            let mut argmax = vec![0usize; b * c * oh * ow];
            let data = t.data();
            let mut oi = 0;
            for bc in 0..b * c {
                let plane = bc * h * w;
                for oy in 0..oh {
                    let r0 = plane + (2 * oy) * w;
                    let r1 = r0 + w;
                    for ox in 0..ow {
                        let x = 2 * ox;
                        // strict > keeps the first of tied entries
                        let mut best = data[r0 + x];
                        let mut best_i = r0 + x;
                        if data[r0 + x + 1] > best {
                            best = data[r0 + x + 1];
                            best_i = r0 + x + 1;
                        }
                        if data[r1 + x] > best {
                            best = data[r1 + x];
                            best_i = r1 + x;
                        }
                        if data[r1 + x + 1] > best {
                            best = data[r1 + x + 1];
                            best_i = r1 + x + 1;
                        }
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_i;
                        oi += 1;
                    }
                }
            }
            (out, argmax)
        };
        Ok(self.tape.push_derived(
            value,
            Op::MaxPool2x2 {
                input: self.id,
                argmax,
            },
        ))
    }

    /// Bilinear sampling at absolute (x, y) source coordinates; samples
    /// outside `[0,W-1]x[0,H-1]` contribute zero.
    ///
    /// `coords` is (B,2,H',W') with channel 0 = x and channel 1 = y.
    pub fn bilinear_sample(&self, coords: &Node) -> Result<Node> {
        self.check_same_tape(&[coords])?;
        let value = {
            let inner = self.tape.inner.borrow();
            bilinear_forward(&inner[self.id].value, &inner[coords.id].value)?
        };
        Ok(self.tape.push_derived(
            value,
            Op::BilinearSample {
                input: self.id,
                coords: coords.id,
            },
        ))
    }

    pub fn add(&self, other: &Node) -> Result<Node> {
        self.binary_broadcast(other, true)
    }

    pub fn mul(&self, other: &Node) -> Result<Node> {
        self.binary_broadcast(other, false)
    }

    fn binary_broadcast(&self, other: &Node, is_add: bool) -> Result<Node> {
        self.check_same_tape(&[other])?;
        let (value, broadcast_b) = {
            let inner = self.tape.inner.borrow();
            let a = &inner[self.id].value;
            let b = &inner[other.id].value;
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if is_add { x + y } else { x * y })
                    .collect();
                (Tensor::new(a.shape(), data)?, false)
            } else {
                // channel broadcast: b has C == 1 and otherwise equal dims
                let (ab, ac, ah, aw) = a.dims4()?;
                let (bb, bc, bh, bw) = b.dims4()?;
                if bb != ab || bc != 1 || bh != ah || bw != aw || ac == 1 {
                    return Err(RfpmError::Shape(format!(
                        "elementwise shapes {:?} vs {:?} are incompatible",
                        a.shape(),
                        b.shape()
                    )));
                }
                let plane = ah * aw;
                let mut out = Tensor::zeros(&[ab, ac, ah, aw]);
                for bi in 0..ab {
                    let brow = &b.data()[bi * plane..(bi + 1) * plane];
                    for ci in 0..ac {
                        let off = (bi * ac + ci) * plane;
                        let arow = &a.data()[off..off + plane];
                        let orow = &mut out.data_mut()[off..off + plane];
                        if is_add {
                            for i in 0..plane {
                                orow[i] = arow[i] + brow[i];
                            }
                        } else {
                            for i in 0..plane {
                                orow[i] = arow[i] * brow[i];
                            }
                        }
                    }
                }
                (out, true)
            }
        };
        let op = if is_add {
            Op::Add {
                a: self.id,
                b: other.id,
                broadcast_b,
            }
        } else {
            Op::Mul {
                a: self.id,
                b: other.id,
                broadcast_b,
            }
        };
        Ok(self.tape.push_derived(value, op))
    }

    pub fn sub(&self, other: &Node) -> Result<Node> {
        self.check_same_tape(&[other])?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner[self.id].value;
            let b = &inner[other.id].value;
            if a.shape() != b.shape() {
                return Err(RfpmError::Shape(format!(
                    "sub shapes {:?} vs {:?} differ",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.push_derived(
            value,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect()).unwrap()
        };
        self.tape.push_derived(
            value,
            Op::Scale {
                input: self.id,
                factor,
            },
        )
    }

    pub fn add_scalar(&self, offset: f64) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::new(t.shape(), t.data().iter().map(|v| v + offset).collect()).unwrap()
        };
        self.tape
            .push_derived(value, Op::AddScalar { input: self.id })
    }

    /// Elementwise power; inputs must stay strictly positive when the
    /// exponent is fractional.
    pub fn powf(&self, exponent: f64) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::new(t.shape(), t.data().iter().map(|v| v.powf(exponent)).collect()).unwrap()
        };
        self.tape.push_derived(
            value,
            Op::PowF {
                input: self.id,
                exponent,
            },
        )
    }

    /// `x >= 0 -> x`, `x < 0 -> slope*x`; x = 0 takes the positive branch.
    pub fn leaky_relu(&self, slope: f64) -> Result<Node> {
        if !(0.0..1.0).contains(&slope) {
            return Err(RfpmError::Parameter(format!(
                "leaky_relu slope must be in [0,1), got {slope}"
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::new(
                t.shape(),
                t.data()
                    .iter()
                    .map(|&v| if v >= 0.0 { v } else { slope * v })
                    .collect(),
            )
            .unwrap()
        };
        Ok(self.tape.push_derived(
            value,
            Op::LeakyRelu {
                input: self.id,
                slope,
            },
        ))
    }

    pub fn sigmoid(&self) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::new(
                t.shape(),
                t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            )
            .unwrap()
        };
        self.tape.push_derived(value, Op::Sigmoid { input: self.id })
    }

    /// Bilinear 2x upsampling, align-corners-false, border-replicating taps.
    pub fn upsample2x(&self) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            upsample2x_forward(&inner[self.id].value)?
        };
        Ok(self
            .tape
            .push_derived(value, Op::Upsample2x { input: self.id }))
    }

    /// Windowed correlation over displacements `(-d..=d)^2`, row-major
    /// channel order with (dy,dx) = (-d,-d) first; out-of-range samples
    /// contribute zero. When `normalize` is set the dot product is divided
    /// by the channel count.
    pub fn correlate(&self, other: &Node, radius: usize, normalize: bool) -> Result<Node> {
        self.check_same_tape(&[other])?;
        let value = {
            let inner = self.tape.inner.borrow();
            correlate_forward(
                &inner[self.id].value,
                &inner[other.id].value,
                radius,
                normalize,
            )?
        };
        Ok(self.tape.push_derived(
            value,
            Op::Correlate {
                a: self.id,
                b: other.id,
                radius,
                normalize,
            },
        ))
    }

    /// Sum over the channel dimension, keeping a single channel.
    pub fn sum_channels(&self) -> Result<Node> {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            let (b, c, h, w) = t.dims4()?;
            let plane = h * w;
            let mut out = Tensor::zeros(&[b, 1, h, w]);
            for bi in 0..b {
                let orow = &mut out.data_mut()[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    let row = &t.data()[off..off + plane];
                    for i in 0..plane {
                        orow[i] += row[i];
                    }
                }
            }
            out
        };
        Ok(self
            .tape
            .push_derived(value, Op::SumChannels { input: self.id }))
    }

    pub fn sum_all(&self) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            Tensor::scalar(inner[self.id].value.data().iter().sum())
        };
        self.tape.push_derived(value, Op::SumAll { input: self.id })
    }

    pub fn mean_all(&self) -> Node {
        let value = {
            let inner = self.tape.inner.borrow();
            let t = &inner[self.id].value;
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        };
        self.tape.push_derived(value, Op::MeanAll { input: self.id })
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively
    /// into every reachable requires-grad node.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            if inner[self.id].value.numel() != 1 {
                return Err(RfpmError::Shape(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    inner[self.id].value.shape()
                )));
            }
        }
        let mut temp: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        temp[self.id] = Some(vec![1.0]);
        {
            let inner = self.tape.inner.borrow();
            for id in (0..=self.id).rev() {
                let Some(g) = temp[id].take() else { continue };
                backprop(&inner, id, &g, &mut temp);
                temp[id] = Some(g);
            }
            drop(inner);
        }
        let mut inner = self.tape.inner.borrow_mut();
        for (id, slot) in temp.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &mut inner[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(node.value.shape(), g).expect("grad shape"));
                }
            }
        }
        Ok(())
    }
}

/// Zero-allocating accumulate helper for backward buffers.
fn buf<'a>(temp: &'a mut [Option<Vec<f64>>], id: usize, numel: usize) -> &'a mut [f64] {
    temp[id].get_or_insert_with(|| vec![0.0; numel])
}

fn needs(nodes: &[NodeData], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop(nodes: &[NodeData], id: usize, g: &[f64], temp: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let in_t = &nodes[*input].value;
            let w_t = &nodes[*weight].value;
            if needs(nodes, *input) {
                let gi = buf(temp, *input, in_t.numel());
                conv2d_backward_input(w_t, g, in_t.shape(), *stride, *pad, gi);
            }
            if needs(nodes, *weight) {
                let gw = buf(temp, *weight, w_t.numel());
                conv2d_backward_weight(in_t, g, w_t.shape(), *stride, *pad, gw);
            }
            if needs(nodes, *bias) {
                let (b, _, h, w) = in_t.dims4().unwrap();
                let (oc, _, kh, kw) = w_t.dims4().unwrap();
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let gb = buf(temp, *bias, oc);
                for bi in 0..b {
                    for o in 0..oc {
                        let off = (bi * oc + o) * oh * ow;
                        gb[o] += g[off..off + oh * ow].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::MaxPool2x2 { input, argmax } => {
            if needs(nodes, *input) {
                let gi = buf(temp, *input, nodes[*input].value.numel());
                for (oi, &src) in argmax.iter().enumerate() {
                    gi[src] += g[oi];
                }
            }
        }
        Op::BilinearSample { input, coords } => {
            let need_in = needs(nodes, *input);
            let need_co = needs(nodes, *coords);
            if need_in || need_co {
                bilinear_backward(
                    &nodes[*input].value,
                    &nodes[*coords].value,
                    g,
                    need_in,
                    need_co,
                    *input,
                    *coords,
                    temp,
                );
            }
        }
        Op::Add { a, b, broadcast_b } => {
            if needs(nodes, *a) {
                let ga = buf(temp, *a, nodes[*a].value.numel());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if needs(nodes, *b) {
                let gb = buf(temp, *b, nodes[*b].value.numel());
                if *broadcast_b {
                    reduce_channels_into(&nodes[*a].value, g, gb);
                } else {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(nodes, *a) {
                let ga = buf(temp, *a, nodes[*a].value.numel());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if needs(nodes, *b) {
                let gb = buf(temp, *b, nodes[*b].value.numel());
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul { a, b, broadcast_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if needs(nodes, *a) {
                let ga = buf(temp, *a, av.numel());
                if *broadcast_b {
                    let (ab, ac, ah, aw) = av.dims4().unwrap();
                    let plane = ah * aw;
                    for bi in 0..ab {
                        let brow = &bv.data()[bi * plane..(bi + 1) * plane];
                        for ci in 0..ac {
                            let off = (bi * ac + ci) * plane;
                            for i in 0..plane {
                                ga[off + i] += g[off + i] * brow[i];
                            }
                        }
                    }
                } else {
                    for ((x, y), bvv) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += y * bvv;
                    }
                }
            }
            if needs(nodes, *b) {
                let gb = buf(temp, *b, bv.numel());
                if *broadcast_b {
                    let (ab, ac, ah, aw) = av.dims4().unwrap();
                    let plane = ah * aw;
                    for bi in 0..ab {
                        for ci in 0..ac {
                            let off = (bi * ac + ci) * plane;
                            let gbrow = &mut gb[bi * plane..(bi + 1) * plane];
                            for i in 0..plane {
                                gbrow[i] += g[off + i] * av.data()[off + i];
                            }
                        }
                    }
                } else {
                    for ((x, y), avv) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += y * avv;
                    }
                }
            }
        }
        Op::Scale { input, factor } => {
            if needs(nodes, *input) {
                let gi = buf(temp, *input, nodes[*input].value.numel());
                for (x, y) in gi.iter_mut().zip(g) {
                    *x += y * factor;
                }
            }
        }
        Op::AddScalar { input } => {
            if needs(nodes, *input) {
                let gi = buf(temp, *input, nodes[*input].value.numel());
                for (x, y) in gi.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Op::PowF { input, exponent } => {
            if needs(nodes, *input) {
                let xv = &nodes[*input].value;
                let gi = buf(temp, *input, xv.numel());
                for ((x, y), v) in gi.iter_mut().zip(g).zip(xv.data()) {
                    *x += y * exponent * v.powf(exponent - 1.0);
                }
            }
        }
        Op::LeakyRelu { input, slope } => {
            if needs(nodes, *input) {
                let xv = &nodes[*input].value;
                let gi = buf(temp, *input, xv.numel());
                for ((x, y), v) in gi.iter_mut().zip(g).zip(xv.data()) {
                    *x += if *v >= 0.0 { *y } else { y * slope };
                }
            }
        }
        Op::Sigmoid { input } => {
            if needs(nodes, *input) {
                let sv = &nodes[id].value;
                let gi = buf(temp, *input, sv.numel());
                for ((x, y), s) in gi.iter_mut().zip(g).zip(sv.data()) {
                    *x += y * s * (1.0 - s);
                }
            }
        }
        Op::ConcatChannels { inputs } => {
            let out_t = &nodes[id].value;
            let (b, c_total, h, w) = out_t.dims4().unwrap();
            let plane = h * w;
            let mut c_off = 0;
            for &src in inputs {
                let nc = nodes[src].value.shape()[1];
                if needs(nodes, src) {
                    let gi = buf(temp, src, nodes[src].value.numel());
                    for bi in 0..b {
                        let from = (bi * c_total + c_off) * plane;
                        let to = bi * nc * plane;
                        for i in 0..nc * plane {
                            gi[to + i] += g[from + i];
                        }
                    }
                }
                c_off += nc;
            }
        }
        Op::Upsample2x { input } => {
            if needs(nodes, *input) {
                upsample2x_backward(&nodes[*input].value, g, buf(
                    temp,
                    *input,
                    nodes[*input].value.numel(),
                ));
            }
        }
        Op::Correlate {
            a,
            b,
            radius,
            normalize,
        } => {
            correlate_backward(
                &nodes[*a].value,
                &nodes[*b].value,
                g,
                *radius,
                *normalize,
                needs(nodes, *a),
                needs(nodes, *b),
                *a,
                *b,
                temp,
            );
        }
        Op::SumChannels { input } => {
            if needs(nodes, *input) {
                let xv = &nodes[*input].value;
                let (b, c, h, w) = xv.dims4().unwrap();
                let plane = h * w;
                let gi = buf(temp, *input, xv.numel());
                for bi in 0..b {
                    let grow = &g[bi * plane..(bi + 1) * plane];
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for i in 0..plane {
                            gi[off + i] += grow[i];
                        }
                    }
                }
            }
        }
        Op::SumAll { input } => {
            if needs(nodes, *input) {
                let gi = buf(temp, *input, nodes[*input].value.numel());
                for x in gi.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::MeanAll { input } => {
            if needs(nodes, *input) {
                let n = nodes[*input].value.numel();
                let gi = buf(temp, *input, n);
                let gv = g[0] / n as f64;
                for x in gi.iter_mut() {
                    *x += gv;
                }
            }
        }
    }
}

/// Sums `g` (shape of `a`) over channels into `gb` (single channel).
fn reduce_channels_into(a: &Tensor, g: &[f64], gb: &mut [f64]) {
    let (ab, ac, ah, aw) = a.dims4().unwrap();
    let plane = ah * aw;
    for bi in 0..ab {
        for ci in 0..ac {
            let off = (bi * ac + ci) * plane;
            let out = &mut gb[bi * plane..(bi + 1) * plane];
            for i in 0..plane {
                out[i] += g[off + i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// Accumulates a 3x3 stride-1 pad-1 stencil of `src` into `dst` (both
/// `h`x`w` planes). `zero` is a reusable all-zero row standing in for the
/// padded rows above and below.
fn stencil3x3_add(src: &[f64], dst: &mut [f64], w9: &[f64; 9], h: usize, w: usize, zero: &[f64]) {
    for y in 0..h {
        let rm: &[f64] = if y > 0 { &src[(y - 1) * w..y * w] } else { zero };
        let r0 = &src[y * w..(y + 1) * w];
        let rp: &[f64] = if y + 1 < h {
            &src[(y + 1) * w..(y + 2) * w]
        } else {
            zero
        };
        let drow = &mut dst[y * w..(y + 1) * w];
        {
            let mut acc = w9[1] * rm[0] + w9[4] * r0[0] + w9[7] * rp[0];
            if w > 1 {
                acc += w9[2] * rm[1] + w9[5] * r0[1] + w9[8] * rp[1];
            }
            drow[0] += acc;
        }
        for x in 1..w.saturating_sub(1) {
            drow[x] += w9[0] * rm[x - 1] + w9[1] * rm[x] + w9[2] * rm[x + 1]
                + w9[3] * r0[x - 1]
                + w9[4] * r0[x]
                + w9[5] * r0[x + 1]
                + w9[6] * rp[x - 1]
                + w9[7] * rp[x]
                + w9[8] * rp[x + 1];
        }
        if w > 1 {
            let x = w - 1;
            drow[x] += w9[0] * rm[x - 1] + w9[1] * rm[x] + w9[3] * r0[x - 1] + w9[4] * r0[x]
                + w9[6] * rp[x - 1]
                + w9[7] * rp[x];
        }
    }
}

/// Accumulates the nine weight gradients of a 3x3 stride-1 pad-1 convolution
/// from an input plane and an output-gradient plane.
fn stencil3x3_wgrad(src: &[f64], g: &[f64], h: usize, w: usize, zero: &[f64], acc: &mut [f64; 9]) {
    for y in 0..h {
        let rm: &[f64] = if y > 0 { &src[(y - 1) * w..y * w] } else { zero };
        let r0 = &src[y * w..(y + 1) * w];
        let rp: &[f64] = if y + 1 < h {
            &src[(y + 1) * w..(y + 2) * w]
        } else {
            zero
        };
        let grow = &g[y * w..(y + 1) * w];
        {
            let gv = grow[0];
            acc[1] += gv * rm[0];
            acc[4] += gv * r0[0];
            acc[7] += gv * rp[0];
            if w > 1 {
                acc[2] += gv * rm[1];
                acc[5] += gv * r0[1];
                acc[8] += gv * rp[1];
            }
        }
        for x in 1..w.saturating_sub(1) {
            let gv = grow[x];
            acc[0] += gv * rm[x - 1];
            acc[1] += gv * rm[x];
            acc[2] += gv * rm[x + 1];
            acc[3] += gv * r0[x - 1];
            acc[4] += gv * r0[x];
            acc[5] += gv * r0[x + 1];
            acc[6] += gv * rp[x - 1];
            acc[7] += gv * rp[x];
            acc[8] += gv * rp[x + 1];
        }
        if w > 1 {
            let x = w - 1;
            let gv = grow[x];
            acc[0] += gv * rm[x - 1];
            acc[1] += gv * rm[x];
            acc[3] += gv * r0[x - 1];
            acc[4] += gv * r0[x];
            acc[6] += gv * rp[x - 1];
            acc[7] += gv * rp[x];
        }
    }
}

/// Output rows `o` for which `o*stride + k - pad` lands inside `[0, limit)`.
fn conv_out_range(limit: usize, k: usize, pad: usize, stride: usize, out_dim: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = limit as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, cin_w, kh, kw) = weight.dims4()?;
    if cin != cin_w {
        return Err(RfpmError::Shape(format!(
            "conv2d channels: input has {cin}, weight expects {cin_w}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(RfpmError::Shape(format!(
            "conv2d kernel dims must be odd, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(RfpmError::Shape(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(RfpmError::Parameter("conv2d stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(RfpmError::Shape(format!(
            "conv2d output dims would be empty for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let odata = out.data_mut();
    let idata = input.data();
    let wdata = weight.data();
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 {
        // dominant case in the decoder; fused nine-tap stencil
        let zero = vec![0.0; w];
        for bi in 0..b {
            for oc in 0..cout {
                let oplane =
                    &mut odata[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
                oplane.fill(bias.data()[oc]);
                for ic in 0..cin {
                    let iplane = &idata[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let base = (oc * cin + ic) * 9;
                    let w9: [f64; 9] = wdata[base..base + 9].try_into().unwrap();
                    stencil3x3_add(iplane, oplane, &w9, h, w, &zero);
                }
            }
        }
        return Ok(out);
    }
    for bi in 0..b {
        for oc in 0..cout {
            let oplane = &mut odata[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
            oplane.fill(bias.data()[oc]);
            for ic in 0..cin {
                let iplane = &idata[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_out_range(h, ky, pad, stride, oh);
                    for kx in 0..kw {
                        let wv = wdata[((oc * cin + ic) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = conv_out_range(w, kx, pad, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * w..iy * w + w];
                            let orow = &mut oplane[oy * ow..oy * ow + ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                let src = &irow[ix0..ix0 + n];
                                let dst = &mut orow[ox_lo..ox_hi];
                                for i in 0..n {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward_input(
    weight: &Tensor,
    g_out: &[f64],
    in_shape: &[usize],
    stride: usize,
    pad: usize,
    gi: &mut [f64],
) {
    let (b, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, _, kh, kw) = weight.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let wdata = weight.data();
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 {
        // input gradient is the stencil of g_out with the rotated kernel
        let zero = vec![0.0; w];
        for bi in 0..b {
            for oc in 0..cout {
                let gplane = &g_out[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
                for ic in 0..cin {
                    let giplane = &mut gi[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let base = (oc * cin + ic) * 9;
                    let mut w9 = [0.0; 9];
                    for (i, v) in w9.iter_mut().enumerate() {
                        *v = wdata[base + 8 - i];
                    }
                    stencil3x3_add(gplane, giplane, &w9, h, w, &zero);
                }
            }
        }
        return;
    }
    for bi in 0..b {
        for oc in 0..cout {
            let gplane = &g_out[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
            for ic in 0..cin {
                let giplane = &mut gi[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_out_range(h, ky, pad, stride, oh);
                    for kx in 0..kw {
                        let wv = wdata[((oc * cin + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_out_range(w, kx, pad, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..oy * ow + ow];
                            let girow = &mut giplane[iy * w..iy * w + w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                let src = &grow[ox_lo..ox_hi];
                                let dst = &mut girow[ix0..ix0 + n];
                                for i in 0..n {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    girow[ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(
    input: &Tensor,
    g_out: &[f64],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    gw: &mut [f64],
) {
    let (b, cin, h, w) = input.dims4().unwrap();
    let (cout, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let idata = input.data();
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 {
        let zero = vec![0.0; w];
        for bi in 0..b {
            for oc in 0..cout {
                let gplane = &g_out[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
                for ic in 0..cin {
                    let iplane = &idata[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                    let mut acc = [0.0; 9];
                    stencil3x3_wgrad(iplane, gplane, h, w, &zero, &mut acc);
                    let base = (oc * cin + ic) * 9;
                    for (i, v) in acc.iter().enumerate() {
                        gw[base + i] += v;
                    }
                }
            }
        }
        return;
    }
    for bi in 0..b {
        for oc in 0..cout {
            let gplane = &g_out[(bi * cout + oc) * oh * ow..(bi * cout + oc + 1) * oh * ow];
            for ic in 0..cin {
                let iplane = &idata[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_out_range(h, ky, pad, stride, oh);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = conv_out_range(w, kx, pad, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..oy * ow + ow];
                            let irow = &iplane[iy * w..iy * w + w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                let gs = &grow[ox_lo..ox_hi];
                                let is = &irow[ix0..ix0 + n];
                                for i in 0..n {
                                    acc += gs[i] * is[i];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += grow[ox] * irow[ix];
                                }
                            }
                        }
                        gw[((oc * cin + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn bilinear_forward(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (cb, cc, ch, cw) = coords.dims4()?;
    if cb != b || cc != 2 {
        return Err(RfpmError::Shape(format!(
            "bilinear_sample coords must be (B,2,H,W), got {:?}",
            coords.shape()
        )));
    }
    let plane = h * w;
    let oplane = ch * cw;
    let mut out = Tensor::zeros(&[b, c, ch, cw]);
    let idata = input.data();
    let cdata = coords.data();
    let odata = out.data_mut();
    for bi in 0..b {
        let xs = &cdata[bi * 2 * oplane..bi * 2 * oplane + oplane];
        let ys = &cdata[bi * 2 * oplane + oplane..bi * 2 * oplane + 2 * oplane];
        for oi in 0..oplane {
            let x = xs[oi];
            let y = ys[oi];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let x0i = x0 as isize;
            let y0i = y0 as isize;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let taps = [
                (x0i, y0i, w00),
                (x0i + 1, y0i, w10),
                (x0i, y0i + 1, w01),
                (x0i + 1, y0i + 1, w11),
            ];
            for ci in 0..c {
                let iplane = &idata[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                let mut v = 0.0;
                for &(tx, ty, tw) in &taps {
                    if tx >= 0 && tx < w as isize && ty >= 0 && ty < h as isize {
                        v += tw * iplane[ty as usize * w + tx as usize];
                    }
                }
                odata[(bi * c + ci) * oplane + oi] = v;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward(
    input: &Tensor,
    coords: &Tensor,
    g: &[f64],
    need_in: bool,
    need_co: bool,
    input_id: usize,
    coords_id: usize,
    temp: &mut [Option<Vec<f64>>],
) {
    let (b, c, h, w) = input.dims4().unwrap();
    let (_, _, ch, cw) = coords.dims4().unwrap();
    let plane = h * w;
    let oplane = ch * cw;
    let mut g_in = vec![0.0; if need_in { input.numel() } else { 0 }];
    let mut g_co = vec![0.0; if need_co { coords.numel() } else { 0 }];
    let idata = input.data();
    let cdata = coords.data();
    for bi in 0..b {
        let xs = &cdata[bi * 2 * oplane..bi * 2 * oplane + oplane];
        let ys = &cdata[bi * 2 * oplane + oplane..bi * 2 * oplane + 2 * oplane];
        for oi in 0..oplane {
            let x = xs[oi];
            let y = ys[oi];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let x0i = x0 as isize;
            let y0i = y0 as isize;
            let inside =
                |tx: isize, ty: isize| tx >= 0 && tx < w as isize && ty >= 0 && ty < h as isize;
            let taps = [
                (x0i, y0i, (1.0 - fx) * (1.0 - fy)),
                (x0i + 1, y0i, fx * (1.0 - fy)),
                (x0i, y0i + 1, (1.0 - fx) * fy),
                (x0i + 1, y0i + 1, fx * fy),
            ];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ci in 0..c {
                let go = g[(bi * c + ci) * oplane + oi];
                if go == 0.0 {
                    continue;
                }
                let iplane_off = (bi * c + ci) * plane;
                let fetch = |tx: isize, ty: isize| {
                    if inside(tx, ty) {
                        idata[iplane_off + ty as usize * w + tx as usize]
                    } else {
                        0.0
                    }
                };
                if need_in {
                    for &(tx, ty, tw) in &taps {
                        if inside(tx, ty) {
                            g_in[iplane_off + ty as usize * w + tx as usize] += go * tw;
                        }
                    }
                }
                if need_co {
                    let v00 = fetch(x0i, y0i);
                    let v10 = fetch(x0i + 1, y0i);
                    let v01 = fetch(x0i, y0i + 1);
                    let v11 = fetch(x0i + 1, y0i + 1);
                    gx += go * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                    gy += go * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                }
            }
            if need_co {
                g_co[bi * 2 * oplane + oi] += gx;
                g_co[bi * 2 * oplane + oplane + oi] += gy;
            }
        }
    }
    if need_in {
        let dst = buf(temp, input_id, input.numel());
        for (d, s) in dst.iter_mut().zip(&g_in) {
            *d += s;
        }
    }
    if need_co {
        let dst = buf(temp, coords_id, coords.numel());
        for (d, s) in dst.iter_mut().zip(&g_co) {
            *d += s;
        }
    }
}

fn upsample2x_forward(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let taps_x: Vec<(usize, usize, f64)> = (0..ow).map(|ox| tap1d(ox, w)).collect();
    let taps_y: Vec<(usize, usize, f64)> = (0..oh).map(|oy| tap1d(oy, h)).collect();
    let idata = input.data();
    let odata = out.data_mut();
    for bc in 0..b * c {
        let iplane = &idata[bc * h * w..(bc + 1) * h * w];
        let oplane = &mut odata[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = taps_y[oy];
            let r0 = &iplane[y0 * w..y0 * w + w];
            let r1 = &iplane[y1 * w..y1 * w + w];
            let orow = &mut oplane[oy * ow..oy * ow + ow];
            for ox in 0..ow {
                let (x0, x1, fx) = taps_x[ox];
                let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                orow[ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Ok(out)
}

/// Source taps for align-corners-false 2x upsampling with border replication.
fn tap1d(o: usize, in_dim: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let s0 = s.floor();
    let f = s - s0;
    let i0 = (s0 as isize).clamp(0, in_dim as isize - 1) as usize;
    let i1 = (s0 as isize + 1).clamp(0, in_dim as isize - 1) as usize;
    (i0, i1, f)
}

fn upsample2x_backward(input: &Tensor, g: &[f64], gi: &mut [f64]) {
    let (b, c, h, w) = input.dims4().unwrap();
    let (oh, ow) = (2 * h, 2 * w);
    let taps_x: Vec<(usize, usize, f64)> = (0..ow).map(|ox| tap1d(ox, w)).collect();
    let taps_y: Vec<(usize, usize, f64)> = (0..oh).map(|oy| tap1d(oy, h)).collect();
    for bc in 0..b * c {
        let gplane = &g[bc * oh * ow..(bc + 1) * oh * ow];
        let giplane = &mut gi[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = taps_y[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = taps_x[ox];
                let gv = gplane[oy * ow + ox];
                giplane[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                giplane[y0 * w + x1] += gv * fx * (1.0 - fy);
                giplane[y1 * w + x0] += gv * (1.0 - fx) * fy;
                giplane[y1 * w + x1] += gv * fx * fy;
            }
        }
    }
}

fn correlate_forward(a: &Tensor, b: &Tensor, radius: usize, normalize: bool) -> Result<Tensor> {
    let (ba, c, h, w) = a.dims4()?;
    if a.shape() != b.shape() {
        return Err(RfpmError::Shape(format!(
            "correlate shapes {:?} vs {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let k = 2 * radius + 1;
    let channels = k * k;
    let mut out = Tensor::zeros(&[ba, channels, h, w]);
    let plane = h * w;
    let scale = if normalize { 1.0 / c as f64 } else { 1.0 };
    let adata = a.data();
    let bdata = b.data();
    let odata = out.data_mut();
    let r = radius as isize;
    for bi in 0..ba {
        for dy in -r..=r {
            for dx in -r..=r {
                let kidx = ((dy + r) as usize) * k + (dx + r) as usize;
                let oplane = &mut odata[(bi * channels + kidx) * plane..(bi * channels + kidx + 1) * plane];
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for ci in 0..c {
                    let ap = &adata[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    let bp = &bdata[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    for y in y_lo..y_hi {
                        let y2 = (y as isize + dy) as usize;
                        let arow = &ap[y * w + x_lo..y * w + x_hi];
                        let brow = &bp[y2 * w + (x_lo as isize + dx) as usize
                            ..y2 * w + (x_hi as isize + dx) as usize];
                        let orow = &mut oplane[y * w + x_lo..y * w + x_hi];
                        for i in 0..arow.len() {
                            orow[i] += arow[i] * brow[i];
                        }
                    }
                }
                if normalize {
                    for v in oplane.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn correlate_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    radius: usize,
    normalize: bool,
    need_a: bool,
    need_b: bool,
    a_id: usize,
    b_id: usize,
    temp: &mut [Option<Vec<f64>>],
) {
    if !need_a && !need_b {
        return;
    }
    let (ba, c, h, w) = a.dims4().unwrap();
    let k = 2 * radius + 1;
    let channels = k * k;
    let plane = h * w;
    let scale = if normalize { 1.0 / c as f64 } else { 1.0 };
    let mut g_a = vec![0.0; if need_a { a.numel() } else { 0 }];
    let mut g_b = vec![0.0; if need_b { b.numel() } else { 0 }];
    let r = radius as isize;
    let adata = a.data();
    let bdata = b.data();
    for bi in 0..ba {
        for dy in -r..=r {
            for dx in -r..=r {
                let kidx = ((dy + r) as usize) * k + (dx + r) as usize;
                let gplane = &g[(bi * channels + kidx) * plane..(bi * channels + kidx + 1) * plane];
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for y in y_lo..y_hi {
                        let y2 = (y as isize + dy) as usize;
                        let row_a = off + y * w;
                        let row_b = off + y2 * w + (x_lo as isize + dx) as usize - x_lo;
                        for x in x_lo..x_hi {
                            let gv = gplane[y * w + x] * scale;
                            if need_a {
                                g_a[row_a + x] += gv * bdata[row_b + x];
                            }
                            if need_b {
                                g_b[row_b + x] += gv * adata[row_a + x];
                            }
                        }
                    }
                }
            }
        }
    }
    if need_a {
        let dst = buf(temp, a_id, a.numel());
        for (d, s) in dst.iter_mut().zip(&g_a) {
            *d += s;
        }
    }
    if need_b {
        let dst = buf(temp, b_id, b.numel());
        for (d, s) in dst.iter_mut().zip(&g_b) {
            *d += s;
        }
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Compares analytic gradients of `f` against central finite differences on
/// sampled parameter entries; returns the maximum relative error
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    f: &F,
    params: &[Tensor],
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Node]) -> Result<Node>,
{
    if eps <= 0.0 {
        return Err(RfpmError::Parameter("grad_check eps must be positive".into()));
    }
    let tape = Tape::new();
    let nodes: Vec<Node> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&nodes)?;
    if loss.numel() != 1 {
        return Err(RfpmError::Shape("grad_check f must return a scalar".into()));
    }
    loss.backward()?;
    let analytic: Vec<Tensor> = nodes
        .iter()
        .map(|n| {
            n.grad()
                .unwrap_or_else(|| Tensor::zeros(&n.shape()))
        })
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let ns: Vec<Node> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&ns)?;
        let v = out.value().data()[0];
        if !v.is_finite() {
            return Err(RfpmError::Numeric("non-finite value in grad_check".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut scratch = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        for _ in 0..samples_per_tensor.min(n.max(1)) {
            let idx = rng.gen_range(0..n);
            let orig = p.data()[idx];
            scratch[pi].data_mut()[idx] = orig + eps;
            let fp = eval(&scratch)?;
            scratch[pi].data_mut()[idx] = orig - eps;
            let fm = eval(&scratch)?;
            scratch[pi].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let ana = analytic[pi].data()[idx];
            if !numeric.is_finite() || !ana.is_finite() {
                return Err(RfpmError::Numeric(
                    "non-finite gradient in grad_check".into(),
                ));
            }
            let err = (ana - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, 1.0, &mut rng(seed))
    }

    /// Quadruple-loop reference convolution used as an independent oracle.
    fn conv2d_reference(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (b, cin, h, w) = input.dims4().unwrap();
        let (cout, _, kh, kw) = weight.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        for bi in 0..b {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[oc];
                        for ic in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize * stride as isize + ky as isize
                                        - pad as isize;
                                    let ix = ox as isize * stride as isize + kx as isize
                                        - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += input.at4(bi, ic, iy as usize, ix as usize)
                                            * weight.at4(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set4(bi, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones_center_is_nine() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.value().at4(0, 0, 1, 1), 9.0);
    }

    #[test]
    fn conv_identity_1x1_is_exact() {
        let tape = Tape::new();
        let xt = rand_tensor(&[2, 3, 5, 4], 1);
        let x = tape.leaf(xt.clone());
        let id = identity_kernel(3, 1);
        let w = tape.leaf(id.weight);
        let b = tape.leaf(id.bias);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.value(), xt);
    }

    #[test]
    fn conv_stride2_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            x.conv2d(&w, &b, 1, 1),
            Err(RfpmError::Shape(_))
        ));
    }

    #[test]
    fn conv_empty_output_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(x.conv2d(&w, &b, 1, 0), Err(RfpmError::Shape(_))));
    }

    #[test]
    fn conv_matches_reference_oracle() {
        for (shape, k, stride, pad, seed) in [
            ([1, 3, 8, 8], 3, 2, 1, 11),
            ([2, 2, 7, 5], 3, 1, 1, 12),
            ([1, 4, 6, 6], 1, 1, 0, 13),
            ([1, 2, 9, 9], 3, 2, 1, 14),
        ] {
            let x = rand_tensor(&shape, seed);
            let w = rand_tensor(&[3, shape[1], k, k], seed + 100);
            let b = rand_tensor(&[3], seed + 200);
            let tape = Tape::new();
            let y = tape
                .leaf(x.clone())
                .conv2d(&tape.leaf(w.clone()), &tape.leaf(b.clone()), stride, pad)
                .unwrap();
            let reference = conv2d_reference(&x, &w, &b, stride, pad);
            assert!(y.value().max_abs_diff(&reference) < 1e-12);
        }
    }

    #[test]
    fn conv_grad_check() {
        let x = rand_tensor(&[1, 2, 6, 6], 2);
        let w = rand_tensor(&[3, 2, 3, 3], 3);
        let b = rand_tensor(&[3], 4);
        let err = grad_check(
            &|p: &[Node]| {
                let y = p[0].conv2d(&p[1], &p[2], 2, 1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[x, w, b],
            1e-5,
            25,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "conv grad err {err}");
    }

    #[test]
    fn max_pool_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.max_pool2x2().unwrap().value().data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[1, 2, 4, 4], 2.5));
        let p = c.max_pool2x2().unwrap();
        assert_eq!(p.shape(), vec![1, 2, 2, 2]);
        assert!(p.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn max_pool_odd_dims_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(x.max_pool2x2(), Err(RfpmError::Shape(_))));
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap());
        let y = x.max_pool2x2().unwrap();
        assert_eq!(y.value().data(), &[5.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_grad_check_away_from_ties() {
        // entries spaced out so no 2x2 window has a tie or near-tie
        let mut t = Tensor::zeros(&[1, 1, 4, 4]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i as f64) * 0.37 + ((i * 7) % 5) as f64;
        }
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].max_pool2x2()?.sum_all()),
            &[t],
            1e-5,
            16,
            8,
        )
        .unwrap();
        assert!(err < 1e-4, "maxpool grad err {err}");
    }

    #[test]
    fn bilinear_identity_grid_bit_exact() {
        let xt = rand_tensor(&[1, 3, 5, 7], 5);
        let tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let mut grid = Tensor::zeros(&[1, 2, 5, 7]);
        for y in 0..5 {
            for xcol in 0..7 {
                grid.set4(0, 0, y, xcol, xcol as f64);
                grid.set4(0, 1, y, xcol, y as f64);
            }
        }
        let c = tape.leaf(grid);
        let out = x.bilinear_sample(&c).unwrap();
        assert_eq!(out.value(), xt);
    }

    #[test]
    fn bilinear_midpoint_and_outside() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![10.0, 20.0]).unwrap());
        let mid = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.0]).unwrap());
        assert_eq!(x.bilinear_sample(&mid).unwrap().value().data(), &[15.0]);
        let outside = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![-1.0, 0.0]).unwrap());
        assert_eq!(x.bilinear_sample(&outside).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn bilinear_grad_check() {
        let x = rand_tensor(&[1, 2, 6, 6], 6);
        // fractional coordinates well away from integer kinks
        let mut coords = Tensor::zeros(&[1, 2, 4, 4]);
        let mut r = rng(9);
        for v in coords.data_mut().iter_mut() {
            *v = rand::Rng::gen_range(&mut r, 0.3..4.7);
            if (*v - v.round()).abs() < 0.1 {
                *v += 0.17;
            }
        }
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].bilinear_sample(&p[1])?.sum_all()),
            &[x, coords],
            1e-5,
            25,
            10,
        )
        .unwrap();
        assert!(err < 1e-4, "bilinear grad err {err}");
    }

    #[test]
    fn elementwise_identities() {
        let tape = Tape::new();
        let xt = rand_tensor(&[1, 4, 3, 3], 20);
        let x = tape.leaf(xt.clone());
        let ones = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        assert_eq!(x.mul(&ones).unwrap().value(), xt);
        let zeros = tape.leaf(Tensor::zeros(&[1, 4, 3, 3]));
        assert_eq!(x.add(&zeros).unwrap().value(), xt);
    }

    #[test]
    fn elementwise_bad_broadcast() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 3, 3]));
        let y = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(x.mul(&y), Err(RfpmError::Shape(_))));
    }

    #[test]
    fn elementwise_grad_check_broadcast() {
        let a = rand_tensor(&[1, 3, 4, 4], 21);
        let m = rand_tensor(&[1, 1, 4, 4], 22);
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].mul(&p[1])?.add(&p[0].add(&p[1])?)?.sum_all()),
            &[a, m],
            1e-5,
            25,
            23,
        )
        .unwrap();
        assert!(err < 1e-4, "elementwise grad err {err}");
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::new();
        let parts: Vec<Node> = (0..3)
            .map(|i| tape.leaf(rand_tensor(&[1, 16, 4, 4], 30 + i)))
            .collect();
        let cat = tape.concat_channels(&parts).unwrap();
        assert_eq!(cat.shape(), vec![1, 48, 4, 4]);

        let single = tape.concat_channels(&parts[..1]).unwrap();
        assert_eq!(single.value(), parts[0].value());

        let bad = tape.leaf(Tensor::zeros(&[1, 16, 8, 4]));
        assert!(matches!(
            tape.concat_channels(&[parts[0].clone(), bad]),
            Err(RfpmError::Shape(_))
        ));
    }

    #[test]
    fn concat_slices_back_bit_exact() {
        let tape = Tape::new();
        let a = rand_tensor(&[2, 3, 4, 5], 40);
        let b = rand_tensor(&[2, 2, 4, 5], 41);
        let cat = tape
            .concat_channels(&[tape.leaf(a.clone()), tape.leaf(b.clone())])
            .unwrap()
            .value();
        let plane = 4 * 5;
        for bi in 0..2 {
            for ci in 0..3 {
                let got = &cat.data()[(bi * 5 + ci) * plane..(bi * 5 + ci + 1) * plane];
                let want = &a.data()[(bi * 3 + ci) * plane..(bi * 3 + ci + 1) * plane];
                assert_eq!(got, want);
            }
            for ci in 0..2 {
                let got = &cat.data()[(bi * 5 + 3 + ci) * plane..(bi * 5 + 4 + ci) * plane];
                let want = &b.data()[(bi * 2 + ci) * plane..(bi * 2 + ci + 1) * plane];
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn concat_grad_check() {
        let a = rand_tensor(&[1, 2, 3, 3], 42);
        let b = rand_tensor(&[1, 3, 3, 3], 43);
        let err = grad_check(
            &|p: &[Node]| {
                let cat = p[0].tape.concat_channels(p)?;
                Ok(cat.mul(&cat)?.sum_all())
            },
            &[a, b],
            1e-5,
            25,
            44,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn leaky_relu_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![2.0, -2.0, 0.0]).unwrap());
        let y = x.leaky_relu(0.1).unwrap();
        assert_eq!(y.value().data(), &[2.0, -0.2, 0.0]);
        let relu = x.leaky_relu(0.0).unwrap();
        assert_eq!(relu.value().data(), &[2.0, 0.0, 0.0]);
        assert!(x.leaky_relu(1.0).is_err());
    }

    #[test]
    fn leaky_relu_grad_check_away_from_zero() {
        let mut t = rand_tensor(&[1, 2, 4, 4], 50);
        for v in t.data_mut().iter_mut() {
            if v.abs() < 0.05 {
                *v += 0.1_f64.copysign(*v + 0.01);
            }
        }
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].leaky_relu(0.1)?.sum_all()),
            &[t],
            1e-5,
            25,
            51,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn sigmoid_grad_check() {
        let t = rand_tensor(&[1, 2, 3, 3], 52);
        let err = grad_check(&|p: &[Node]| Ok(p[0].sigmoid().sum_all()), &[t], 1e-5, 25, 53)
            .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[1, 2, 3, 3], 4.2));
        let up = c.upsample2x().unwrap();
        assert_eq!(up.shape(), vec![1, 2, 6, 6]);
        assert!(up.value().data().iter().all(|&v| (v - 4.2).abs() < 1e-15));

        let one = tape.leaf(Tensor::full(&[1, 1, 1, 1], 7.0));
        assert_eq!(one.upsample2x().unwrap().value().data(), &[7.0; 4]);

        // upsample then 2x2 average of a constant returns the constant
        let down = crate::tensor::avg_pool2x2(&up.value()).unwrap();
        assert!(down.data().iter().all(|&v| (v - 4.2).abs() < 1e-15));
    }

    #[test]
    fn upsample_grad_check() {
        let t = rand_tensor(&[1, 2, 4, 4], 54);
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].upsample2x()?.mul(&p[0].upsample2x()?)?.sum_all()),
            &[t],
            1e-5,
            25,
            55,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn backward_linear_form() {
        let tape = Tape::new();
        let xt = rand_tensor(&[1, 1, 2, 3], 60);
        let w = tape.param(rand_tensor(&[1, 1, 2, 3], 61));
        let x = tape.leaf(xt.clone());
        w.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), xt);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        // loss = x + x*x -> dloss/dx = 1 + 2x = 7
        let loss = x.add(&x.mul(&x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let tape = Tape::new();
        let x = tape.param(rand_tensor(&[4], 62));
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_non_scalar_errors() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(x.backward(), Err(RfpmError::Shape(_))));
    }

    #[test]
    fn grad_check_constant_function() {
        let t = rand_tensor(&[3], 63);
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].scale(0.0).sum_all()),
            &[t],
            1e-5,
            10,
            64,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn correlate_const_and_ordering() {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::ones(&[1, 4, 4, 4]));
        let v = f.correlate(&f, 0, true).unwrap();
        assert_eq!(v.shape(), vec![1, 1, 4, 4]);
        assert!(v.value().data().iter().all(|&x| x == 1.0));

        let v1 = f.correlate(&f, 1, true).unwrap();
        assert_eq!(v1.shape(), vec![1, 9, 4, 4]);
        // center channel index 2d(d+1) = 4
        assert_eq!(v1.value().at4(0, 4, 2, 2), 1.0);
    }

    #[test]
    fn correlate_grad_check() {
        let a = rand_tensor(&[1, 3, 5, 5], 70);
        let b = rand_tensor(&[1, 3, 5, 5], 71);
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].correlate(&p[1], 2, true)?.sum_all()),
            &[a, b],
            1e-5,
            25,
            72,
        )
        .unwrap();
        assert!(err < 1e-4, "correlate grad err {err}");
    }

    #[test]
    fn reductions_grad_check() {
        let base = rand_tensor(&[1, 3, 4, 4], 73);
        let pos = Tensor::new(
            base.shape(),
            base.data().iter().map(|v| v.abs() + 0.5).collect(),
        )
        .unwrap();
        let err = grad_check(
            &|p: &[Node]| Ok(p[0].sum_channels()?.add_scalar(0.25).powf(0.7).mean_all()),
            &[pos],
            1e-5,
            25,
            74,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    proptest! {
        #[test]
        fn prop_concat_then_slice_roundtrip(
            c1 in 1usize..4, c2 in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000
        ) {
            let a = rand_tensor(&[1, c1, h, w], seed);
            let b = rand_tensor(&[1, c2, h, w], seed + 1);
            let tape = Tape::new();
            let cat = tape.concat_channels(&[tape.leaf(a.clone()), tape.leaf(b.clone())]).unwrap().value();
            let plane = h * w;
            prop_assert_eq!(&cat.data()[..c1 * plane], a.data());
            prop_assert_eq!(&cat.data()[c1 * plane..], b.data());
        }

        #[test]
        fn prop_conv_identity_kernel(
            c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000
        ) {
            let x = rand_tensor(&[1, c, h, w], seed);
            let id = identity_kernel(c, 1);
            let tape = Tape::new();
            let y = tape.leaf(x.clone())
                .conv2d(&tape.leaf(id.weight), &tape.leaf(id.bias), 1, 0)
                .unwrap();
            prop_assert_eq!(y.value(), x);
        }
    }
}
