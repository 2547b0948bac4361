//! Operation tape and reverse-mode sweep.
//!
//! Every forward op appends a node holding its output value and the handles of
//! its operands. `backward` walks the tape once in reverse, accumulating
//! gradients, so a tensor used several times receives the sum of all uses.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::deform::{deform_backward, deform_forward, DeformGrads};
use crate::error::{Result, TensorError};
use crate::resample::{upsample2x_backward, upsample2x_forward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    MuLaw(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    DeformConv {
        input: Var,
        offsets: Var,
        masks: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    SliceBatch {
        input: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Upsample2x(Var),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_ran: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Clears all gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_ran = false;
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        self.unary("scale", a, Op::Scale(a, factor), |x| x * f)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * s
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), |x| x.abs())
    }

    /// `log(1 + mu * min(x, 1)) / log(1 + mu)`; inputs must be non-negative.
    pub fn mu_law(&mut self, a: Var, mu: f64) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "mu_law",
                msg: "input contains negative values".into(),
            });
        }
        let (m, denom) = (T::of(mu), T::of(mu.ln_1p()));
        self.unary("mu_law", a, Op::MuLaw(a, mu), |x| (m * x.min(T::one())).ln_1p() / denom)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    /// Modulated deformable convolution; see the `deform` module docs for layouts.
    pub fn deform_conv(
        &mut self,
        input: Var,
        offsets: Var,
        masks: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let out = deform_forward(
            self.value(input),
            self.value(offsets),
            self.value(masks),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, offsets, masks, weight];
        deps.extend(bias);
        self.push(
            "deform_conv",
            out,
            Op::DeformConv {
                input,
                offsets,
                masks,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let item = v.numel() / n;
                data.extend_from_slice(&v.data()[b * item..(b + 1) * item]);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start + len > c || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                msg: format!("range {start}..{} out of {c} channels", start + len),
            });
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * h * w);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * h * w..(b * c + start + len) * h * w]);
        }
        let out = Tensor::new(vec![n, len, h, w], data)?;
        self.push("slice_channels", out, Op::SliceChannels { input, start }, &[input])
    }

    /// Batch item `index`, keeping a batch axis of size 1.
    pub fn select_batch(&mut self, input: Var, index: usize) -> Result<Var> {
        self.slice_batch(input, index, 1)
    }

    /// Batch items `start..start + len`.
    pub fn slice_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        let (n, c, h, w) = v.dims4()?;
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_batch",
                msg: format!("range {start}..{} out of batch {n}", start + len),
            });
        }
        let item = c * h * w;
        let out = Tensor::new(vec![len, c, h, w], v.data()[start * item..(start + len) * item].to_vec())?;
        self.push("slice_batch", out, Op::SliceBatch { input, start }, &[input])
    }

    /// Concatenates 4-D tensors along the batch axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        let (_, c, h, w) = self.value(first).dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            n += pn;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.push("stack", out, Op::Stack(parts.to_vec()), parts)
    }

    /// Bilinear 2x upsampling with half-pixel centres and edge clamping.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = upsample2x_forward(self.value(input))?;
        self.push("upsample2x", out, Op::Upsample2x(input), &[input])
    }

    pub fn crop(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let v = self.value(input);
        let (n, c, h, w) = v.dims4()?;
        if top + height > h || left + width > w {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                msg: format!("window {height}x{width}+{top}+{left} exceeds {h}x{w}"),
            });
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in v.data().chunks(h * w) {
            for y in top..top + height {
                data.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        let out = Tensor::new(vec![n, c, height, width], data)?;
        self.push("crop", out, Op::Crop { input, top, left }, &[input])
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_ran = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let result = self.propagate(i, &g);
            self.grads[i] = Some(g);
            result?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_for(&self, v: Var) -> Option<Vec<T>> {
        self.needs(v).then(|| vec![T::zero(); self.value(v).numel()])
    }

    fn push_unary(&mut self, a: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if self.needs(a) {
            let contrib = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            self.accumulate(a, contrib);
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.push_unary(a, g, |_, gi| gi);
                self.push_unary(b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.push_unary(a, g, |_, gi| gi);
                self.push_unary(b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                self.push_unary(a, g, |j, gi| gi * vb[j]);
                self.push_unary(b, g, |j, gi| gi * va[j]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                self.push_unary(a, g, |j, gi| gi / vb[j]);
                self.push_unary(b, g, |j, gi| -gi * va[j] / (vb[j] * vb[j]));
            }
            Op::Scale(a, f) => {
                let f = T::of(f);
                self.push_unary(a, g, |_, gi| gi * f);
            }
            Op::AddScalar(a) => self.push_unary(a, g, |_, gi| gi),
            Op::Relu(a) => {
                let x = self.value(a).data().to_vec();
                self.push_unary(a, g, |j, gi| if x[j] > T::zero() { gi } else { T::zero() });
            }
            Op::LeakyRelu(a, slope) => {
                let (x, s) = (self.value(a).data().to_vec(), T::of(slope));
                self.push_unary(a, g, |j, gi| if x[j] > T::zero() { gi } else { gi * s });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.push_unary(a, g, |j, gi| gi * y[j] * (T::one() - y[j]));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.push_unary(a, g, |j, gi| gi * (T::one() - y[j] * y[j]));
            }
            Op::Abs(a) => {
                let x = self.value(a).data().to_vec();
                self.push_unary(a, g, |j, gi| {
                    if x[j] > T::zero() {
                        gi
                    } else if x[j] < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::MuLaw(a, mu) => {
                let x = self.value(a).data().to_vec();
                let (m, denom) = (T::of(mu), T::of(mu.ln_1p()));
                self.push_unary(a, g, |j, gi| {
                    if x[j] < T::one() {
                        gi * m / ((T::one() + m * x[j]) * denom)
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum(a) => self.push_unary_broadcast(a, g[0]),
            Op::Mean(a) => {
                let n = T::of(self.value(a).numel() as f64);
                self.push_unary_broadcast(a, g[0] / n);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = self.zeros_for(input);
                let mut gw = self.zeros_for(weight);
                let mut gb = bias.and_then(|b| self.zeros_for(b));
                conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    geom,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                )?;
                self.accumulate_opt(input, gi);
                self.accumulate_opt(weight, gw);
                if let Some(b) = bias {
                    self.accumulate_opt(b, gb);
                }
            }
            Op::DeformConv {
                input,
                offsets,
                masks,
                weight,
                bias,
                geom,
            } => {
                let mut gi = self.zeros_for(input);
                let mut go = self.zeros_for(offsets);
                let mut gm = self.zeros_for(masks);
                let mut gw = self.zeros_for(weight);
                let mut gb = bias.and_then(|b| self.zeros_for(b));
                deform_backward(
                    self.value(input),
                    self.value(offsets),
                    self.value(masks),
                    self.value(weight),
                    geom,
                    g,
                    DeformGrads {
                        input: gi.as_deref_mut(),
                        offsets: go.as_deref_mut(),
                        masks: gm.as_deref_mut(),
                        weight: gw.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                )?;
                self.accumulate_opt(input, gi);
                self.accumulate_opt(offsets, go);
                self.accumulate_opt(masks, gm);
                self.accumulate_opt(weight, gw);
                if let Some(b) = bias {
                    self.accumulate_opt(b, gb);
                }
            }
            Op::Concat(parts) => {
                let (n, c, h, w) = self.nodes[i].value.dims4()?;
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut contrib = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            contrib.extend_from_slice(&g[(b * c + offset) * h * w..(b * c + offset + pc) * h * w]);
                        }
                        self.accumulate(p, contrib);
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { input, start } => {
                if self.needs(input) {
                    let (n, c, h, w) = self.value(input).dims4()?;
                    let len = self.nodes[i].value.shape()[1];
                    let mut contrib = vec![T::zero(); n * c * h * w];
                    for b in 0..n {
                        contrib[(b * c + start) * h * w..(b * c + start + len) * h * w]
                            .copy_from_slice(&g[b * len * h * w..(b + 1) * len * h * w]);
                    }
                    self.accumulate(input, contrib);
                }
            }
            Op::SliceBatch { input, start } => {
                if self.needs(input) {
                    let v = self.value(input);
                    let item = v.numel() / v.shape()[0];
                    let mut contrib = vec![T::zero(); v.numel()];
                    contrib[start * item..start * item + g.len()].copy_from_slice(g);
                    self.accumulate(input, contrib);
                }
            }
            Op::Stack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        self.accumulate(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Upsample2x(input) => {
                if self.needs(input) {
                    let mut contrib = vec![T::zero(); self.value(input).numel()];
                    upsample2x_backward(self.shape(input), g, &mut contrib);
                    self.accumulate(input, contrib);
                }
            }
            Op::Crop { input, top, left } => {
                if self.needs(input) {
                    let (_, _, h, w) = self.value(input).dims4()?;
                    let (_, _, ch, cw) = self.nodes[i].value.dims4()?;
                    let mut contrib = vec![T::zero(); self.value(input).numel()];
                    for (dst, src) in contrib.chunks_mut(h * w).zip(g.chunks(ch * cw)) {
                        for y in 0..ch {
                            dst[(top + y) * w + left..(top + y) * w + left + cw]
                                .copy_from_slice(&src[y * cw..(y + 1) * cw]);
                        }
                    }
                    self.accumulate(input, contrib);
                }
            }
        }
        Ok(())
    }

    fn push_unary_broadcast(&mut self, a: Var, g: T) {
        if self.needs(a) {
            let contrib = vec![g; self.value(a).numel()];
            self.accumulate(a, contrib);
        }
    }

    fn accumulate_opt(&mut self, v: Var, contrib: Option<Vec<T>>) {
        if let Some(c) = contrib {
            self.accumulate(v, c);
        }
    }
}
