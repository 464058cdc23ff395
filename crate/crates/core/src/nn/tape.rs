//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in exact reverse order and routes gradients to inputs
//! and to the [`ParamStore`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvDims};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{Shape, Tensor};

/// Clamp applied to predictions before taking logarithms in the BCE loss.
pub const BCE_EPS: f32 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kinds of recorded operations, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    ConvTranspose2d,
    MaxPool,
    Relu,
    Sigmoid,
    Dropout,
    Concat,
    Bce,
    Mean,
    Sum,
}

/// Test hook: scale every input gradient emitted by one op kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub scale: f32,
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<f32> },
    Concat { a: Var, b: Var },
    Bce { pred: Var, target: Tensor },
    Mean { terms: Vec<Var> },
    Sum { x: Var, weights: Option<Tensor> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Input | Op::Param(_) => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::Bce { .. } => OpKind::Bce,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of leaf inputs produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        // A fresh forward re-arms backward.
        self.consumed = false;
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input. Set `requires_grad` to receive its gradient
    /// from [`Tape::backward`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// Record (once per tape) the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Same-padding, stride-1 convolution with an odd square kernel.
    /// Weights are `(c_out, c_in, k, k)`, bias `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.h != ws.w || ws.h.is_multiple_of(2) {
            return Err(Error::Shape(format!("conv2d kernel {ws} must be odd and square")));
        }
        if xs.c != ws.c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {xs} vs weights {ws}"
            )));
        }
        if bs.numel() != ws.n {
            return Err(Error::Shape(format!("conv2d bias {bs} does not match weights {ws}")));
        }
        let d = ConvDims { n: xs.n, c_in: xs.c, c_out: ws.n, h: xs.h, w: xs.w, k: ws.h };
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, xs.h, xs.w));
        kernels::conv2d_forward(
            &d,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, k: ws.h }, needs))
    }

    /// 2x2 stride-2 transposed convolution; weights `(c_in, c_out, 2, 2)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if (ws.h, ws.w) != (2, 2) {
            return Err(Error::Shape(format!("transposed conv kernel {ws} must be 2x2")));
        }
        if xs.c != ws.n {
            return Err(Error::Shape(format!(
                "transposed conv channel mismatch: input {xs} vs weights {ws}"
            )));
        }
        if bs.numel() != ws.c {
            return Err(Error::Shape(format!("transposed conv bias {bs} does not match weights {ws}")));
        }
        let d = ConvDims { n: xs.n, c_in: xs.c, c_out: ws.c, h: xs.h, w: xs.w, k: 2 };
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, 2 * xs.h, 2 * xs.w));
        kernels::tconv_forward(
            &d,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b }, needs))
    }

    /// 2x2 stride-2 max pooling.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::Shape(format!("max_pool2d needs even spatial dims, got {s}")));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
        let argmax =
            kernels::max_pool_forward(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Inverted dropout. Identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(src.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::Shape(format!("concat_channels of {sa} and {sb}")));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).item_slice(n));
            data.extend_from_slice(self.value(b).item_slice(n));
        }
        let out = Tensor::from_vec(shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bce_loss prediction {} vs target {}",
                p.shape(),
                target.shape()
            )));
        }
        let loss = bce_value(p.data(), target.data());
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.clone() }, needs))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Shape("mean of zero terms".into()));
        }
        let mut acc = 0.0f64;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::Shape(format!("mean expects scalars, got {}", v.shape())));
            }
            acc += v.item() as f64;
        }
        let value = (acc / terms.len() as f64) as f32;
        let needs = terms.iter().any(|&t| self.needs(t));
        Ok(self.push(Tensor::scalar(value), Op::Mean { terms: terms.to_vec() }, needs))
    }

    /// Sum of all elements, optionally weighted elementwise.
    pub fn sum(&mut self, x: Var, weights: Option<Tensor>) -> Result<Var> {
        let v = self.value(x);
        if let Some(w) = &weights {
            if w.shape() != v.shape() {
                return Err(Error::Shape(format!("sum weights {} vs input {}", w.shape(), v.shape())));
            }
        }
        let total: f64 = match &weights {
            Some(w) => v.data().iter().zip(w.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum(),
            None => v.sum(),
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum { x, weights }, needs))
    }

    /// Back-propagate from the scalar `loss`. Parameter gradients are
    /// accumulated into `store`; gradients of inputs recorded with
    /// `requires_grad` are returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.consumed {
            return Err(Error::State("backward already ran on this tape; record a new forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let fault = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f.op == k => Some(f.scale),
                _ => None,
            };
            let emit = |grads: &mut Vec<Option<Tensor>>, v: Var, mut t: Tensor| {
                if let Some(scale) = fault {
                    t.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(grads, v, t);
            };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Conv2d { x, w, b, k } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let d = ConvDims { n: xs.n, c_in: xs.c, c_out: ws.n, h: xs.h, w: xs.w, k: *k };
                    let mut gw = Tensor::zeros(ws);
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let mut gx = self.needs(*x).then(|| Tensor::zeros(xs));
                    kernels::conv2d_backward(
                        &d,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        gx.as_mut().map(|t| t.data_mut()),
                        gw.data_mut(),
                        gb.data_mut(),
                    );
                    if let Some(gx) = gx {
                        emit(&mut grads, *x, gx);
                    }
                    emit(&mut grads, *w, gw);
                    emit(&mut grads, *b, gb);
                }
                Op::ConvTranspose2d { x, w, b } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let d = ConvDims { n: xs.n, c_in: xs.c, c_out: ws.c, h: xs.h, w: xs.w, k: 2 };
                    let mut gw = Tensor::zeros(ws);
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let mut gx = self.needs(*x).then(|| Tensor::zeros(xs));
                    kernels::tconv_backward(
                        &d,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        gx.as_mut().map(|t| t.data_mut()),
                        gw.data_mut(),
                        gb.data_mut(),
                    );
                    if let Some(gx) = gx {
                        emit(&mut grads, *x, gx);
                    }
                    emit(&mut grads, *w, gw);
                    emit(&mut grads, *b, gb);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let dst = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dst[src as usize] += gv;
                    }
                    emit(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let xin = self.value(*x);
                    let data = xin.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                    emit(&mut grads, *x, Tensor::from_vec(xin.shape(), data)?);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value;
                    let data = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                    emit(&mut grads, *x, Tensor::from_vec(y.shape(), data)?);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    emit(&mut grads, *x, Tensor::from_vec(g.shape(), data)?);
                }
                Op::Concat { a, b } => {
                    let sa = self.shape(*a);
                    let sb = self.shape(*b);
                    let mut ga = Vec::with_capacity(sa.numel());
                    let mut gb = Vec::with_capacity(sb.numel());
                    for item in g.data().chunks_exact(sa.item_len() + sb.item_len()) {
                        let (l, r) = item.split_at(sa.item_len());
                        ga.extend_from_slice(l);
                        gb.extend_from_slice(r);
                    }
                    if self.needs(*a) {
                        emit(&mut grads, *a, Tensor::from_vec(sa, ga)?);
                    }
                    if self.needs(*b) {
                        emit(&mut grads, *b, Tensor::from_vec(sb, gb)?);
                    }
                }
                Op::Bce { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g.item() / p.len() as f32;
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&pv, &t)| {
                            if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                                0.0
                            } else {
                                scale * (pv - t) / (pv * (1.0 - pv))
                            }
                        })
                        .collect();
                    emit(&mut grads, *pred, Tensor::from_vec(p.shape(), data)?);
                }
                Op::Mean { terms } => {
                    let share = g.item() / terms.len() as f32;
                    for &t in terms {
                        if self.needs(t) {
                            emit(&mut grads, t, Tensor::scalar(share));
                        }
                    }
                }
                Op::Sum { x, weights } => {
                    let s = self.shape(*x);
                    let gv = g.item();
                    let t = match weights {
                        Some(w) => w.map(|v| v * gv),
                        None => Tensor::full(s, gv),
                    };
                    emit(&mut grads, *x, t);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where `f32` would round to an endpoint.
pub(crate) fn sigmoid(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// Mean clamped binary cross-entropy, accumulated in `f64`.
pub fn bce_value(pred: &[f32], target: &[f32]) -> f32 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    (total / pred.len().max(1) as f64) as f32
}
