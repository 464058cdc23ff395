//! Finite-difference verification of every backward pass.
//!
//! Each case is a tiny network described by [`Program`]. It is run once on
//! the `f32` tape to get analytic gradients, and repeatedly through the
//! `f64` reference ops in [`oracle`] to get central differences. Cases whose
//! base point sits too close to a ReLU kink or a pooling tie are rejected
//! and redrawn, since finite differences are meaningless there.

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{BackwardFault, Mode, ParamStore, Shape, Tape, Tensor, BCE_EPS};
use oracle::{Margin, T64};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-2;
/// Minimum distance from a kink for a sampled case to be accepted.
pub const KINK_MARGIN: f64 = 2e-2;

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Number of accepted random 3-layer compositions.
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 0x5eed, trials: 100, step: 1e-3, tolerance: 1e-4, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
    /// Random draws discarded for sitting near a kink.
    pub rejected: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv { k: usize, c_out: usize },
    ConvTranspose { c_out: usize },
    Pool,
    Relu,
    Sigmoid,
    Dropout { p: f32 },
    /// Concatenate the current value with an earlier node (0 is the input).
    Concat { with: usize },
}

#[derive(Debug, Clone)]
pub enum Head {
    Sum,
    WeightedSum(Vec<f32>),
    /// BCE applied directly to the current value, which must lie in (0, 1).
    Bce(Vec<f32>),
    /// Sigmoid followed by BCE.
    SigmoidBce(Vec<f32>),
}

/// A small network to differentiate: input, layer chain, scalar head.
#[derive(Debug, Clone)]
pub struct Program {
    pub name: String,
    pub input: Tensor,
    pub layers: Vec<Layer>,
    /// Weight/bias pairs for the conv-like layers, in layer order.
    pub params: Vec<Tensor>,
    pub head: Head,
    pub dropout_seed: u64,
}

impl Program {
    fn dropout_rng(&self, layer: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.dropout_seed.wrapping_add(layer as u64))
    }

    /// Analytic gradients from the tape, flattened as input then params.
    pub fn analytic(&self, fault: Option<BackwardFault>) -> Result<Vec<f32>> {
        let mut store = ParamStore::new();
        let ids: Vec<_> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("p{i}"), t.clone()))
            .collect();
        let mut tape = Tape::new();
        tape.inject_backward_fault(fault);
        let x = tape.input(self.input.clone(), true);
        let mut nodes = vec![x];
        let mut next_param = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let cur = *nodes.last().expect("input node");
            let v = match layer {
                Layer::Conv { .. } | Layer::ConvTranspose { .. } => {
                    let w = tape.param(&store, ids[next_param]);
                    let b = tape.param(&store, ids[next_param + 1]);
                    next_param += 2;
                    if matches!(layer, Layer::Conv { .. }) {
                        tape.conv2d(cur, w, b)?
                    } else {
                        tape.conv_transpose2d(cur, w, b)?
                    }
                }
                Layer::Pool => tape.max_pool2d(cur)?,
                Layer::Relu => tape.relu(cur),
                Layer::Sigmoid => tape.sigmoid(cur),
                Layer::Dropout { p } => tape.dropout(cur, *p, Mode::Train, &mut self.dropout_rng(li))?,
                Layer::Concat { with } => tape.concat_channels(cur, nodes[*with])?,
            };
            nodes.push(v);
        }
        let last = *nodes.last().expect("node");
        let loss = match &self.head {
            Head::Sum => tape.sum(last, None)?,
            Head::WeightedSum(w) => {
                let weights = Tensor::from_vec(tape.shape(last), w.clone())?;
                tape.sum(last, Some(weights))?
            }
            Head::Bce(t) => {
                let target = Tensor::from_vec(tape.shape(last), t.clone())?;
                tape.bce_loss(last, &target)?
            }
            Head::SigmoidBce(t) => {
                let s = tape.sigmoid(last);
                let target = Tensor::from_vec(tape.shape(s), t.clone())?;
                tape.bce_loss(s, &target)?
            }
        };
        let grads = tape.backward(loss, &mut store)?;
        let mut flat = grads.get(x).expect("input gradient").data().to_vec();
        for id in ids {
            flat.extend_from_slice(store.grad(id).data());
        }
        Ok(flat)
    }

    fn coordinates(&self) -> Vec<T64> {
        let mut all = vec![T64::from_f32(self.input.shape().dims(), self.input.data())];
        all.extend(self.params.iter().map(|p| T64::from_f32(p.shape().dims(), p.data())));
        all
    }

    /// Loss evaluated through the reference ops, with the kink margin.
    fn oracle_loss(&self, coords: &[T64]) -> (f64, Margin) {
        let mut margin = Margin::new();
        let mut nodes: Vec<T64> = vec![coords[0].clone()];
        let mut next_param = 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let cur = nodes.last().expect("input node");
            let v = match layer {
                Layer::Conv { .. } => {
                    let (w, b) = (&coords[next_param], &coords[next_param + 1]);
                    next_param += 2;
                    oracle::conv2d(cur, w, &b.data)
                }
                Layer::ConvTranspose { .. } => {
                    let (w, b) = (&coords[next_param], &coords[next_param + 1]);
                    next_param += 2;
                    oracle::conv_transpose2d(cur, w, &b.data)
                }
                Layer::Pool => oracle::max_pool2d(cur, &mut margin),
                Layer::Relu => oracle::relu(cur, &mut margin),
                Layer::Sigmoid => oracle::sigmoid(cur),
                Layer::Dropout { p } => {
                    let mut rng = self.dropout_rng(li);
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..cur.data.len())
                        .map(|_| if rng.gen::<f32>() < *p { 0.0 } else { keep as f64 })
                        .collect();
                    oracle::mask(cur, &mask)
                }
                Layer::Concat { with } => oracle::concat_channels(cur, &nodes[*with]),
            };
            nodes.push(v);
        }
        let last = nodes.last().expect("node");
        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let loss = match &self.head {
            Head::Sum => oracle::weighted_sum(last, None),
            Head::WeightedSum(w) => oracle::weighted_sum(last, Some(&to64(w))),
            Head::Bce(t) => oracle::bce(last, &to64(t), BCE_EPS as f64),
            Head::SigmoidBce(t) => oracle::bce(&oracle::sigmoid(last), &to64(t), BCE_EPS as f64),
        };
        (loss, margin)
    }

    pub fn kink_margin(&self) -> f64 {
        self.oracle_loss(&self.coordinates()).1 .0
    }

    /// Central differences for every coordinate, flattened like [`Program::analytic`].
    pub fn numeric(&self, step: f64) -> Vec<f64> {
        let mut coords = self.coordinates();
        let mut out = Vec::new();
        for t in 0..coords.len() {
            for i in 0..coords[t].data.len() {
                let orig = coords[t].data[i];
                coords[t].data[i] = orig + step;
                let plus = self.oracle_loss(&coords).0;
                coords[t].data[i] = orig - step;
                let minus = self.oracle_loss(&coords).0;
                coords[t].data[i] = orig;
                out.push((plus - minus) / (2.0 * step));
            }
        }
        out
    }

    pub fn check(&self, config: &GradcheckConfig) -> Result<CaseReport> {
        let analytic = self.analytic(config.fault)?;
        let numeric = self.numeric(config.step);
        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a as f64, n))
            .fold(0.0, f64::max);
        Ok(CaseReport {
            name: self.name.clone(),
            coordinates: numeric.len(),
            max_rel_error,
            passed: max_rel_error < config.tolerance,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_vec(shape, uniform(rng, shape.numel(), lo, hi)).expect("sized")
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

/// Shape after applying `layer` to a value of shape `s`, given the shapes
/// of earlier nodes.
fn apply_shape(layer: &Layer, s: Shape, nodes: &[Shape]) -> Shape {
    match layer {
        Layer::Conv { c_out, .. } => Shape { c: *c_out, ..s },
        Layer::ConvTranspose { c_out } => Shape::new(s.n, *c_out, 2 * s.h, 2 * s.w),
        Layer::Pool => Shape::new(s.n, s.c, s.h / 2, s.w / 2),
        Layer::Relu | Layer::Sigmoid | Layer::Dropout { .. } => s,
        Layer::Concat { with } => Shape { c: s.c + nodes[*with].c, ..s },
    }
}

fn layer_params(rng: &mut ChaCha8Rng, layer: &Layer, s: Shape) -> Vec<Tensor> {
    match layer {
        Layer::Conv { k, c_out } => vec![
            random_tensor(rng, Shape::new(*c_out, s.c, *k, *k), -0.5, 0.5),
            random_tensor(rng, Shape::new(1, *c_out, 1, 1), -0.2, 0.2),
        ],
        Layer::ConvTranspose { c_out } => vec![
            random_tensor(rng, Shape::new(s.c, *c_out, 2, 2), -0.5, 0.5),
            random_tensor(rng, Shape::new(1, *c_out, 1, 1), -0.2, 0.2),
        ],
        _ => Vec::new(),
    }
}

fn build(name: String, rng: &mut ChaCha8Rng, input: Shape, layers: Vec<Layer>, head_kind: u8) -> Program {
    let x = random_tensor(rng, input, -1.0, 1.0);
    let mut shapes = vec![input];
    let mut params = Vec::new();
    for layer in &layers {
        let s = *shapes.last().expect("shape");
        params.extend(layer_params(rng, layer, s));
        shapes.push(apply_shape(layer, s, &shapes));
    }
    let out = shapes.last().expect("shape").numel();
    let head = match head_kind {
        0 => Head::Sum,
        1 => Head::WeightedSum(uniform(rng, out, -1.0, 1.0)),
        _ => Head::SigmoidBce(binary(rng, out)),
    };
    Program { name, input: x, layers, params, head, dropout_seed: rng.gen() }
}

/// One single-layer case per primitive plus the composed
/// conv → relu → pool → sigmoid → BCE graph.
pub fn primitive_programs(rng: &mut ChaCha8Rng) -> Vec<Program> {
    let s = Shape::new(2, 2, 6, 6);
    let mut progs = vec![
        build("conv2d 3x3 (sum)".into(), rng, s, vec![Layer::Conv { k: 3, c_out: 3 }], 0),
        build("conv2d 3x3 (weighted)".into(), rng, s, vec![Layer::Conv { k: 3, c_out: 3 }], 1),
        build("conv2d 1x1".into(), rng, s, vec![Layer::Conv { k: 1, c_out: 2 }], 1),
        build("conv_transpose2d".into(), rng, Shape::new(2, 2, 3, 4), vec![Layer::ConvTranspose { c_out: 3 }], 1),
        build("max_pool2d".into(), rng, s, vec![Layer::Pool], 1),
        build("relu".into(), rng, s, vec![Layer::Relu], 1),
        build("sigmoid".into(), rng, s, vec![Layer::Sigmoid], 1),
        build("dropout".into(), rng, s, vec![Layer::Dropout { p: 0.3 }], 1),
        build("concat_channels".into(), rng, s, vec![Layer::Conv { k: 1, c_out: 1 }, Layer::Concat { with: 0 }], 1),
        build(
            "conv2d->relu->max_pool2d->bce".into(),
            rng,
            Shape::new(1, 1, 8, 8),
            vec![Layer::Conv { k: 3, c_out: 2 }, Layer::Relu, Layer::Pool],
            2,
        ),
    ];
    // Away from the endpoints: the third derivative of ln p would otherwise
    // dominate the central-difference truncation error.
    let pred = random_tensor(rng, s, 0.15, 0.85);
    progs.push(Program {
        name: "bce_loss".into(),
        input: pred,
        layers: Vec::new(),
        params: Vec::new(),
        head: Head::Bce(binary(rng, s.numel())),
        dropout_seed: 0,
    });
    progs
}

/// A random chain of three layers, possibly wired back to earlier nodes.
pub fn random_program(rng: &mut ChaCha8Rng, index: usize) -> Program {
    let input = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(2..=4), 2 * rng.gen_range(2..=4));
    let mut shapes = vec![input];
    let mut layers = Vec::new();
    for _ in 0..3 {
        let s = *shapes.last().expect("shape");
        let layer = loop {
            let pick = match rng.gen_range(0..8) {
                0 => Layer::Conv { k: 3, c_out: rng.gen_range(1..=3) },
                1 => Layer::Conv { k: 1, c_out: rng.gen_range(1..=3) },
                2 if s.h <= 8 && s.w <= 8 => Layer::ConvTranspose { c_out: rng.gen_range(1..=2) },
                3 if s.h % 2 == 0 && s.w % 2 == 0 && s.h >= 2 && s.w >= 2 => Layer::Pool,
                4 => Layer::Relu,
                5 => Layer::Sigmoid,
                6 => Layer::Dropout { p: rng.gen_range(0.1..0.5) },
                7 => {
                    let candidates: Vec<usize> = (0..shapes.len())
                        .filter(|&i| (shapes[i].n, shapes[i].h, shapes[i].w) == (s.n, s.h, s.w))
                        .collect();
                    Layer::Concat { with: candidates[rng.gen_range(0..candidates.len())] }
                }
                _ => continue,
            };
            break pick;
        };
        shapes.push(apply_shape(&layer, s, &shapes));
        layers.push(layer);
    }
    let head = rng.gen_range(1..=2);
    let summary: Vec<String> = layers.iter().map(layer_label).collect();
    build(format!("random #{index}: {}", summary.join(" -> ")), rng, input, layers, head)
}

fn layer_label(l: &Layer) -> String {
    match l {
        Layer::Conv { k, c_out } => format!("conv{k}x{k}({c_out})"),
        Layer::ConvTranspose { c_out } => format!("tconv({c_out})"),
        Layer::Pool => "pool".into(),
        Layer::Relu => "relu".into(),
        Layer::Sigmoid => "sigmoid".into(),
        Layer::Dropout { p } => format!("dropout({p:.2})"),
        Layer::Concat { with } => format!("concat(node {with})"),
    }
}

/// Draw programs from `make` until one clears the kink margin.
fn accepted(rng: &mut ChaCha8Rng, rejected: &mut usize, mut make: impl FnMut(&mut ChaCha8Rng) -> Program) -> Program {
    loop {
        let p = make(rng);
        if p.kink_margin() >= KINK_MARGIN {
            return p;
        }
        *rejected += 1;
    }
}

/// Run every primitive case and `config.trials` random compositions.
pub fn run_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rejected = 0;
    let mut cases = Vec::new();
    let count = primitive_programs(&mut rng.clone()).len();
    for i in 0..count {
        let p = accepted(&mut rng, &mut rejected, |r| primitive_programs(r).swap_remove(i));
        cases.push(p.check(config)?);
    }
    for t in 0..config.trials {
        let p = accepted(&mut rng, &mut rejected, |r| random_program(r, t));
        cases.push(p.check(config)?);
    }
    Ok(GradcheckReport { cases, rejected })
}
