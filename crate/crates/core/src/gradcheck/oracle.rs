//! Naive `f64` reference implementations of every layer primitive.
//!
//! These are written directly from the loop-nest definitions and share no
//! code with the `im2col`/GEMM kernels, so finite differences taken through
//! them form an independent check on the analytic backward passes.

#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl T64 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        T64 { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_f32(dims: [usize; 4], data: &[f32]) -> Self {
        T64 { dims, data: data.iter().map(|&v| v as f64).collect() }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    fn add(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] += v;
    }
}

/// Smallest distance from a point of non-differentiability seen during an
/// oracle forward pass (ReLU inputs near zero, near-ties in pooling windows).
#[derive(Debug, Clone, Copy)]
pub struct Margin(pub f64);

impl Margin {
    pub fn new() -> Self {
        Margin(f64::INFINITY)
    }

    fn observe(&mut self, v: f64) {
        self.0 = self.0.min(v);
    }
}

impl Default for Margin {
    fn default() -> Self {
        Self::new()
    }
}

/// Same-padded stride-1 convolution; `w` is `(c_out, c_in, k, k)`.
pub fn conv2d(x: &T64, w: &T64, b: &[f64]) -> T64 {
    let [n, c_in, h, wd] = x.dims;
    let [c_out, _, k, _] = w.dims;
    let pad = (k / 2) as isize;
    let mut out = T64::zeros([n, c_out, h, wd]);
    for bn in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.get(co, ci, ky, kx) * x.get(bn, ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    let i = out.idx(bn, co, y, xx);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Stride-2 2x2 transposed convolution; `w` is `(c_in, c_out, 2, 2)`.
pub fn conv_transpose2d(x: &T64, w: &T64, b: &[f64]) -> T64 {
    let [n, c_in, h, wd] = x.dims;
    let c_out = w.dims[1];
    let mut out = T64::zeros([n, c_out, 2 * h, 2 * wd]);
    for bn in 0..n {
        for co in 0..c_out {
            for y in 0..2 * h {
                for xx in 0..2 * wd {
                    let i = out.idx(bn, co, y, xx);
                    out.data[i] = b[co];
                }
            }
        }
        for ci in 0..c_in {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.get(bn, ci, y, xx);
                    for co in 0..c_out {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out.add(bn, co, 2 * y + dy, 2 * xx + dx, v * w.get(ci, co, dy, dx));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn max_pool2d(x: &T64, margin: &mut Margin) -> T64 {
    let [n, c, h, w] = x.dims;
    let mut out = T64::zeros([n, c, h / 2, w / 2]);
    for bn in 0..n {
        for cc in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let mut vals = [
                        x.get(bn, cc, 2 * y, 2 * xx),
                        x.get(bn, cc, 2 * y, 2 * xx + 1),
                        x.get(bn, cc, 2 * y + 1, 2 * xx),
                        x.get(bn, cc, 2 * y + 1, 2 * xx + 1),
                    ];
                    vals.sort_by(|a, b| b.total_cmp(a));
                    margin.observe(vals[0] - vals[1]);
                    let i = out.idx(bn, cc, y, xx);
                    out.data[i] = vals[0];
                }
            }
        }
    }
    out
}

pub fn relu(x: &T64, margin: &mut Margin) -> T64 {
    for &v in &x.data {
        margin.observe(v.abs());
    }
    T64 { dims: x.dims, data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn sigmoid(x: &T64) -> T64 {
    T64 { dims: x.dims, data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect() }
}

pub fn mask(x: &T64, mask: &[f64]) -> T64 {
    T64 { dims: x.dims, data: x.data.iter().zip(mask).map(|(a, m)| a * m).collect() }
}

pub fn concat_channels(a: &T64, b: &T64) -> T64 {
    let [n, ca, h, w] = a.dims;
    let cb = b.dims[1];
    let mut out = T64::zeros([n, ca + cb, h, w]);
    for bn in 0..n {
        for c in 0..ca + cb {
            for y in 0..h {
                for x in 0..w {
                    let v = if c < ca { a.get(bn, c, y, x) } else { b.get(bn, c - ca, y, x) };
                    let i = out.idx(bn, c, y, x);
                    out.data[i] = v;
                }
            }
        }
    }
    out
}

/// Mean clamped binary cross-entropy with the same clamp as the engine.
pub fn bce(pred: &T64, target: &[f64], eps: f64) -> f64 {
    let total: f64 = pred
        .data
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / pred.data.len() as f64
}

pub fn weighted_sum(x: &T64, weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => x.data.iter().zip(w).map(|(a, b)| a * b).sum(),
        None => x.data.iter().sum(),
    }
}
