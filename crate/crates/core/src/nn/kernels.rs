//! Raw convolution, transposed-convolution and pooling kernels.
//!
//! Everything here works on plain slices; shape checking lives in the tape
//! ops that call these. Convolutions are lowered to `im2col` + SGEMM and run
//! single-threaded, so every reduction happens in a fixed order.

/// Row-major matrix operand with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { data, rows, cols, transposed: false }
    }

    /// View the stored `rows x cols` matrix as its transpose.
    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` where `c` is row-major `m x n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the operand slices cover `rows * cols` elements, which bounds
    // every stride/offset combination used for the logical (m, k) and (k, n)
    // views, and `c` is exactly `m * n` long with row-major strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold a single `(c, h, w)` image into rows of a column matrix with zero
/// "same" padding. Row `r` of the unfolded `(c*k*k, h*w)` block is written
/// at `cols[r * ld + offset..]`, so several images can share one matrix.
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32], ld: usize, offset: usize) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || hi <= lo {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                    out[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Gather `count` consecutive `(c, plane)` items into a `(c, count*plane)` matrix.
fn gather_items(src: &[f32], c: usize, plane: usize, count: usize, dst: &mut [f32]) {
    let ld = count * plane;
    for s in 0..count {
        for ch in 0..c {
            let from = &src[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            dst[ch * ld + s * plane..ch * ld + (s + 1) * plane].copy_from_slice(from);
        }
    }
}

/// Inverse of [`gather_items`], adding `bias[ch]` (if given) on the way.
fn scatter_items(src: &[f32], c: usize, plane: usize, count: usize, bias: Option<&[f32]>, dst: &mut [f32]) {
    let ld = count * plane;
    for s in 0..count {
        for ch in 0..c {
            let from = &src[ch * ld + s * plane..ch * ld + (s + 1) * plane];
            let to = &mut dst[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            match bias {
                Some(b) => to.iter_mut().zip(from).for_each(|(t, f)| *t = f + b[ch]),
                None => to.copy_from_slice(from),
            }
        }
    }
}

/// Batch items are grouped so each GEMM sees at least this many columns.
const GROUP_COLUMNS: usize = 2048;

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn group(&self) -> usize {
        GROUP_COLUMNS.div_ceil(self.plane()).clamp(1, self.n.max(1))
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let g = self.group();
        let n = self.n;
        (0..n).step_by(g).map(move |s| (s, g.min(n - s)))
    }
}

/// Same-padded convolution of `count` items of `x` with `weight`
/// `(c_out, c_in*k*k)`, written to `out` in `(count, c_out, plane)` layout.
fn conv_items(
    x: &[f32],
    count: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    scratch: &mut Vec<f32>,
) {
    let plane = h * w;
    let kk = c_in * k * k;
    let ld = count * plane;
    if count == 1 && k == 1 {
        match bias {
            Some(b) => out.chunks_exact_mut(plane).enumerate().for_each(|(co, r)| r.fill(b[co])),
            None => out.fill(0.0),
        }
        gemm(Mat::new(weight, c_out, kk), Mat::new(x, kk, plane), 1.0, out);
        return;
    }
    scratch.resize(kk * ld + c_out * ld, 0.0);
    let (cols, tmp) = scratch.split_at_mut(kk * ld);
    for s in 0..count {
        im2col(&x[s * c_in * plane..(s + 1) * c_in * plane], c_in, h, w, k, cols, ld, s * plane);
    }
    if count == 1 {
        match bias {
            Some(b) => out.chunks_exact_mut(plane).enumerate().for_each(|(co, r)| r.fill(b[co])),
            None => out.fill(0.0),
        }
        gemm(Mat::new(weight, c_out, kk), Mat::new(cols, kk, ld), 1.0, out);
    } else {
        gemm(Mat::new(weight, c_out, kk), Mat::new(cols, kk, ld), 0.0, tmp);
        scatter_items(tmp, c_out, plane, count, bias, out);
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let plane = d.plane();
    let mut scratch = Vec::new();
    for (start, count) in d.chunks() {
        conv_items(
            &x[start * d.c_in * plane..(start + count) * d.c_in * plane],
            count,
            d.c_in,
            d.c_out,
            d.h,
            d.w,
            d.k,
            weight,
            Some(bias),
            &mut out[start * d.c_out * plane..(start + count) * d.c_out * plane],
            &mut scratch,
        );
    }
}

/// Accumulates parameter gradients into `grad_w`/`grad_b`; writes (overwrites)
/// the input gradient into `grad_x` when requested.
///
/// The input gradient of a same-padded odd-kernel convolution is itself a
/// same-padded convolution of `grad_out` with the spatially flipped,
/// channel-transposed kernel, so it reuses the forward path.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
) {
    let plane = d.plane();
    let k = d.k;
    let kk = d.c_in * k * k;
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for t in 0..k * k {
                flipped[(ci * d.c_out + co) * k * k + (k * k - 1 - t)] = weight[(co * d.c_in + ci) * k * k + t];
            }
        }
    }
    let mut cols = Vec::new();
    let mut gy = Vec::new();
    let mut scratch = Vec::new();
    let mut grad_x = grad_x;
    for (start, count) in d.chunks() {
        let ld = count * plane;
        let gys = &grad_out[start * d.c_out * plane..(start + count) * d.c_out * plane];
        for (i, row) in gys.chunks_exact(plane).enumerate() {
            grad_b[i % d.c_out] += row.iter().sum::<f32>();
        }
        let xs = &x[start * d.c_in * plane..(start + count) * d.c_in * plane];
        let colm: &[f32] = if count == 1 && k == 1 {
            xs
        } else {
            cols.resize(kk * ld, 0.0);
            for s in 0..count {
                im2col(&xs[s * d.c_in * plane..(s + 1) * d.c_in * plane], d.c_in, d.h, d.w, k, &mut cols, ld, s * plane);
            }
            &cols
        };
        let gym: &[f32] = if count == 1 {
            gys
        } else {
            gy.resize(d.c_out * ld, 0.0);
            gather_items(gys, d.c_out, plane, count, &mut gy);
            &gy
        };
        gemm(Mat::new(gym, d.c_out, ld), Mat::new(colm, kk, ld).t(), 1.0, grad_w);
        if let Some(gx) = grad_x.as_deref_mut() {
            let gxs = &mut gx[start * d.c_in * plane..(start + count) * d.c_in * plane];
            conv_items(gys, count, d.c_out, d.c_in, d.h, d.w, k, &flipped, None, gxs, &mut scratch);
        }
    }
}

/// 2x2 stride-2 transposed convolution. Weights are `(c_in, c_out, 2, 2)`;
/// `d.h`/`d.w` are the input spatial dims.
pub(crate) fn tconv_forward(d: &ConvDims, x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let plane = d.h * d.w;
    let out_plane = 4 * plane;
    let ow = 2 * d.w;
    let mut expanded = vec![0.0; d.c_out * 4 * plane];
    for n in 0..d.n {
        let xs = &x[n * d.c_in * plane..(n + 1) * d.c_in * plane];
        gemm(
            Mat::new(weight, d.c_in, d.c_out * 4).t(),
            Mat::new(xs, d.c_in, plane),
            0.0,
            &mut expanded,
        );
        let ys = &mut out[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for co in 0..d.c_out {
            let b = bias[co];
            let yc = &mut ys[co * out_plane..(co + 1) * out_plane];
            for tap in 0..4 {
                let (ty, tx) = (tap / 2, tap % 2);
                let src = &expanded[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                for i in 0..d.h {
                    let row = &mut yc[(2 * i + ty) * ow..(2 * i + ty + 1) * ow];
                    for j in 0..d.w {
                        row[2 * j + tx] = src[i * d.w + j] + b;
                    }
                }
            }
        }
    }
}

pub(crate) fn tconv_backward(
    d: &ConvDims,
    x: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
) {
    let plane = d.h * d.w;
    let out_plane = 4 * plane;
    let ow = 2 * d.w;
    let mut gathered = vec![0.0; d.c_out * 4 * plane];
    let mut grad_x = grad_x;
    for n in 0..d.n {
        let gy = &grad_out[n * d.c_out * out_plane..(n + 1) * d.c_out * out_plane];
        for co in 0..d.c_out {
            let gc = &gy[co * out_plane..(co + 1) * out_plane];
            grad_b[co] += gc.iter().sum::<f32>();
            for tap in 0..4 {
                let (ty, tx) = (tap / 2, tap % 2);
                let dst = &mut gathered[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                for i in 0..d.h {
                    let row = &gc[(2 * i + ty) * ow..(2 * i + ty + 1) * ow];
                    for j in 0..d.w {
                        dst[i * d.w + j] = row[2 * j + tx];
                    }
                }
            }
        }
        let xs = &x[n * d.c_in * plane..(n + 1) * d.c_in * plane];
        gemm(
            Mat::new(xs, d.c_in, plane),
            Mat::new(&gathered, d.c_out * 4, plane).t(),
            1.0,
            grad_w,
        );
        if let Some(gx) = grad_x.as_deref_mut() {
            let gxs = &mut gx[n * d.c_in * plane..(n + 1) * d.c_in * plane];
            gemm(
                Mat::new(weight, d.c_in, d.c_out * 4),
                Mat::new(&gathered, d.c_out * 4, plane),
                0.0,
                gxs,
            );
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` independent `h x w` planes.
/// Returns the flat input index of each window's maximum; ties resolve to
/// the first element in row-major order.
pub(crate) fn max_pool_forward(x: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + dy) * w + 2 * j + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[(p * oh + i) * ow + j] = x[best];
                argmax.push(best as u32);
            }
        }
    }
    argmax
}
