//! Raw numeric kernels behind the autograd graph: convolution via im2col and
//! GEMM, pooling, pixel rearrangement and batch statistics. All buffers are
//! row-major NCHW.

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
/// Transposition is expressed through strides, so no operand is copied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW");
        assert_eq!(wt.len(), 4, "conv weight must be OCKK");
        assert_eq!(x[1], wt[1], "conv channel mismatch: input {:?}, weight {:?}", x, wt);
        assert_eq!(wt[2], wt[3], "square kernels only");
        let k = wt[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "input smaller than kernel");
        ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: wt[0],
            k,
            stride,
            pad,
            oh: (x[2] + 2 * pad - k) / stride + 1,
            ow: (x[3] + 2 * pad - k) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let p = g.positions();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * p;
    let mut y = vec![0.0; g.n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch() * p] };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let yn = &mut y[n * out_sz..(n + 1) * out_sz];
        if let Some(b) = b {
            for (o, row) in yn.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.o, g.c, p, w, false, xn, false, beta, yn);
        } else {
            im2col(g, xn, &mut cols);
            gemm(g.o, g.patch(), p, w, false, &cols, false, beta, yn);
        }
    }
    y
}

/// Gradients of a convolution. `want_x`/`want_w` skip work for inputs that do
/// not require gradients (frozen weights, data).
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads {
    let p = g.positions();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * p;
    let mut dx = want_x.then(|| vec![0.0; g.n * in_sz]);
    let mut dw = want_w.then(|| vec![0.0; g.o * g.patch()]);
    let mut db = want_b.then(|| vec![0.0; g.o]);
    let mut cols = if g.is_pointwise() || !want_w { Vec::new() } else { vec![0.0; g.patch() * p] };
    let mut dcols = if g.is_pointwise() || !want_x { Vec::new() } else { vec![0.0; g.patch() * p] };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        if let Some(db) = db.as_mut() {
            for (o, row) in dyn_.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm(g.o, p, g.c, dyn_, false, xn, true, 1.0, dw);
            } else {
                im2col(g, xn, &mut cols);
                gemm(g.o, p, g.patch(), dyn_, false, &cols, true, 1.0, dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(g.c, g.o, p, w, true, dyn_, false, 1.0, dxn);
            } else {
                gemm(g.patch(), g.o, p, w, true, dyn_, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
/// Returns the pooled values and the flat input index of each maximum.
pub(crate) fn max_pool2(shape: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}

fn bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling with the usual floor/ceil bin edges.
pub(crate) fn adaptive_avg_pool(shape: &[usize], x: &[f64], oh: usize, ow: usize) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = bin(ox, ow, w);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += x[base + yy * w + x0..base + yy * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(
    shape: &[usize],
    dy: &[f64],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = bin(ox, ow, w);
                let g = dy[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    for v in &mut dx[base + yy * w + x0..base + yy * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Channel-to-space rearrangement: `[N, C·r², H, W] → [N, C, H·r, W·r]` with
/// `out[c, h·r+i, w·r+j] = in[c·r² + i·r + j, h, w]`.
pub(crate) fn pixel_shuffle(shape: &[usize], x: &[f64], r: usize, inverse: bool) -> Vec<f64> {
    let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_plane = (b * cin + ch * r * r + i * r + j) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = src_plane + y * w + xx;
                            let dst = ((b * c + ch) * oh + y * r + i) * ow + xx * r + j;
                            if inverse {
                                out[src] = x[dst];
                            } else {
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over N, H, W.
pub(crate) fn channel_moments(shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|t| (t - m) * (t - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
