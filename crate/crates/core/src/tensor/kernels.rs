// Raw loops behind the tape ops. Shapes are validated by the caller.
// Inner loops run over the output-channel axis, which is contiguous in both
// the filter layout and the output layout.

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// `dst += Σ_k a[k] · x[k]` over four rows at once.
#[inline]
fn axpy4(dst: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = dst.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        dst[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `x: [len × dim]`, `w: [window × dim × ch]` → `[len-window+1 × ch]`.
///
/// Loops filter taps outermost so each `ch`-wide filter row stays in cache
/// while it is applied to every output position.
pub(super) fn conv1d(x: &[f64], dim: usize, w: &[f64], b: &[f64], window: usize) -> Vec<f64> {
    let ch = b.len();
    let len = x.len() / dim;
    let out_len = len + 1 - window;
    let span = window * dim;
    let mut out = Vec::with_capacity(out_len * ch);
    for _ in 0..out_len {
        out.extend_from_slice(b);
    }
    let mut t = 0;
    while t + 4 <= span {
        let wr = [0, 1, 2, 3].map(|k| &w[(t + k) * ch..(t + k + 1) * ch]);
        for (i, row) in out.chunks_exact_mut(ch).enumerate() {
            let xs = &x[i * dim + t..i * dim + t + 4];
            if xs.iter().any(|&v| v != 0.0) {
                axpy4(row, [xs[0], xs[1], xs[2], xs[3]], wr);
            }
        }
        t += 4;
    }
    for t in t..span {
        let wr = &w[t * ch..(t + 1) * ch];
        for (i, row) in out.chunks_exact_mut(ch).enumerate() {
            let xv = x[i * dim + t];
            if xv != 0.0 {
                axpy(row, xv, wr);
            }
        }
    }
    out
}

pub(super) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    dim: usize,
    w: &[f64],
    ch: usize,
    window: usize,
    need: [bool; 3],
) -> ConvGrads {
    let span = window * dim;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let mut db = need[2].then(|| vec![0.0; ch]);
    if let Some(db) = db.as_mut() {
        for gr in g.chunks_exact(ch) {
            for (d, v) in db.iter_mut().zip(gr) {
                *d += v;
            }
        }
    }
    for t in 0..span {
        let wr = &w[t * ch..(t + 1) * ch];
        if let Some(dx) = dx.as_mut() {
            for (i, gr) in g.chunks_exact(ch).enumerate() {
                dx[i * dim + t] += dot(gr, wr);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let dwr = &mut dw[t * ch..(t + 1) * ch];
            for (i, gr) in g.chunks_exact(ch).enumerate() {
                let xv = x[i * dim + t];
                if xv != 0.0 {
                    axpy(dwr, xv, gr);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Conv2dDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        self.h + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 1 - self.kw
    }
}

/// `x: [h × w × cin]`, `k: [kh × kw × cin × cout]` → `[h' × w' × cout]`.
pub(super) fn conv2d(x: &[f64], k: &[f64], b: &[f64], d: Conv2dDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let span = d.kw * d.cin;
    let taps = d.kh * span;
    let mut out = vec![0.0; oh * ow * d.cout];
    let mut patch = vec![0.0; taps];
    for y in 0..oh {
        for xo in 0..ow {
            for ky in 0..d.kh {
                let src = &x[((y + ky) * d.w + xo) * d.cin..][..span];
                patch[ky * span..(ky + 1) * span].copy_from_slice(src);
            }
            let base = (y * ow + xo) * d.cout;
            let row = &mut out[base..base + d.cout];
            row.copy_from_slice(b);
            let mut t = 0;
            while t + 4 <= taps {
                let a = [patch[t], patch[t + 1], patch[t + 2], patch[t + 3]];
                if a.iter().any(|&v| v != 0.0) {
                    let ks = [0, 1, 2, 3].map(|j| &k[(t + j) * d.cout..(t + j + 1) * d.cout]);
                    axpy4(row, a, ks);
                }
                t += 4;
            }
            for t in t..taps {
                if patch[t] != 0.0 {
                    axpy(row, patch[t], &k[t * d.cout..(t + 1) * d.cout]);
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    k: &[f64],
    d: Conv2dDims,
    need: [bool; 3],
) -> ConvGrads {
    let (oh, ow) = (d.out_h(), d.out_w());
    let span = d.kw * d.cin;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let mut db = need[2].then(|| vec![0.0; d.cout]);
    for y in 0..oh {
        for xo in 0..ow {
            let base = (y * ow + xo) * d.cout;
            let gr = &g[base..base + d.cout];
            if let Some(db) = db.as_mut() {
                for (a, v) in db.iter_mut().zip(gr) {
                    *a += v;
                }
            }
            for ky in 0..d.kh {
                let xoff = ((y + ky) * d.w + xo) * d.cin;
                let ks = &k[ky * span * d.cout..][..span * d.cout];
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[xoff..xoff + span];
                    for (t, a) in dxs.iter_mut().enumerate() {
                        *a += dot(gr, &ks[t * d.cout..(t + 1) * d.cout]);
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    let xs = &x[xoff..xoff + span];
                    let dks = &mut dk[ky * span * d.cout..][..span * d.cout];
                    for (t, &xv) in xs.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(&mut dks[t * d.cout..(t + 1) * d.cout], xv, gr);
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw: dk, db }
}

/// Max pooling over `[h × w × c]`. Returns the pooled values and, for each
/// output cell, the flat input index of the first maximal element.
pub(super) fn maxpool2d(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    (ph, pw): (usize, usize),
    (sh, sw): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..ph {
                    for kx in 0..pw {
                        let i = ((oy * sh + ky) * w + ox * sw + kx) * c + ch;
                        if x[i] > best || best_i == usize::MAX {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// `a: [m × d]`, `b: [n × d]` → `[m × n]` of row dot products.
pub(super) fn interaction(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let m = a.len() / d;
    let n = b.len() / d;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * d..(i + 1) * d];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * d..(j + 1) * d]);
        }
    }
    out
}

/// `x: [din]`, `w: [din × dout]` → `[dout]`.
pub(super) fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; dout],
    };
    for (i, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            axpy(&mut out, xv, &w[i * dout..(i + 1) * dout]);
        }
    }
    out
}

pub(super) fn affine_backward_x(g: &[f64], w: &[f64], din: usize) -> Vec<f64> {
    let dout = g.len();
    (0..din)
        .map(|i| dot(g, &w[i * dout..(i + 1) * dout]))
        .collect()
}

pub(super) fn affine_backward_w(g: &[f64], x: &[f64]) -> Vec<f64> {
    let dout = g.len();
    let mut dw = vec![0.0; x.len() * dout];
    for (i, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            axpy(&mut dw[i * dout..(i + 1) * dout], xv, g);
        }
    }
    dw
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}
