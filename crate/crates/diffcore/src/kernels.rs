//! Raw slice kernels. Every routine here accumulates in row-major order so
//! results are bit-reproducible.

/// `C = op(A)·op(B) + beta·C` with `C` of shape `m×n` and inner dimension `k`.
/// `A` is stored `m×k` (or `k×m` when `a_t`), `B` is stored `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // regions whose lengths are asserted.
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

/// Output extent of a strided window, or `None` if the window does not fit.
pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if n + 2 * pad < k || stride == 0 {
        None
    } else {
        Some((n + 2 * pad - k) / stride + 1)
    }
}

/// Geometry of a strided `k×k` window sweep over a `c×h×w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold `x` into a `(c·k·k) × (ho·wo)` patch matrix (zero padding).
pub(crate) fn im2col(x: &[f64], g: &Window) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let out = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oi in 0..g.ho {
                    let iy = (oi * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[c * plane + iy as usize * g.w..c * plane + (iy as usize + 1) * g.w];
                    let dst = &mut out[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let ix = (oj * g.stride + b) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `c×h×w` image.
pub(crate) fn col2im(cols: &[f64], g: &Window) -> Vec<f64> {
    let mut x = vec![0.0; g.c * g.h * g.w];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src_row = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oi in 0..g.ho {
                    let iy = (oi * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[c * plane + iy as usize * g.w..c * plane + (iy as usize + 1) * g.w];
                    let src = &src_row[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, s) in src.iter().enumerate() {
                        let ix = (oj * g.stride + b) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Adds `bias[o]` to every element of output channel `o`.
pub(crate) fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (o, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[o];
        for v in chunk {
            *v += b;
        }
    }
}

pub(crate) fn channel_sums(dy: &[f64], plane: usize) -> Vec<f64> {
    dy.chunks(plane).map(|c| c.iter().sum()).collect()
}

/// Softmax over the middle axis of an `(outer, len, inner)` view.
pub(crate) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for l in 0..len {
                m = m.max(x[base + l * inner + i]);
            }
            let mut s = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner + i] - m).exp();
                y[base + l * inner + i] = e;
                s += e;
            }
            for l in 0..len {
                y[base + l * inner + i] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = 0.0;
            for l in 0..len {
                let idx = base + l * inner + i;
                dot += dy[idx] * y[idx];
            }
            for l in 0..len {
                let idx = base + l * inner + i;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

/// Per-pixel `k×k` filtering shared across channels.
/// `x`: `c×h×w`, `f`: `h×w×k×k`.
pub(crate) fn spatial_conv(x: &[f64], f: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut y = vec![0.0; c * plane];
    for i in 0..h {
        for j in 0..w {
            let taps = &f[(i * w + j) * k * k..(i * w + j + 1) * k * k];
            for a in 0..k {
                let iy = i as isize + a as isize - r;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = j as isize + b as isize - r;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let t = taps[a * k + b];
                    let src = iy as usize * w + ix as usize;
                    for ch in 0..c {
                        y[ch * plane + i * w + j] += t * x[ch * plane + src];
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, df)` for [`spatial_conv`].
pub(crate) fn spatial_conv_backward(
    x: &[f64],
    f: &[f64],
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut df = vec![0.0; f.len()];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for a in 0..k {
                let iy = i as isize + a as isize - r;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = j as isize + b as isize - r;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let t = f[p * k * k + a * k + b];
                    let src = iy as usize * w + ix as usize;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let g = dy[ch * plane + p];
                        acc += g * x[ch * plane + src];
                        dx[ch * plane + src] += t * g;
                    }
                    df[p * k * k + a * k + b] = acc;
                }
            }
        }
    }
    (dx, df)
}

/// Per-pixel channel mixing. `x`: `c×h×w`, `f`: `h×w×co×c`, output `co×h×w`.
pub(crate) fn pointwise_conv(x: &[f64], f: &[f64], c: usize, co: usize, plane: usize) -> Vec<f64> {
    let mut y = vec![0.0; co * plane];
    for p in 0..plane {
        let m = &f[p * co * c..(p + 1) * co * c];
        for o in 0..co {
            let row = &m[o * c..(o + 1) * c];
            let mut acc = 0.0;
            for (ch, &wv) in row.iter().enumerate() {
                acc += wv * x[ch * plane + p];
            }
            y[o * plane + p] = acc;
        }
    }
    y
}

pub(crate) fn pointwise_conv_backward(
    x: &[f64],
    f: &[f64],
    dy: &[f64],
    c: usize,
    co: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut df = vec![0.0; f.len()];
    for p in 0..plane {
        for o in 0..co {
            let g = dy[o * plane + p];
            let base = p * co * c + o * c;
            for ch in 0..c {
                df[base + ch] = g * x[ch * plane + p];
                dx[ch * plane + p] += f[base + ch] * g;
            }
        }
    }
    (dx, df)
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut y = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        y.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (y, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let mut y = vec![0.0; c * ho * wo];
    let inv = 1.0 / (f * f) as f64;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                y[(ch * ho + i / f) * wo + j / f] += x[(ch * h + i) * w + j];
            }
        }
    }
    y.iter_mut().for_each(|v| *v *= inv);
    y
}

pub(crate) fn avg_pool_backward(dy: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[(ch * h + i) * w + j] = dy[(ch * ho + i / f) * wo + j / f] * inv;
            }
        }
    }
    dx
}

/// One axis of a half-pixel-centred linear resize: for each output index,
/// the two source taps and their weights.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_bilinear(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                y[(ch * ho + i) * wo + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

pub(crate) fn resize_bilinear_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy[(ch * ho + i) * wo + j];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
