//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the tape in reverse and
//! returns the gradient of a scalar with respect to every recorded value.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{invalid, mismatch, DiffError, Result};
use crate::kernels::{self, Window};
use crate::tensor::{DualTensor, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    ScalarMul {
        alpha: Var,
        x: Var,
    },
    MulPlane {
        x: Var,
        m: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        win: Window,
        cols: Vec<f64>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Var,
        win: Window,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SpatialConv {
        x: Var,
        f: Var,
        k: usize,
    },
    PointwiseConv {
        x: Var,
        f: Var,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Matmul(Var, Var),
    AvgPool {
        x: Var,
        f: usize,
    },
    Upsample {
        x: Var,
        f: usize,
    },
    Bilinear(Var),
    Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        x: Var,
        map: Vec<Option<usize>>,
    },
    WeightedBce {
        p: Var,
        target: Vec<f64>,
        valid: Vec<f64>,
        weights: (f64, f64),
        clamp: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::MulPlane { .. } => "mul_plane",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Softmax { .. } => "softmax",
            Op::SpatialConv { .. } => "spatially_variant_conv",
            Op::PointwiseConv { .. } => "pointwise_dynamic_conv",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Matmul(..) => "matmul",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Bilinear(..) => "resize_bilinear",
            Op::Normalize { .. } => "normalize_channels",
            Op::Gather { .. } => "gather_pixels",
            Op::WeightedBce { .. } => "weighted_bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every value on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the value does not influence the scalar (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(invalid(op, format!("expected a c×h×w tensor, got shape {s:?}"))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Pairs a value with its gradient from a completed backward pass.
    pub fn dual(&self, v: Var, grads: &Gradients) -> DualTensor {
        let value = self.value(v).clone();
        match grads.get(v) {
            Some(g) => DualTensor {
                value,
                gradient: g.clone(),
            },
            None => DualTensor::new(value),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        Ok(self.push_op(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_op(out, Op::Scale(x, c), &[x])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push_op(out, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push_op(out, Op::Square(x), &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `alpha·x` for a single-element `alpha`.
    pub fn scalar_mul(&mut self, alpha: Var, x: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return Err(invalid(
                "scalar_mul",
                format!("alpha must hold one value, got shape {:?}", self.shape(alpha)),
            ));
        }
        let a = self.value(alpha).item();
        let out = self.value(x).map(|v| a * v);
        Ok(self.push_op(out, Op::ScalarMul { alpha, x }, &[alpha, x]))
    }

    /// Multiplies every channel of a `c×h×w` tensor by a `1×h×w` plane.
    pub fn mul_plane(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = shape3("mul_plane", self.value(x))?;
        let ms = self.shape(m);
        if ms != [1, h, w] {
            return Err(mismatch("mul_plane", &[c, h, w], ms));
        }
        let plane = h * w;
        let mv = self.value(m).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mv[i % plane])
            .collect();
        let out = Tensor::from_parts(vec![c, h, w], data);
        Ok(self.push_op(out, Op::MulPlane { x, m }, &[x, m]))
    }

    fn conv_window(
        op: &'static str,
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<(Window, usize)> {
        let (c, h, wd) = shape3(op, x)?;
        let [co, ci, k, k2] = w.shape() else {
            return Err(invalid(op, format!("kernel must be 4-d, got {:?}", w.shape())));
        };
        if ci != &c || k != k2 {
            return Err(mismatch(op, x.shape(), w.shape()));
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_len(h, *k, stride, pad),
            kernels::conv_out_len(wd, *k, stride, pad),
        ) else {
            return Err(mismatch(op, x.shape(), w.shape()));
        };
        Ok((
            Window {
                c,
                h,
                w: wd,
                k: *k,
                stride,
                pad,
                ho,
                wo,
            },
            *co,
        ))
    }

    /// Cross-correlation of a `c×h×w` input with a `co×c×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (win, co) = Self::conv_window("conv2d", self.value(x), self.value(w), stride, pad)?;
        if win.k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {} is not odd", win.k)));
        }
        if self.shape(b) != [co] {
            return Err(mismatch("conv2d", self.shape(w), self.shape(b)));
        }
        let cols = kernels::im2col(self.value(x).data(), &win);
        let plane = win.cols();
        let mut y = vec![0.0; co * plane];
        kernels::gemm(co, win.rows(), plane, self.value(w).data(), false, &cols, false, 0.0, &mut y);
        kernels::add_channel_bias(&mut y, self.value(b).data(), plane);
        let out = Tensor::from_parts(vec![co, win.ho, win.wo], y);
        Ok(self.push_op(out, Op::Conv2d { x, w, b, win, cols }, &[x, w, b]))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with respect to
    /// its input. The kernel is `ci×co×k×k` where `ci` is this op's input
    /// channel count (the output channel count of the matching convolution).
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, hi, wi) = shape3("deconv2d", self.value(x))?;
        let [wc, co, k, k2] = self.shape(w) else {
            return Err(invalid("deconv2d", format!("kernel must be 4-d, got {:?}", self.shape(w))));
        };
        let (wc, co, k) = (*wc, *co, *k);
        if wc != ci || k != *k2 || stride == 0 {
            return Err(mismatch("deconv2d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [co] {
            return Err(mismatch("deconv2d", self.shape(w), self.shape(b)));
        }
        let ho = ((hi - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let wo = ((wi - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(invalid("deconv2d", "padding exceeds output extent"));
        };
        let win = Window {
            c: co,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
            ho: hi,
            wo: wi,
        };
        let mut cols = vec![0.0; win.rows() * win.cols()];
        kernels::gemm(
            win.rows(),
            ci,
            win.cols(),
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            0.0,
            &mut cols,
        );
        let mut y = kernels::col2im(&cols, &win);
        kernels::add_channel_bias(&mut y, self.value(b).data(), ho * wo);
        let out = Tensor::from_parts(vec![co, ho, wo], y);
        Ok(self.push_op(out, Op::Deconv2d { x, w, b, win }, &[x, w, b]))
    }

    /// Max-shifted exponential normalisation along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let y = kernels::softmax(self.value(x).data(), outer, len, inner);
        let out = Tensor::from_parts(shape, y);
        Ok(self.push_op(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Per-pixel `k×k` filtering of every channel of `x` (`c×h×w`) with the
    /// pixel's own filter from `f` (`h×w×k×k`).
    pub fn spatially_variant_conv(&mut self, x: Var, f: Var) -> Result<Var> {
        let (c, h, w) = shape3("spatially_variant_conv", self.value(x))?;
        let [fh, fw, k, k2] = self.shape(f) else {
            return Err(invalid(
                "spatially_variant_conv",
                format!("filters must be h×w×k×k, got {:?}", self.shape(f)),
            ));
        };
        let k = *k;
        if (*fh, *fw) != (h, w) || k != *k2 {
            return Err(mismatch("spatially_variant_conv", self.shape(x), self.shape(f)));
        }
        if k % 2 == 0 {
            return Err(invalid("spatially_variant_conv", format!("kernel size {k} is not odd")));
        }
        let y = kernels::spatial_conv(self.value(x).data(), self.value(f).data(), c, h, w, k);
        let out = Tensor::from_parts(vec![c, h, w], y);
        Ok(self.push_op(out, Op::SpatialConv { x, f, k }, &[x, f]))
    }

    /// Per-pixel channel mixing of `x` (`c×h×w`) by `f` (`h×w×co×c`).
    pub fn pointwise_dynamic_conv(&mut self, x: Var, f: Var) -> Result<Var> {
        let (c, h, w) = shape3("pointwise_dynamic_conv", self.value(x))?;
        let [fh, fw, co, fc] = self.shape(f) else {
            return Err(invalid(
                "pointwise_dynamic_conv",
                format!("filters must be h×w×c′×c, got {:?}", self.shape(f)),
            ));
        };
        let co = *co;
        if (*fh, *fw, *fc) != (h, w, c) {
            return Err(mismatch("pointwise_dynamic_conv", self.shape(x), self.shape(f)));
        }
        let y = kernels::pointwise_conv(self.value(x).data(), self.value(f).data(), c, co, h * w);
        let out = Tensor::from_parts(vec![co, h, w], y);
        Ok(self.push_op(out, Op::PointwiseConv { x, f }, &[x, f]))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat", "no inputs"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Elements `start..start+len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} out of bounds for {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(out, Op::Narrow { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let (y, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let out = Tensor::from_parts(out_shape, y);
        Ok(self.push_op(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(invalid("transpose", format!("expected 2-d, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(mismatch("matmul", sa, sb));
        };
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut y = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut y);
        let out = Tensor::from_parts(vec![m, n], y);
        Ok(self.push_op(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Non-overlapping `f×f` average pooling of a `c×h×w` tensor.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let (c, h, w) = shape3("avg_pool", self.value(x))?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid("avg_pool", format!("factor {f} does not divide {h}×{w}")));
        }
        let y = kernels::avg_pool(self.value(x).data(), c, h, w, f);
        let out = Tensor::from_parts(vec![c, h / f, w / f], y);
        Ok(self.push_op(out, Op::AvgPool { x, f }, &[x]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let (c, h, w) = shape3("upsample_nearest", self.value(x))?;
        if f == 0 {
            return Err(invalid("upsample_nearest", "factor must be positive"));
        }
        let (ho, wo) = (h * f, w * f);
        let src = self.value(x).data();
        let mut y = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    y[(ch * ho + i) * wo + j] = src[(ch * h + i / f) * w + j / f];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, ho, wo], y);
        Ok(self.push_op(out, Op::Upsample { x, f }, &[x]))
    }

    /// Half-pixel-centred bilinear resize of a `c×h×w` tensor.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (c, h, w) = shape3("resize_bilinear", self.value(x))?;
        if ho == 0 || wo == 0 {
            return Err(invalid("resize_bilinear", "target extent must be positive"));
        }
        let y = kernels::resize_bilinear(self.value(x).data(), c, h, w, ho, wo);
        let out = Tensor::from_parts(vec![c, ho, wo], y);
        Ok(self.push_op(out, Op::Bilinear(x), &[x]))
    }

    /// Scales each pixel's channel vector of a `c×h×w` tensor to unit length,
    /// `x / sqrt(|x|² + eps)`. A pixel whose vector is exactly zero is
    /// replaced by `fallback` when given.
    pub fn normalize_channels(&mut self, x: Var, eps: f64, fallback: Option<&[f64]>) -> Result<Var> {
        let (c, h, w) = shape3("normalize_channels", self.value(x))?;
        if let Some(fb) = fallback {
            if fb.len() != c {
                return Err(invalid("normalize_channels", format!("fallback has {} values for {c} channels", fb.len())));
            }
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut norms = vec![0.0; plane];
        let mut y = vec![0.0; c * plane];
        for p in 0..plane {
            let ss: f64 = (0..c).map(|ch| src[ch * plane + p].powi(2)).sum();
            match fallback {
                Some(fb) if ss == 0.0 => {
                    // zero norm marks the pixel as constant for backward
                    for ch in 0..c {
                        y[ch * plane + p] = fb[ch];
                    }
                }
                _ => {
                    let n = (ss + eps).sqrt();
                    norms[p] = n;
                    for ch in 0..c {
                        y[ch * plane + p] = src[ch * plane + p] / n;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![c, h, w], y);
        Ok(self.push_op(out, Op::Normalize { x, norms }, &[x]))
    }

    /// Spatial resampling of a `c×h×w` tensor: output pixel `p` copies input
    /// pixel `map[p]` (all channels) or is zero when `map[p]` is `None`.
    pub fn gather_pixels(&mut self, x: Var, map: &[Option<usize>]) -> Result<Var> {
        let (c, h, w) = shape3("gather_pixels", self.value(x))?;
        let plane = h * w;
        if map.len() != plane || map.iter().flatten().any(|&s| s >= plane) {
            return Err(invalid("gather_pixels", format!("map does not index a {h}×{w} plane")));
        }
        let src = self.value(x).data();
        let mut y = vec![0.0; c * plane];
        for ch in 0..c {
            for (p, m) in map.iter().enumerate() {
                if let Some(s) = m {
                    y[ch * plane + p] = src[ch * plane + s];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, h, w], y);
        Ok(self.push_op(
            out,
            Op::Gather {
                x,
                map: map.to_vec(),
            },
            &[x],
        ))
    }

    /// Class-weighted binary cross-entropy averaged over valid pixels:
    /// `-(w_pos·y·ln p + w_neg·(1-y)·ln(1-p))` with `p` clamped to
    /// `[clamp, 1-clamp]`. Returns a `[1]` tensor, zero when no pixel is valid.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        target: &Tensor,
        valid: &Tensor,
        weights: (f64, f64),
        clamp: f64,
    ) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(mismatch("weighted_bce", pv.shape(), target.shape()));
        }
        if pv.shape() != valid.shape() {
            return Err(mismatch("weighted_bce", pv.shape(), valid.shape()));
        }
        let n_valid = valid.data().iter().filter(|&&v| v > 0.5).count();
        let mut total = 0.0;
        for ((&pp, &y), &m) in pv.data().iter().zip(target.data()).zip(valid.data()) {
            if m > 0.5 {
                let pc = pp.clamp(clamp, 1.0 - clamp);
                total -= weights.0 * y * pc.ln() + weights.1 * (1.0 - y) * (1.0 - pc).ln();
            }
        }
        let loss = if n_valid > 0 { total / n_valid as f64 } else { 0.0 };
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::WeightedBce {
                p,
                target: target.data().to_vec(),
                valid: valid.data().to_vec(),
                weights,
                clamp,
            },
            &[p],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every value on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(DiffError::NonFiniteGradient {
                    op: node.op.name().to_string(),
                });
            }
            let contributions = self.local_grads(id, &g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut r = vec![];
                if self.wants(*a) {
                    r.push((*a, g.zip_map(self.value(*b), |x, y| x * y).unwrap()));
                }
                if self.wants(*b) {
                    r.push((*b, g.zip_map(self.value(*a), |x, y| x * y).unwrap()));
                }
                r
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                vec![(*x, d.unwrap())]
            }
            Op::Sigmoid(x) => vec![(*x, g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap())],
            Op::Square(x) => vec![(*x, g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv).unwrap())],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::ScalarMul { alpha, x } => {
                let a = self.value(*alpha).item();
                let mut r = vec![];
                if self.wants(*alpha) {
                    r.push((*alpha, Tensor::scalar(g.dot(self.value(*x)))));
                }
                if self.wants(*x) {
                    r.push((*x, g.map(|v| a * v)));
                }
                r
            }
            Op::MulPlane { x, m } => {
                let plane = self.value(*m).len();
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                let mut r = vec![];
                if self.wants(*x) {
                    let d = g.data().iter().enumerate().map(|(i, gv)| gv * mv[i % plane]).collect();
                    r.push((*x, like(*x, d)));
                }
                if self.wants(*m) {
                    let mut d = vec![0.0; plane];
                    for (i, gv) in g.data().iter().enumerate() {
                        d[i % plane] += gv * xv[i];
                    }
                    r.push((*m, like(*m, d)));
                }
                r
            }
            Op::Conv2d { x, w, b, win, cols } => {
                let co = self.shape(*w)[0];
                let plane = win.cols();
                let mut r = vec![];
                if self.wants(*x) {
                    let mut dcols = vec![0.0; win.rows() * plane];
                    kernels::gemm(win.rows(), co, plane, self.value(*w).data(), true, g.data(), false, 0.0, &mut dcols);
                    r.push((*x, like(*x, kernels::col2im(&dcols, win))));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; co * win.rows()];
                    kernels::gemm(co, plane, win.rows(), g.data(), false, cols, true, 0.0, &mut dw);
                    r.push((*w, like(*w, dw)));
                }
                if self.wants(*b) {
                    r.push((*b, like(*b, kernels::channel_sums(g.data(), plane))));
                }
                r
            }
            Op::Deconv2d { x, w, b, win } => {
                let ci = self.shape(*x)[0];
                let dcols = kernels::im2col(g.data(), win);
                let mut r = vec![];
                if self.wants(*x) {
                    let mut dx = vec![0.0; ci * win.cols()];
                    kernels::gemm(ci, win.rows(), win.cols(), self.value(*w).data(), false, &dcols, false, 0.0, &mut dx);
                    r.push((*x, like(*x, dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; ci * win.rows()];
                    kernels::gemm(ci, win.cols(), win.rows(), self.value(*x).data(), false, &dcols, true, 0.0, &mut dw);
                    r.push((*w, like(*w, dw)));
                }
                if self.wants(*b) {
                    r.push((*b, like(*b, kernels::channel_sums(g.data(), win.h * win.w))));
                }
                r
            }
            Op::Softmax { x, outer, len, inner } => {
                let d = kernels::softmax_backward(out.data(), g.data(), *outer, *len, *inner);
                vec![(*x, like(*x, d))]
            }
            Op::SpatialConv { x, f, k } => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let (dx, df) = kernels::spatial_conv_backward(
                    self.value(*x).data(),
                    self.value(*f).data(),
                    g.data(),
                    *c,
                    *h,
                    *w,
                    *k,
                );
                vec![(*x, like(*x, dx)), (*f, like(*f, df))]
            }
            Op::PointwiseConv { x, f } => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let co = self.shape(*f)[2];
                let (dx, df) = kernels::pointwise_conv_backward(
                    self.value(*x).data(),
                    self.value(*f).data(),
                    g.data(),
                    *c,
                    co,
                    h * w,
                );
                vec![(*x, like(*x, dx)), (*f, like(*f, df))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (p, like(p, d))
                    })
                    .collect()
            }
            Op::Narrow { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                vec![(*x, like(*x, d))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec()))],
            Op::Permute { x, perm } => {
                let (d, _) = kernels::permute(g.data(), g.shape(), &kernels::inverse_permutation(perm));
                vec![(*x, like(*x, d))]
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.shape(*a) else { unreachable!() };
                let n = self.shape(*b)[1];
                let mut r = vec![];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(*m, n, *k, g.data(), false, self.value(*b).data(), true, 0.0, &mut da);
                    r.push((*a, like(*a, da)));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(*k, *m, n, self.value(*a).data(), true, g.data(), false, 0.0, &mut db);
                    r.push((*b, like(*b, db)));
                }
                r
            }
            Op::AvgPool { x, f } => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                vec![(*x, like(*x, kernels::avg_pool_backward(g.data(), *c, *h, *w, *f)))]
            }
            Op::Upsample { x, f } => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let (ho, wo) = (h * f, w * f);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..*c {
                    for i in 0..ho {
                        for j in 0..wo {
                            d[(ch * h + i / f) * w + j / f] += g.data()[(ch * ho + i) * wo + j];
                        }
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Bilinear(x) => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                vec![(*x, like(*x, kernels::resize_bilinear_backward(g.data(), *c, *h, *w, ho, wo)))]
            }
            Op::Normalize { x, norms } => {
                let c = self.shape(*x)[0];
                let plane = norms.len();
                let (y, gd) = (out.data(), g.data());
                let mut d = vec![0.0; c * plane];
                for (p, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..c).map(|ch| gd[ch * plane + p] * y[ch * plane + p]).sum();
                    for ch in 0..c {
                        d[ch * plane + p] = (gd[ch * plane + p] - y[ch * plane + p] * dot) / n;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Gather { x, map } => {
                let c = self.shape(*x)[0];
                let plane = map.len();
                let mut d = vec![0.0; c * plane];
                for ch in 0..c {
                    for (p, m) in map.iter().enumerate() {
                        if let Some(s) = m {
                            d[ch * plane + s] += g.data()[ch * plane + p];
                        }
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::WeightedBce {
                p,
                target,
                valid,
                weights,
                clamp,
            } => {
                let n_valid = valid.iter().filter(|&&v| v > 0.5).count();
                let scale = if n_valid > 0 { g.item() / n_valid as f64 } else { 0.0 };
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(valid)
                    .map(|((&pp, &y), &m)| {
                        if m <= 0.5 || pp < *clamp || pp > 1.0 - clamp {
                            0.0
                        } else {
                            -scale * (weights.0 * y / pp - weights.1 * (1.0 - y) / (1.0 - pp))
                        }
                    })
                    .collect();
                vec![(*p, like(*p, d))]
            }
        }
    }
}
