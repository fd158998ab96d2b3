//! Eager (non-recording) versions of the convolution-family operators.
//!
//! Each function evaluates the same code path as the corresponding [`Tape`]
//! method on constant inputs.

use crate::error::{invalid, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Kernel, bias and window parameters of a standard convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out_channels × in_channels × k × k`.
    pub kernel: Tensor,
    /// `out_channels`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.ndim() != 4 {
            return Err(invalid("ConvParams", format!("kernel must be 4-d, got {:?}", kernel.shape())));
        }
        if stride == 0 {
            return Err(invalid("ConvParams", "stride must be positive"));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    /// Zero bias of the right length for `kernel`.
    pub fn without_bias(kernel: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let co = kernel.shape().first().copied().unwrap_or(1);
        Self::new(kernel, Tensor::zeros(&[co]), stride, padding)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, crate::Var) -> Result<crate::Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    eval1(input, |t, x| {
        let w = t.constant(params.kernel.clone());
        let b = t.constant(params.bias.clone());
        t.conv2d(x, w, b, params.stride, params.padding)
    })
}

/// Transposed convolution; `params.kernel` is `in × out × k × k` relative to
/// this operator (the layout of the convolution it is adjoint to).
pub fn deconv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    if !(1..=2).contains(&params.stride) {
        return Err(invalid("deconv2d", format!("stride {} not in {{1, 2}}", params.stride)));
    }
    eval1(input, |t, x| {
        let w = t.constant(params.kernel.clone());
        let b = t.constant(params.bias.clone());
        t.deconv2d(x, w, b, params.stride, params.padding)
    })
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    eval1(input, |t, x| t.softmax(x, axis))
}

pub fn spatially_variant_conv(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    eval1(input, |t, x| {
        let f = t.constant(filters.clone());
        t.spatially_variant_conv(x, f)
    })
}

pub fn pointwise_dynamic_conv(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    eval1(input, |t, x| {
        let f = t.constant(filters.clone());
        t.pointwise_dynamic_conv(x, f)
    })
}
