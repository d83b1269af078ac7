//! Differentiable composition of the tensor primitives.
//!
//! Model code is written once against the [`Graph`] trait. [`Eager`] evaluates
//! it directly on tensors; [`Tape`] records every operation so that
//! [`Tape::backward`] can replay it in reverse. Leaves created with
//! [`Graph::constant`] are gradient barriers: nothing flows into them.

mod check;
mod tape;

pub use check::{grad_check, grad_check_detailed, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::{self, Tensor};

/// Epsilon used by every layer normalization in the network.
pub const LN_EPS: f32 = 1e-5;

pub trait Graph {
    type V: Clone;

    /// A non-differentiable leaf.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A learned parameter identified by `id`.
    fn param(&mut self, id: usize, t: &Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, x: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f32) -> Self::V;
    fn add_row_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    /// Last-axis softmax; `blocked` entries (same numel as `x`) get zero weight.
    fn softmax(&mut self, x: &Self::V, blocked: Option<&[bool]>) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    fn conv2d(
        &mut self,
        x: &Self::V,
        weight: &Self::V,
        bias: Option<&Self::V>,
        pad: usize,
        groups: usize,
    ) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn mean(&mut self, x: &Self::V) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    fn l1_loss(&mut self, pred: &Self::V, target: &Self::V) -> Result<Self::V>;
    fn gather_rows(&mut self, x: &Self::V, index: &[usize]) -> Result<Self::V>;
    fn scatter_rows(&mut self, x: &Self::V, target: &[Option<usize>], n: usize) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn pixel_shuffle(&mut self, x: &Self::V, r: usize) -> Result<Self::V>;
    fn split_heads(&mut self, x: &Self::V, heads: usize) -> Result<Self::V>;
    fn merge_heads(&mut self, x: &Self::V, heads: usize) -> Result<Self::V>;
    fn bicubic(&mut self, x: &Self::V, out_h: usize, out_w: usize) -> Result<Self::V>;

    /// `[c, h, w]` map to `[h*w, c]` tokens.
    fn to_tokens(&mut self, map: &Self::V) -> Result<Self::V> {
        let (c, h, w) = self.value(map).dims3()?;
        let flat = self.reshape(map, &[c, h * w])?;
        self.transpose(&flat)
    }

    /// `[h*w, c]` tokens to a `[c, h, w]` map.
    fn to_map(&mut self, tokens: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        let (_, c) = self.value(tokens).dims2()?;
        let t = self.transpose(tokens)?;
        self.reshape(&t, &[c, h, w])
    }
}

/// Direct evaluation without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, _id: usize, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }

    fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        tensor::transpose(x)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn scale(&mut self, x: &Tensor, s: f32) -> Tensor {
        x.scale(s)
    }

    fn add_row_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        x.add_row_bias(bias)
    }

    fn softmax(&mut self, x: &Tensor, blocked: Option<&[bool]>) -> Result<Tensor> {
        match blocked {
            Some(b) => tensor::softmax_masked(x, b),
            None => Ok(tensor::softmax(x)),
        }
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, gamma, beta, LN_EPS)
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        tensor::conv2d_grouped(x, weight, bias, pad, groups)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        tensor::gelu(x)
    }

    fn mean(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.mean() as f32)
    }

    fn sum(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum() as f32)
    }

    fn l1_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(l1_value(pred, target)? as f32))
    }

    fn gather_rows(&mut self, x: &Tensor, index: &[usize]) -> Result<Tensor> {
        x.gather_rows(index)
    }

    fn scatter_rows(&mut self, x: &Tensor, target: &[Option<usize>], n: usize) -> Result<Tensor> {
        x.scatter_rows(target, n)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn pixel_shuffle(&mut self, x: &Tensor, r: usize) -> Result<Tensor> {
        tensor::pixel_shuffle(x, r)
    }

    fn split_heads(&mut self, x: &Tensor, heads: usize) -> Result<Tensor> {
        tensor::split_heads(x, heads)
    }

    fn merge_heads(&mut self, x: &Tensor, heads: usize) -> Result<Tensor> {
        tensor::merge_heads(x, heads)
    }

    fn bicubic(&mut self, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        tensor::bicubic_resize_to(x, out_h, out_w)
    }
}

/// Mean absolute error accumulated in f64.
pub(crate) fn l1_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

#[cfg(test)]
mod tests;
