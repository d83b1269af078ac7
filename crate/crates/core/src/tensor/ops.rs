use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Multiply-adds below which matmul stays on the calling thread.
const PAR_MIN_WORK: usize = 1 << 15;

fn split_matrix(t: &Tensor) -> Result<(&[usize], usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(shape_err!("matmul operand needs rank >= 2, got {s:?}"));
    }
    let (batch, mk) = s.split_at(s.len() - 2);
    Ok((batch, mk[0], mk[1]))
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
///
/// Batch prefixes must match exactly, or one side must carry no batch
/// (rank 2 or a single batch), in which case it is shared by every batch of
/// the other. Each output element is accumulated over `k` in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = split_matrix(a)?;
    let (bb, kb, n) = split_matrix(b)?;
    if k != kb {
        return Err(shape_err!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let na: usize = ba.iter().product();
    let nb: usize = bb.iter().product();
    let (batch_shape, batches) = if ba == bb || nb == 1 {
        (ba.to_vec(), na)
    } else if na == 1 {
        (bb.to_vec(), nb)
    } else {
        return Err(shape_err!(
            "matmul batch dims not broadcastable: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    };

    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; batches * m * n];
    let row = |r: usize, dst: &mut [f32]| {
        let bi = r / m;
        let i = r % m;
        let a_off = if na == 1 { 0 } else { bi * m * k } + i * k;
        let b_off = if nb == 1 { 0 } else { bi * k * n };
        for p in 0..k {
            let av = ad[a_off + p];
            let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if batches * m * n * k >= PAR_MIN_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(r, dst)| row(r, dst));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(r, dst)| row(r, dst));
    }
    let mut shape = batch_shape;
    shape.extend([m, n]);
    Tensor::new(&shape, out)
}

/// Swaps the last two dimensions.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (batch, m, n) = split_matrix(x)?;
    let batches: usize = batch.iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..batches {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = batch.to_vec();
    shape.extend([n, m]);
    Tensor::new(&shape, out)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    softmax_rows(x, None)
}

/// Softmax over the last axis where `blocked[i]` entries get zero weight, as
/// if their logit were minus infinity. A fully blocked row yields zeros.
pub fn softmax_masked(x: &Tensor, blocked: &[bool]) -> Result<Tensor> {
    if blocked.len() != x.numel() {
        return Err(shape_err!(
            "mask of {} entries for logits of {:?}",
            blocked.len(),
            x.shape()
        ));
    }
    Ok(softmax_rows(x, Some(blocked)))
}

fn softmax_rows(x: &Tensor, blocked: Option<&[bool]>) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        let mask = blocked.map(|b| &b[r * n..(r + 1) * n]);
        let open = |j: usize| mask.is_none_or(|m| !m[j]);
        let max = (0..n)
            .filter(|&j| open(j))
            .map(|j| row[j])
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0f32;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if open(j) { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Layer normalization over the last axis with biased variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err!(
            "layer_norm affine params of {}/{} for width {d}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mean, rstd) = row_stats(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * rstd) as f32 * g[j] + b[j];
        }
    }
    Ok(out)
}

/// Mean and reciprocal standard deviation of one row, two-pass in f64.
pub(crate) fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

/// Derivative of [`gelu`] evaluated at each element of `x`.
pub fn gelu_grad(x: &Tensor) -> Tensor {
    x.map(|v| {
        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
    })
}

/// `[b, l, heads*hd]` (or `[l, heads*hd]`) to `[b*heads, l, hd]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = batch_rows(x)?;
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("width {d} not divisible by {heads} heads"));
    }
    let hd = d / heads;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for bi in 0..b {
        for li in 0..l {
            for h in 0..heads {
                let s = (bi * l + li) * d + h * hd;
                let o = ((bi * heads + h) * l + li) * hd;
                out[o..o + hd].copy_from_slice(&src[s..s + hd]);
            }
        }
    }
    Tensor::new(&[b * heads, l, hd], out)
}

/// Inverse of [`split_heads`], always producing `[b, l, heads*hd]`.
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let [bh, l, hd] = x.shape()[..] else {
        return Err(shape_err!("merge_heads expects rank 3, got {:?}", x.shape()));
    };
    if heads == 0 || bh % heads != 0 {
        return Err(shape_err!("{bh} head-batches not divisible by {heads}"));
    }
    let b = bh / heads;
    let d = heads * hd;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for bi in 0..b {
        for li in 0..l {
            for h in 0..heads {
                let o = (bi * l + li) * d + h * hd;
                let s = ((bi * heads + h) * l + li) * hd;
                out[o..o + hd].copy_from_slice(&src[s..s + hd]);
            }
        }
    }
    Tensor::new(&[b, l, d], out)
}

fn batch_rows(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [l, d] => Ok((1, l, d)),
        [b, l, d] => Ok((b, l, d)),
        _ => Err(shape_err!("expected [l,d] or [b,l,d], got {:?}", x.shape())),
    }
}
