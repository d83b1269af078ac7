//! Dense row-major `f32` tensors and the forward numerical primitives.
//!
//! Everything in this module is a pure function of its inputs. Batched
//! operations parallelise over independent output blocks only, so results do
//! not depend on the number of worker threads.

mod conv;
mod ops;
mod resize;
mod transform;

pub(crate) use conv::conv2d_backward;
pub use conv::{adaptive_avg_pool2d, avg_pool2d, conv2d, conv2d_grouped, pixel_shuffle, pixel_unshuffle};
pub(crate) use ops::row_stats;
pub use ops::{
    gelu, gelu_grad, layer_norm, matmul, merge_heads, softmax, softmax_masked, split_heads, transpose,
};
pub(crate) use resize::bicubic_backward;
pub use resize::{bicubic_resize, bicubic_resize_to, cubic_kernel, ResampleAxis};
pub use transform::{dihedral, dihedral_inverse, Dihedral};

use rand::Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("shape {shape:?} must be non-empty with positive dims"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: invalid shape")
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    /// Interprets the tensor as `[c, h, w]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected rank-3 [c,h,w], got {:?}", self.shape)),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected rank-2 [rows,cols], got {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Row `i` of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias[n]` to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let n = self.last_dim();
        if bias.numel() != n {
            return Err(shape_err!(
                "bias of {} elements cannot broadcast over rows of {n}",
                bias.numel()
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Stacks rows (tensors of equal trailing shape) along a new leading axis
    /// or, for rank-2 inputs, concatenates along axis 0.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let d = first.last_dim();
        let mut data = Vec::new();
        for p in parts {
            if p.last_dim() != d {
                return Err(shape_err!("concat: row width {} vs {d}", p.last_dim()));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / d;
        Self::new(&[rows, d], data)
    }

    /// Selects rows of a `[n, d]` tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (n, d) = self.dims2()?;
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(shape_err!("row index {i} out of range for {n} rows"));
            }
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Self::new(&[index.len(), d], data)
    }

    /// `out[target[i]] = self[i]` for every `Some` target; rows without a
    /// target are discarded. Unwritten output rows are zero.
    pub fn scatter_rows(&self, target: &[Option<usize>], n: usize) -> Result<Self> {
        let (rows, d) = self.dims2()?;
        if target.len() != rows {
            return Err(shape_err!("scatter: {} targets for {rows} rows", target.len()));
        }
        let mut out = vec![0.0; n * d];
        let mut written = vec![false; n];
        for (i, t) in target.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n || written[t] {
                    return Err(shape_err!("scatter target {t} out of range or repeated"));
                }
                written[t] = true;
                out[t * d..(t + 1) * d].copy_from_slice(&self.data[i * d..(i + 1) * d]);
            }
        }
        Self::new(&[n, d], out)
    }
}

/// `[c, h, w]` feature map to `[h*w, c]` tokens.
pub fn to_tokens(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    transpose(&map.reshape(&[c, h * w])?)
}

/// `[h*w, c]` tokens back to a `[c, h, w]` feature map.
pub fn to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = tokens.dims2()?;
    if n != h * w {
        return Err(shape_err!("{n} tokens cannot form a {h}x{w} map"));
    }
    transpose(tokens)?.into_reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn scatter_inverts_gather() {
        let t = Tensor::from_fn(&[4, 2], |i| i as f32);
        let idx = [2, 0, 3, 1];
        let g = t.gather_rows(&idx).unwrap();
        let targets: Vec<_> = idx.iter().map(|&i| Some(i)).collect();
        assert!(g.scatter_rows(&targets, 4).unwrap().bit_eq(&t));
    }

    #[test]
    fn scatter_rejects_repeated_target() {
        let t = Tensor::zeros(&[2, 1]);
        assert!(t.scatter_rows(&[Some(0), Some(0)], 2).is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        let m = Tensor::from_fn(&[3, 2, 4], |i| i as f32);
        let t = to_tokens(&m).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        assert_eq!(t.at(&[5, 2]), m.at(&[2, 1, 1]));
        assert!(to_map(&t, 2, 4).unwrap().bit_eq(&m));
    }
}
