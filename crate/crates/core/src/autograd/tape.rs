use std::collections::BTreeMap;

use super::{l1_value, Graph, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRowBias(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        groups: usize,
    },
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    L1(Var, Var),
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<Option<usize>>),
    Concat(Vec<Var>),
    PixelShuffle(Var, usize),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Bicubic(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// f64 value of scalar reductions, before rounding to f32.
    exact: Option<f64>,
}

/// Append-only record of a forward computation. Node order is a
/// topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<usize, Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient accumulated for parameter `id`, if it was reachable.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<usize, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }

    /// Gradient of an [`Tape::input`] leaf. Constants never have one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
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

    /// A differentiable leaf that is not a model parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Input, true)
    }

    /// Scalar value of `v`; reductions report their f64 accumulator.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    fn push_leaf(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.val(loss).shape()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let da = tensor::matmul(&g, &tensor::transpose(bv)?)?;
                    let db = tensor::matmul(&tensor::transpose(av)?, &g)?;
                    send(*a, sum_to_shape(da, av.shape())?)?;
                    send(*b, sum_to_shape(db, bv.shape())?)?;
                }
                Op::Transpose(x) => send(*x, tensor::transpose(&g)?)?,
                Op::Reshape(x) => send(*x, g.into_reshape(self.val(*x).shape())?)?,
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(self.val(*b))?)?;
                    send(*b, g.mul(self.val(*a))?)?;
                }
                Op::Scale(x, s) => send(*x, g.scale(*s))?,
                Op::AddRowBias(x, b) => {
                    let n = g.last_dim();
                    let mut db = vec![0.0f32; n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::new(self.val(*b).shape(), db)?)?;
                    send(*x, g)?;
                }
                Op::Softmax(x) => send(*x, softmax_backward(&node.value, &g))?,
                Op::LayerNorm(x, gamma, beta) => {
                    let (dx, dg, db) = layer_norm_backward(self.val(*x), self.val(*gamma), &g)?;
                    send(*x, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                Op::Conv { x, w, b, pad, groups } => {
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.val(*x), self.val(*w), &g, *pad, *groups)?;
                    send(*x, dx)?;
                    send(*w, dw)?;
                    if let Some(b) = b {
                        send(*b, db)?;
                    }
                }
                Op::Gelu(x) => send(*x, g.mul(&tensor::gelu_grad(self.val(*x)))?)?,
                Op::Mean(x) => {
                    let xv = self.val(*x);
                    send(*x, Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f32))?;
                }
                Op::Sum(x) => send(*x, Tensor::full(self.val(*x).shape(), g.data()[0]))?,
                Op::L1(p, t) => {
                    let (pv, tv) = (self.val(*p), self.val(*t));
                    let s = g.data()[0] / pv.numel() as f32;
                    let dp = pv.zip_map(tv, |a, b| {
                        if a > b {
                            s
                        } else if a < b {
                            -s
                        } else {
                            0.0
                        }
                    })?;
                    send(*t, dp.scale(-1.0))?;
                    send(*p, dp)?;
                }
                Op::Gather(x, index) => {
                    let xv = self.val(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (r, &src) in index.iter().enumerate() {
                        for (acc, &v) in dx[src * d..(src + 1) * d].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(*x, Tensor::new(xv.shape(), dx)?)?;
                }
                Op::Scatter(x, target) => {
                    let xv = self.val(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (r, t) in target.iter().enumerate() {
                        if let Some(t) = *t {
                            dx[r * d..(r + 1) * d].copy_from_slice(g.row(t));
                        }
                    }
                    send(*x, Tensor::new(xv.shape(), dx)?)?;
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.val(*p);
                        let n = pv.numel();
                        let slice = g.data()[off..off + n].to_vec();
                        off += n;
                        send(*p, Tensor::new(pv.shape(), slice)?)?;
                    }
                }
                Op::PixelShuffle(x, r) => send(*x, tensor::pixel_unshuffle(&g, *r)?)?,
                Op::SplitHeads(x, h) => {
                    let merged = tensor::merge_heads(&g, *h)?;
                    send(*x, merged.into_reshape(self.val(*x).shape())?)?;
                }
                Op::MergeHeads(x, h) => send(*x, tensor::split_heads(&g, *h)?)?,
                Op::Bicubic(x) => {
                    let (_, h, w) = self.val(*x).dims3()?;
                    send(*x, tensor::bicubic_backward(&g, h, w)?)?;
                }
            }
        }
        Ok(out)
    }
}

/// Sums leading batch blocks of `t` until it matches `shape` (used when a
/// matmul operand was broadcast across the batch).
fn sum_to_shape(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t);
    }
    let n: usize = shape.iter().product();
    if n == 0 || !t.numel().is_multiple_of(n) {
        return Err(shape_err!("cannot reduce {:?} to {shape:?}", t.shape()));
    }
    let mut acc = vec![0.0f32; n];
    for block in t.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(block) {
            *a += v;
        }
    }
    Tensor::new(shape, acc)
}

/// `y * (g - <g, y>)` row by row.
fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut out = g.clone();
    for (row, yr) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: f32 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
        for (o, &yv) in row.iter_mut().zip(yr) {
            *o = yv * (*o - dot);
        }
    }
    out
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.last_dim();
    let gm = gamma.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for ((xr, gr), dxr) in x.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
        let (mean, rstd) = tensor::row_stats(xr, LN_EPS);
        let xhat: Vec<f64> = xr.iter().map(|&v| (v as f64 - mean) * rstd).collect();
        let dxhat: Vec<f64> = gr
            .iter()
            .zip(gm)
            .map(|(&gv, &gmv)| gv as f64 * gmv as f64)
            .collect();
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dxr[j] = (rstd * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
            dgamma[j] += gr[j] as f64 * xhat[j];
            dbeta[j] += gr[j] as f64;
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(gamma.shape(), to32(dgamma))?,
        Tensor::new(gamma.shape(), to32(dbeta))?,
    ))
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Constant, false)
    }

    fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), Op::Param(id), true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::transpose(self.val(*x))?;
        Ok(self.push(y, Op::Transpose(*x), &[*x]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(*x), &[*x]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).add(self.val(*b))?;
        Ok(self.push(y, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).mul(self.val(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn scale(&mut self, x: &Var, s: f32) -> Var {
        let y = self.val(*x).scale(s);
        self.push(y, Op::Scale(*x, s), &[*x])
    }

    fn add_row_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let y = self.val(*x).add_row_bias(self.val(*bias))?;
        Ok(self.push(y, Op::AddRowBias(*x, *bias), &[*x, *bias]))
    }

    fn softmax(&mut self, x: &Var, blocked: Option<&[bool]>) -> Result<Var> {
        let y = match blocked {
            Some(b) => tensor::softmax_masked(self.val(*x), b)?,
            None => tensor::softmax(self.val(*x)),
        };
        Ok(self.push(y, Op::Softmax(*x), &[*x]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let y = tensor::layer_norm(self.val(*x), self.val(*gamma), self.val(*beta), LN_EPS)?;
        Ok(self.push(y, Op::LayerNorm(*x, *gamma, *beta), &[*x, *gamma, *beta]))
    }

    fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let y = tensor::conv2d_grouped(
            self.val(*x),
            self.val(*weight),
            bias.map(|b| self.val(*b)),
            pad,
            groups,
        )?;
        let mut inputs = vec![*x, *weight];
        inputs.extend(bias.copied());
        let op = Op::Conv {
            x: *x,
            w: *weight,
            b: bias.copied(),
            pad,
            groups,
        };
        Ok(self.push(y, op, &inputs))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let y = tensor::gelu(self.val(*x));
        self.push(y, Op::Gelu(*x), &[*x])
    }

    fn mean(&mut self, x: &Var) -> Var {
        let m = self.val(*x).mean();
        let v = self.push(Tensor::scalar(m as f32), Op::Mean(*x), &[*x]);
        self.nodes[v.0].exact = Some(m);
        v
    }

    fn sum(&mut self, x: &Var) -> Var {
        let s = self.val(*x).sum();
        let v = self.push(Tensor::scalar(s as f32), Op::Sum(*x), &[*x]);
        self.nodes[v.0].exact = Some(s);
        v
    }

    fn l1_loss(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let l = l1_value(self.val(*pred), self.val(*target))?;
        let v = self.push(
            Tensor::scalar(l as f32),
            Op::L1(*pred, *target),
            &[*pred, *target],
        );
        self.nodes[v.0].exact = Some(l);
        Ok(v)
    }

    fn gather_rows(&mut self, x: &Var, index: &[usize]) -> Result<Var> {
        let y = self.val(*x).gather_rows(index)?;
        Ok(self.push(y, Op::Gather(*x, index.to_vec()), &[*x]))
    }

    fn scatter_rows(&mut self, x: &Var, target: &[Option<usize>], n: usize) -> Result<Var> {
        let y = self.val(*x).scatter_rows(target, n)?;
        Ok(self.push(y, Op::Scatter(*x, target.to_vec()), &[*x]))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let y = Tensor::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let y = tensor::pixel_shuffle(self.val(*x), r)?;
        Ok(self.push(y, Op::PixelShuffle(*x, r), &[*x]))
    }

    fn split_heads(&mut self, x: &Var, heads: usize) -> Result<Var> {
        let y = tensor::split_heads(self.val(*x), heads)?;
        Ok(self.push(y, Op::SplitHeads(*x, heads), &[*x]))
    }

    fn merge_heads(&mut self, x: &Var, heads: usize) -> Result<Var> {
        let y = tensor::merge_heads(self.val(*x), heads)?;
        Ok(self.push(y, Op::MergeHeads(*x, heads), &[*x]))
    }

    fn bicubic(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = tensor::bicubic_resize_to(self.val(*x), out_h, out_w)?;
        Ok(self.push(y, Op::Bicubic(*x), &[*x]))
    }
}
