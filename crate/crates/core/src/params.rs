//! Named parameter trees shared by the attention blocks and the network.
//!
//! Every weight struct is generic over its leaf type: `Tensor` when stored,
//! a graph value when bound for a forward pass. [`ParamTree::map_named`]
//! visits leaves in one fixed order, which defines parameter ids, checkpoint
//! names and optimizer slots alike.

use rand::Rng;

use crate::autograd::Graph;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub trait ParamTree {
    type Elem;
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Elem) -> U) -> Self::Mapped<U>;
}

/// `prefix.name`, or `name` alone at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers every leaf as a parameter of `g`, numbered in visit order.
pub fn bind<G: Graph, P: ParamTree<Elem = Tensor>>(g: &mut G, p: &P) -> P::Mapped<G::V> {
    let mut id = 0;
    p.map_named("", &mut |_, t| {
        let v = g.param(id, t);
        id += 1;
        v
    })
}

/// Leaves with their names, in id order.
pub fn flatten<P: ParamTree<Elem = Tensor>>(p: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.map_named("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// A tree of the same layout whose leaves are taken from `leaves` in id
/// order. Shapes must match the template.
pub fn rebuild<P: ParamTree<Elem = Tensor>>(template: &P, leaves: Vec<Tensor>) -> Result<P::Mapped<Tensor>> {
    let mut it = leaves.into_iter();
    let mut err = None;
    let out = template.map_named("", &mut |name, t| match it.next() {
        Some(new) if new.shape() == t.shape() => new,
        other => {
            err.get_or_insert_with(|| match other {
                Some(new) => shape_err!("{name}: expected {:?}, got {:?}", t.shape(), new.shape()),
                None => shape_err!("{name}: missing tensor"),
            });
            t.clone()
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(shape_err!("more tensors than parameters"));
    }
    Ok(out)
}

pub fn count<P: ParamTree<Elem = Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.map_named("", &mut |_, t| n += t.numel());
    n
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let b = 1.0 / (fan_in as f32).sqrt();
    Tensor::rand_uniform(shape, -b, b, rng)
}

#[derive(Clone, Debug)]
pub struct LayerNormWeights<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormWeights {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

impl<T> ParamTree for LayerNormWeights<T> {
    type Elem = T;
    type Mapped<U> = LayerNormWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormWeights<U> {
        LayerNormWeights {
            gamma: f(&join(p, "gamma"), &self.gamma),
            beta: f(&join(p, "beta"), &self.beta),
        }
    }
}

impl<T: Clone> LayerNormWeights<T> {
    pub fn apply<G: Graph<V = T>>(&self, g: &mut G, x: &T) -> Result<T> {
        g.layer_norm(x, &self.gamma, &self.beta)
    }
}

/// A convolution with bias; padding keeps the spatial size.
#[derive(Clone, Debug)]
pub struct ConvWeights<T = Tensor> {
    pub weight: T,
    pub bias: T,
    pub groups: usize,
}

impl ConvWeights {
    pub fn init(c_in: usize, c_out: usize, k: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let fan_in = c_in / groups * k * k;
        Self {
            weight: fan_in_uniform(&[c_out, c_in / groups, k, k], fan_in, rng),
            bias: fan_in_uniform(&[c_out], fan_in, rng),
            groups,
        }
    }

    pub fn zeroed(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            groups: self.groups,
        }
    }
}

impl<T> ParamTree for ConvWeights<T> {
    type Elem = T;
    type Mapped<U> = ConvWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ConvWeights<U> {
        ConvWeights {
            weight: f(&join(p, "weight"), &self.weight),
            bias: f(&join(p, "bias"), &self.bias),
            groups: self.groups,
        }
    }
}

impl<T: Clone> ConvWeights<T> {
    pub fn apply<G: Graph<V = T>>(&self, g: &mut G, x: &T) -> Result<T> {
        let k = g.value(&self.weight).shape()[3];
        g.conv2d(x, &self.weight, Some(&self.bias), k / 2, self.groups)
    }
}

/// `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearWeights<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl LinearWeights {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[d_in, d_out], d_in, rng),
            bias: fan_in_uniform(&[d_out], d_in, rng),
        }
    }
}

impl<T> ParamTree for LinearWeights<T> {
    type Elem = T;
    type Mapped<U> = LinearWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LinearWeights<U> {
        LinearWeights {
            weight: f(&join(p, "weight"), &self.weight),
            bias: f(&join(p, "bias"), &self.bias),
        }
    }
}

impl<T: Clone> LinearWeights<T> {
    pub fn apply<G: Graph<V = T>>(&self, g: &mut G, x: &T) -> Result<T> {
        let y = g.matmul(x, &self.weight)?;
        g.add_row_bias(&y, &self.bias)
    }
}
