//! Multi-head attention and the three attention patterns of the network:
//! grouped self-attention over label-sorted subgroups, cross-attention to
//! the token centers, and overlapping local-window attention.
//!
//! Each block exists twice: a `*_on` form generic over [`Graph`], used by the
//! model and by gradient checks, and a plain tensor form.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Eager, Graph};
use crate::error::{shape_err, Error, Result};
use crate::params::{bind, fan_in_uniform, join, ParamTree};
use crate::tensor::Tensor;
use crate::token_agg::{TokenCenters, TokenGrouping};

/// Projections of one attention block. All matrices are `[d, d]` and act on
/// row vectors (`x·W`).
#[derive(Clone, Debug)]
pub struct AttentionWeights<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_out: T,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d, heads)?;
        let mut w = || fan_in_uniform(&[d, d], d, rng);
        Ok(Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_out: w(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Usage(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

impl<T> ParamTree for AttentionWeights<T> {
    type Elem = T;
    type Mapped<U> = AttentionWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: f(&join(p, "w_q"), &self.w_q),
            w_k: f(&join(p, "w_k"), &self.w_k),
            w_v: f(&join(p, "w_v"), &self.w_v),
            w_out: f(&join(p, "w_out"), &self.w_out),
            heads: self.heads,
        }
    }
}

/// Scaled dot-product attention over `[b, l, d]` operands, split into
/// `heads`. `blocked` has `b·l_q·l_k` entries; blocked keys get zero weight.
pub fn attend<G: Graph>(
    g: &mut G,
    q: &G::V,
    k: &G::V,
    v: &G::V,
    heads: usize,
    blocked: Option<&[bool]>,
) -> Result<G::V> {
    let [b, lq, d] = g.value(q).shape()[..] else {
        return Err(shape_err!("attention queries must be rank 3"));
    };
    let [bk, lk, dk] = g.value(k).shape()[..] else {
        return Err(shape_err!("attention keys must be rank 3"));
    };
    if bk != b || dk != d || g.value(v).shape() != g.value(k).shape() {
        return Err(shape_err!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            g.value(q).shape(),
            g.value(k).shape(),
            g.value(v).shape()
        ));
    }
    check_heads(d, heads)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose(&kh)?;
    let s = g.matmul(&qh, &kt)?;
    let s = g.scale(&s, 1.0 / ((d / heads) as f32).sqrt());
    let p = match blocked {
        Some(mask) => {
            if mask.len() != b * lq * lk {
                return Err(shape_err!("mask of {} entries for {b}x{lq}x{lk}", mask.len()));
            }
            let per = lq * lk;
            let expanded: Vec<bool> = (0..b * heads)
                .flat_map(|bh| mask[bh / heads * per..(bh / heads + 1) * per].iter().copied())
                .collect();
            g.softmax(&s, Some(&expanded))?
        }
        None => g.softmax(&s, None)?,
    };
    let o = g.matmul(&p, &vh)?;
    g.merge_heads(&o, heads)
}

/// Rank-2 operands are treated as a batch of one and returned as rank 2.
pub fn multi_head_attention_on<G: Graph>(
    g: &mut G,
    q: &G::V,
    k: &G::V,
    v: &G::V,
    w: &AttentionWeights<G::V>,
    blocked: Option<&[bool]>,
) -> Result<G::V> {
    let rank2 = g.value(q).rank() == 2;
    let lift = |g: &mut G, x: &G::V| -> Result<G::V> {
        if rank2 {
            let (l, d) = g.value(x).dims2()?;
            g.reshape(x, &[1, l, d])
        } else {
            Ok(x.clone())
        }
    };
    let (q, k, v) = (lift(g, q)?, lift(g, k)?, lift(g, v)?);
    let qp = g.matmul(&q, &w.w_q)?;
    let kp = g.matmul(&k, &w.w_k)?;
    let vp = g.matmul(&v, &w.w_v)?;
    let o = attend(g, &qp, &kp, &vp, w.heads, blocked)?;
    let o = g.matmul(&o, &w.w_out)?;
    if rank2 {
        let s = g.value(&o).shape().to_vec();
        g.reshape(&o, &[s[1], s[2]])
    } else {
        Ok(o)
    }
}

/// Projected multi-head attention; `mask[.., i, j] = true` hides key `j`
/// from query `i`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &AttentionWeights,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let mut g = Eager;
    let w = bind(&mut g, w);
    multi_head_attention_on(&mut g, q, k, v, &w, mask)
}

/// Slots whose keys subgroup `j` sees: its own and the next subgroup's, the
/// last wrapping to the first.
pub fn neighbor_slots(grouping: &TokenGrouping, j: usize) -> impl Iterator<Item = usize> {
    let gs = grouping.g_s;
    let next = (j + 1) % grouping.n_sub;
    (j * gs..(j + 1) * gs).chain(next * gs..(next + 1) * gs)
}

/// Grouped self-attention of `[N, d]` tokens.
///
/// Projections are taken in token order and gathered into subgroups. Every
/// subgroup's queries attend to the keys of itself and its successor with
/// pad slots masked, and results are pushed back to token order.
pub fn iasa_on<G: Graph>(
    g: &mut G,
    x: &G::V,
    grouping: &TokenGrouping,
    w: &AttentionWeights<G::V>,
) -> Result<G::V> {
    let (n, d) = g.value(x).dims2()?;
    if n != grouping.n_tokens() {
        return Err(shape_err!(
            "{n} tokens against a grouping of {}",
            grouping.n_tokens()
        ));
    }
    let (n_sub, gs) = (grouping.n_sub, grouping.g_s);
    let q = g.matmul(x, &w.w_q)?;
    let k = g.matmul(x, &w.w_k)?;
    let v = g.matmul(x, &w.w_v)?;

    let q = g.gather_rows(&q, &grouping.perm)?;
    let q = g.reshape(&q, &[n_sub, gs, d])?;
    let kv_slots: Vec<usize> = (0..n_sub).flat_map(|j| neighbor_slots(grouping, j)).collect();
    let kv_tokens: Vec<usize> = kv_slots.iter().map(|&s| grouping.perm[s]).collect();
    let k = g.gather_rows(&k, &kv_tokens)?;
    let k = g.reshape(&k, &[n_sub, 2 * gs, d])?;
    let v = g.gather_rows(&v, &kv_tokens)?;
    let v = g.reshape(&v, &[n_sub, 2 * gs, d])?;

    let mask = if grouping.pad_mask.iter().any(|&p| p) {
        Some(
            kv_slots
                .chunks(2 * gs)
                .flat_map(|keys| (0..gs).flat_map(move |_| keys.iter().map(|&s| grouping.pad_mask[s])))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let o = attend(g, &q, &k, &v, w.heads, mask.as_deref())?;
    let o = g.reshape(&o, &[n_sub * gs, d])?;
    let o = g.gather_rows(&o, &grouping.inv_perm)?;
    g.matmul(&o, &w.w_out)
}

pub fn iasa(x: &Tensor, grouping: &TokenGrouping, w: &AttentionWeights) -> Result<Tensor> {
    let mut g = Eager;
    let w = bind(&mut g, w);
    iasa_on(&mut g, x, grouping, &w)
}

/// Cross-attention from `[N, d]` tokens to `[M, d]` centers.
///
/// Centers enter as constants, so no gradient reaches them. Each query is
/// independent of the others, so the subgroup layout need not be
/// materialised: attending in token order gives the pushed-back result
/// directly.
pub fn irca_on<G: Graph>(g: &mut G, x: &G::V, centers: &Tensor, w: &AttentionWeights<G::V>) -> Result<G::V> {
    let (n, d) = g.value(x).dims2()?;
    let (m, dc) = centers.dims2()?;
    if d != dc {
        return Err(shape_err!("token width {d} against center width {dc}"));
    }
    let c = g.constant(centers.clone());
    let q = g.matmul(x, &w.w_q)?;
    let q = g.reshape(&q, &[1, n, d])?;
    let k = g.matmul(&c, &w.w_k)?;
    let k = g.reshape(&k, &[1, m, d])?;
    let v = g.matmul(&c, &w.w_v)?;
    let v = g.reshape(&v, &[1, m, d])?;
    let o = attend(g, &q, &k, &v, w.heads, None)?;
    let o = g.reshape(&o, &[n, d])?;
    g.matmul(&o, &w.w_out)
}

pub fn irca(x: &Tensor, centers: &TokenCenters, w: &AttentionWeights) -> Result<Tensor> {
    let c = centers.require()?;
    let mut g = Eager;
    let w = bind(&mut g, w);
    irca_on(&mut g, x, c, &w)
}

/// One query tile of local attention with its expanded key window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Non-overlapping `patch × patch` query tiles of an `h × w` grid, each with
/// keys from the tile grown by `overlap` pixels and clipped to the grid.
/// Indices are row-major token ids.
pub fn lrsa_tiles(h: usize, w: usize, patch: usize, overlap: usize) -> Result<Vec<Tile>> {
    if patch == 0 {
        return Err(Error::Usage("patch size must be positive".into()));
    }
    let span = |lo: usize, hi: usize, r: std::ops::Range<usize>| -> Vec<usize> {
        r.flat_map(|y| (lo..hi).map(move |x| (y, x)))
            .map(|(y, x)| y * w + x)
            .collect()
    };
    let mut tiles = Vec::new();
    for y0 in (0..h).step_by(patch) {
        let y1 = (y0 + patch).min(h);
        for x0 in (0..w).step_by(patch) {
            let x1 = (x0 + patch).min(w);
            let (ky0, ky1) = (y0.saturating_sub(overlap), (y1 + overlap).min(h));
            let (kx0, kx1) = (x0.saturating_sub(overlap), (x1 + overlap).min(w));
            tiles.push(Tile {
                queries: span(x0, x1, y0..y1),
                keys: span(kx0, kx1, ky0..ky1),
            });
        }
    }
    Ok(tiles)
}

/// Local attention over a `[d, h, w]` map with overlapping key windows.
/// Tiles of equal size are batched together.
pub fn lrsa_on<G: Graph>(
    g: &mut G,
    x: &G::V,
    w: &AttentionWeights<G::V>,
    patch: usize,
    overlap: usize,
) -> Result<G::V> {
    let (d, h, wd) = g.value(x).dims3()?;
    let tiles = lrsa_tiles(h, wd, patch, overlap)?;
    let t = g.to_tokens(x)?;
    let q = g.matmul(&t, &w.w_q)?;
    let k = g.matmul(&t, &w.w_k)?;
    let v = g.matmul(&t, &w.w_v)?;

    let mut by_shape: BTreeMap<(usize, usize), Vec<&Tile>> = BTreeMap::new();
    for tile in &tiles {
        by_shape
            .entry((tile.queries.len(), tile.keys.len()))
            .or_default()
            .push(tile);
    }
    let mut order = Vec::with_capacity(h * wd);
    let mut parts = Vec::with_capacity(by_shape.len());
    for ((lq, lk), batch) in &by_shape {
        let nb = batch.len();
        let qi: Vec<usize> = batch.iter().flat_map(|t| t.queries.iter().copied()).collect();
        let ki: Vec<usize> = batch.iter().flat_map(|t| t.keys.iter().copied()).collect();
        let qb = g.gather_rows(&q, &qi)?;
        let qb = g.reshape(&qb, &[nb, *lq, d])?;
        let kb = g.gather_rows(&k, &ki)?;
        let kb = g.reshape(&kb, &[nb, *lk, d])?;
        let vb = g.gather_rows(&v, &ki)?;
        let vb = g.reshape(&vb, &[nb, *lk, d])?;
        let o = attend(g, &qb, &kb, &vb, w.heads, None)?;
        parts.push(g.reshape(&o, &[nb * lq, d])?);
        order.extend(qi);
    }
    let o = if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        g.concat_rows(&parts)?
    };
    let mut inv = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inv[tok] = pos;
    }
    let o = g.gather_rows(&o, &inv)?;
    let o = g.matmul(&o, &w.w_out)?;
    g.to_map(&o, h, wd)
}

pub fn lrsa(x: &Tensor, w: &AttentionWeights, patch: usize, overlap: usize) -> Result<Tensor> {
    let mut g = Eager;
    let w = bind(&mut g, w);
    lrsa_on(&mut g, x, &w, patch, overlap)
}
