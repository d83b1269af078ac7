//! Content-aware token aggregation: grouping tokens by their most similar
//! center, refining centers, and the fixed-size subgroup layout used by
//! grouped attention.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{adaptive_avg_pool2d, to_tokens, Tensor};

/// Added to the norm product of every cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// A learned set of `M` center vectors of width `d`, updated only by
/// exponential moving average.
#[derive(Clone, Debug)]
pub struct TokenCenters {
    centers: Tensor,
    initialized: bool,
    decay: f64,
}

impl TokenCenters {
    /// Uninitialized buffer of `m` zero centers.
    pub fn new(m: usize, d: usize, decay: f64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Usage("token centers need m >= 1 and d >= 1".into()));
        }
        check_decay(decay)?;
        Ok(Self {
            centers: Tensor::zeros(&[m, d]),
            initialized: false,
            decay,
        })
    }

    pub fn from_tensor(centers: Tensor, decay: f64) -> Result<Self> {
        centers.dims2()?;
        centers.ensure_finite("token centers")?;
        check_decay(decay)?;
        Ok(Self {
            centers,
            initialized: true,
            decay,
        })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    /// The centers, or a state error when they were never set.
    pub fn require(&self) -> Result<&Tensor> {
        if self.initialized {
            Ok(&self.centers)
        } else {
            Err(Error::State("token centers are not initialized".into()))
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn m(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn initialize(&mut self, centers: Tensor) -> Result<()> {
        self.centers.expect_same_shape(&centers)?;
        centers.ensure_finite("token centers")?;
        self.centers = centers;
        self.initialized = true;
        Ok(())
    }

    /// Moves every center toward its refined value with the stored decay.
    pub fn ema_update(&mut self, refined: &Tensor) -> Result<()> {
        let c = self.require()?;
        self.centers = ema_update(c, refined, self.decay)?;
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("decay must lie in (0, 1), got {decay}")))
    }
}

/// `λ·c + (1 − λ)·c′` per element, evaluated in f64.
pub fn ema_update(c: &Tensor, refined: &Tensor, decay: f64) -> Result<Tensor> {
    c.zip_map(refined, |a, b| {
        let (a, b) = (a as f64, b as f64);
        (decay * a + (1.0 - decay) * b) as f32
    })
}

/// `D[i, j] = <x_i, c_j> / (|x_i| |c_j| + 1e-8)`.
pub fn cosine_similarity_matrix(x: &Tensor, c: &Tensor) -> Result<Tensor> {
    let m = c.dims2()?.0;
    let n = x.dims2()?.0;
    let d = cosine_f64(x, c)?;
    Tensor::new(&[n, m], d.into_iter().map(|v| v as f32).collect())
}

fn cosine_f64(x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = (x.dims2()?.0, c.dims2()?.0);
    if x.last_dim() != c.last_dim() {
        return Err(shape_err!(
            "token width {} does not match center width {}",
            x.last_dim(),
            c.last_dim()
        ));
    }
    let cn: Vec<f64> = (0..m).map(|j| norm(c.row(j))).collect();
    let mut out = vec![0.0f64; n * m];
    if m == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        let xn = norm(xi);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(xi, c.row(j)) / (xn * cn[j] + COSINE_EPS);
        }
    });
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn argmax_rows<T: PartialOrd>(d: &[T], n: usize, m: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &d[i * m..(i + 1) * m];
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise argmax; ties go to the lowest column.
pub fn assign_groups(d: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = d.dims2()?;
    Ok(argmax_rows(d.data(), n, m))
}

/// Labels of `x` against centers `c` by cosine similarity. The argmax is
/// taken before rounding the similarities to f32.
pub fn nearest_centers(x: &Tensor, c: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = (x.dims2()?.0, c.dims2()?.0);
    Ok(argmax_rows(&cosine_f64(x, c)?, n, m))
}

/// `t` rounds of assignment followed by replacing each center with the mean
/// of its tokens. Centers whose group is empty stay put.
pub fn refine_centers(x: &Tensor, c: &Tensor, t: usize) -> Result<Tensor> {
    let (m, d) = c.dims2()?;
    let mut c = c.clone();
    for _ in 0..t {
        let labels = nearest_centers(x, &c)?;
        let mut acc = vec![0.0f64; m * d];
        let mut count = vec![0usize; m];
        for (i, &l) in labels.iter().enumerate() {
            count[l] += 1;
            for (a, &v) in acc[l * d..(l + 1) * d].iter_mut().zip(x.row(i)) {
                *a += v as f64;
            }
        }
        let data = c.data_mut();
        for j in (0..m).filter(|&j| count[j] > 0) {
            for k in 0..d {
                data[j * d + k] = (acc[j * d + k] / count[j] as f64) as f32;
            }
        }
    }
    Ok(c)
}

/// Initial centers from regular regions of one or more `[d, h, w]` feature
/// maps, averaged across maps.
///
/// The `M` regions form a `gh × gw` grid where `gh` is the largest divisor of
/// `M` not exceeding `√M`; the longer grid side follows the longer image
/// side. An all-zero center is replaced by a basis vector so that cosine
/// similarity stays meaningful.
pub fn initial_centers(maps: &[&Tensor], m: usize) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("center initialization needs at least one map".into()))?;
    let d = first.dims3()?.0;
    let (short, long) = grid_factors(m);
    let mut acc = vec![0.0f64; m * d];
    for map in maps {
        let (c, h, w) = map.dims3()?;
        if c != d {
            return Err(shape_err!("feature maps of width {c} and {d} mixed"));
        }
        let (gh, gw) = if h > w { (long, short) } else { (short, long) };
        let pooled = to_tokens(&adaptive_avg_pool2d(map, gh, gw)?)?;
        for (a, &v) in acc.iter_mut().zip(pooled.data()) {
            *a += v as f64;
        }
    }
    let mut out: Vec<f32> = acc.iter().map(|&a| (a / maps.len() as f64) as f32).collect();
    for (j, row) in out.chunks_mut(d).enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            row[j % d] = 1.0;
        }
    }
    Tensor::new(&[m, d], out)
}

fn grid_factors(m: usize) -> (usize, usize) {
    let short = (1..=m)
        .take_while(|k| k * k <= m)
        .filter(|&k| m.is_multiple_of(k))
        .last()
        .unwrap_or(1);
    (short, m / short)
}

/// Token order and padding that split label-sorted tokens into equal
/// subgroups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrouping {
    /// Group id of every token.
    pub labels: Vec<usize>,
    /// Token index placed in each slot; pad slots repeat the last real token.
    pub perm: Vec<usize>,
    /// Slot holding each token.
    pub inv_perm: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub g_s: usize,
    pub n_sub: usize,
}

impl TokenGrouping {
    pub fn n_tokens(&self) -> usize {
        self.labels.len()
    }

    pub fn n_padded(&self) -> usize {
        self.perm.len()
    }

    /// Token indices of every group, in slot order.
    pub fn groups(&self, m: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); m];
        for (slot, &i) in self.perm.iter().enumerate() {
            if !self.pad_mask[slot] {
                out[self.labels[i]].push(i);
            }
        }
        out
    }
}

/// Stable sort of tokens by label, padded to a multiple of `g_s`.
pub fn build_grouping(labels: &[usize], g_s: usize) -> Result<TokenGrouping> {
    if g_s == 0 {
        return Err(Error::Usage("subgroup size must be at least 1".into()));
    }
    if labels.is_empty() {
        return Err(Error::Usage("cannot group zero tokens".into()));
    }
    let n = labels.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| labels[i]);
    let n_sub = n.div_ceil(g_s);
    let last = perm[n - 1];
    let mut pad_mask = vec![false; n];
    perm.resize(n_sub * g_s, last);
    pad_mask.resize(n_sub * g_s, true);
    let mut inv_perm = vec![0; n];
    for (slot, &i) in perm[..n].iter().enumerate() {
        inv_perm[i] = slot;
    }
    Ok(TokenGrouping {
        labels: labels.to_vec(),
        perm,
        inv_perm,
        pad_mask,
        g_s,
        n_sub,
    })
}

/// Labels of `x` against `centers`, laid out in subgroups of `g_s`.
pub fn group_tokens(x: &Tensor, centers: &Tensor, g_s: usize) -> Result<TokenGrouping> {
    build_grouping(&nearest_centers(x, centers)?, g_s)
}

fn check_tokens(x: &Tensor, g: &TokenGrouping) -> Result<usize> {
    let (n, d) = x.dims2()?;
    if n != g.n_tokens() {
        return Err(shape_err!("{n} tokens against a grouping of {}", g.n_tokens()));
    }
    Ok(d)
}

/// `[N, d]` tokens into `[n_sub, g_s, d]` subgroup order.
pub fn gather_subgroups(x: &Tensor, g: &TokenGrouping) -> Result<Tensor> {
    let d = check_tokens(x, g)?;
    x.gather_rows(&g.perm)?.into_reshape(&[g.n_sub, g.g_s, d])
}

/// Inverse of [`gather_subgroups`]; pad slots are dropped.
pub fn pushback(o: &Tensor, g: &TokenGrouping) -> Result<Tensor> {
    if o.rank() != 3 || o.shape()[0] != g.n_sub || o.shape()[1] != g.g_s {
        return Err(shape_err!(
            "subgroup tensor {:?} does not match {} x {}",
            o.shape(),
            g.n_sub,
            g.g_s
        ));
    }
    let d = o.shape()[2];
    o.reshape(&[g.n_padded(), d])?.gather_rows(&g.inv_perm)
}
