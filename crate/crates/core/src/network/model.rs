use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::{iasa_on, irca_on, lrsa_on, AttentionWeights};
use crate::autograd::{Eager, Graph};
use crate::error::{shape_err, Error, Result};
use crate::params::{
    bind, count, fan_in_uniform, join, ConvWeights, LayerNormWeights, LinearWeights, ParamTree,
};
use crate::tensor::{to_map, Tensor};
use crate::token_agg::{
    build_grouping, initial_centers, nearest_centers, refine_centers, TokenCenters, TokenGrouping,
};

/// Layer norm, pointwise expansion, depthwise 3×3, GELU, pointwise
/// projection and a residual.
#[derive(Clone, Debug)]
pub struct FfnWeights<T = Tensor> {
    pub norm: LayerNormWeights<T>,
    pub expand: LinearWeights<T>,
    pub depthwise: ConvWeights<T>,
    pub project: LinearWeights<T>,
}

impl FfnWeights {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNormWeights::new(d),
            expand: LinearWeights::init(d, hidden, rng),
            depthwise: ConvWeights::init(hidden, hidden, 3, hidden, rng),
            project: LinearWeights::init(hidden, d, rng),
        }
    }
}

impl<T> ParamTree for FfnWeights<T> {
    type Elem = T;
    type Mapped<U> = FfnWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FfnWeights<U> {
        FfnWeights {
            norm: self.norm.map_named(&join(p, "norm"), f),
            expand: self.expand.map_named(&join(p, "expand"), f),
            depthwise: self.depthwise.map_named(&join(p, "depthwise"), f),
            project: self.project.map_named(&join(p, "project"), f),
        }
    }
}

/// Token aggregation block: grouped self-attention and center
/// cross-attention fused by a pointwise projection, then a feed-forward.
#[derive(Clone, Debug)]
pub struct TabWeights<T = Tensor> {
    pub norm: LayerNormWeights<T>,
    pub iasa: AttentionWeights<T>,
    pub irca: AttentionWeights<T>,
    /// `[d, d]` fusion of the two attention outputs, no bias.
    pub fuse: T,
    pub ffn: FfnWeights<T>,
}

impl<T> ParamTree for TabWeights<T> {
    type Elem = T;
    type Mapped<U> = TabWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> TabWeights<U> {
        TabWeights {
            norm: self.norm.map_named(&join(p, "norm"), f),
            iasa: self.iasa.map_named(&join(p, "iasa"), f),
            irca: self.irca.map_named(&join(p, "irca"), f),
            fuse: f(&join(p, "fuse"), &self.fuse),
            ffn: self.ffn.map_named(&join(p, "ffn"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LrsaWeights<T = Tensor> {
    pub norm: LayerNormWeights<T>,
    pub attn: AttentionWeights<T>,
    pub ffn: FfnWeights<T>,
}

impl<T> ParamTree for LrsaWeights<T> {
    type Elem = T;
    type Mapped<U> = LrsaWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LrsaWeights<U> {
        LrsaWeights {
            norm: self.norm.map_named(&join(p, "norm"), f),
            attn: self.attn.map_named(&join(p, "attn"), f),
            ffn: self.ffn.map_named(&join(p, "ffn"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupWeights<T = Tensor> {
    pub tab: TabWeights<T>,
    pub lrsa: LrsaWeights<T>,
    pub tail: ConvWeights<T>,
}

impl GroupWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, hid) = (cfg.dim, cfg.hidden());
        Ok(Self {
            tab: TabWeights {
                norm: LayerNormWeights::new(d),
                iasa: AttentionWeights::init(d, cfg.heads, rng)?,
                irca: AttentionWeights::init(d, cfg.heads, rng)?,
                fuse: fan_in_uniform(&[d, d], d, rng),
                ffn: FfnWeights::init(d, hid, rng),
            },
            lrsa: LrsaWeights {
                norm: LayerNormWeights::new(d),
                attn: AttentionWeights::init(d, cfg.heads, rng)?,
                ffn: FfnWeights::init(d, hid, rng),
            },
            tail: ConvWeights::init(d, d, 3, 1, rng),
        })
    }
}

impl<T> ParamTree for GroupWeights<T> {
    type Elem = T;
    type Mapped<U> = GroupWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GroupWeights<U> {
        GroupWeights {
            tab: self.tab.map_named(&join(p, "tab"), f),
            lrsa: self.lrsa.map_named(&join(p, "lrsa"), f),
            tail: self.tail.map_named(&join(p, "tail"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelWeights<T = Tensor> {
    pub shallow: ConvWeights<T>,
    pub groups: Vec<GroupWeights<T>>,
    pub recon: ConvWeights<T>,
}

impl<T> ParamTree for ModelWeights<T> {
    type Elem = T;
    type Mapped<U> = ModelWeights<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelWeights<U> {
        ModelWeights {
            shallow: self.shallow.map_named(&join(p, "shallow"), f),
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(i, g)| g.map_named(&join(p, &format!("groups.{i}")), f))
                .collect(),
            recon: self.recon.map_named(&join(p, "recon"), f),
        }
    }
}

/// Where each aggregation block gets its centers during a forward pass.
pub enum CenterMode<'a> {
    /// Refine on the batch, update by EMA, then group with the new centers.
    /// Uninitialized buffers are first seeded from the batch.
    Train(&'a mut [TokenCenters]),
    /// Group with stored centers, never modifying them. An uninitialized
    /// buffer is replaced, for this call only, by centers pooled from each
    /// input image.
    Infer(&'a [TokenCenters]),
    /// Replay the centers and groupings of an earlier pass.
    Frozen(&'a GroupingTrace),
}

/// Centers and groupings used by every block of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct GroupingTrace {
    /// `centers[rg][image]`.
    pub centers: Vec<Vec<Tensor>>,
    /// `groupings[rg][image]`.
    pub groupings: Vec<Vec<TokenGrouping>>,
}

/// The full network with its learned weights and center buffers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub centers: Vec<TokenCenters>,
}

impl Model {
    /// Weights uniform in `±1/√fan_in`, norms at identity, centers unset.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let r2 = config.scale * config.scale;
        let weights = ModelWeights {
            shallow: ConvWeights::init(3, d, 3, 1, &mut rng),
            groups: (0..config.groups)
                .map(|_| GroupWeights::init(&config, &mut rng))
                .collect::<Result<_>>()?,
            recon: ConvWeights::init(d, 3 * r2, 3, 1, &mut rng),
        };
        let centers = (0..config.groups)
            .map(|_| TokenCenters::new(config.centers, d, config.decay))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            weights,
            centers,
        })
    }

    /// Zeroes the reconstruction convolution, reducing the output to the
    /// bicubic upsample of the input.
    pub fn zero_reconstruction(&mut self) {
        self.weights.recon = self.weights.recon.zeroed();
    }

    pub fn param_count(&self) -> usize {
        count(&self.weights)
    }

    /// Scalars held by center buffers.
    pub fn buffer_count(&self) -> usize {
        self.centers.iter().map(|c| c.centers().numel()).sum()
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn forward_batch(&self, imgs: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.infer_traced(imgs)?.0)
    }

    /// Inference outputs together with the groupings each block used.
    pub fn infer_traced(&self, imgs: &[Tensor]) -> Result<(Vec<Tensor>, GroupingTrace)> {
        let mut g = Eager;
        let w = bind(&mut g, &self.weights);
        let mut trace = GroupingTrace::default();
        let out = forward_on(
            &mut g,
            &w,
            &self.config,
            CenterMode::Infer(&self.centers),
            imgs,
            &mut trace,
        )?;
        Ok((out, trace))
    }

    /// A training-mode forward without gradients: centers are refined and
    /// updated exactly as in an optimization step.
    pub fn forward_train(&mut self, imgs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Eager;
        let w = bind(&mut g, &self.weights);
        forward_on(
            &mut g,
            &w,
            &self.config,
            CenterMode::Train(&mut self.centers),
            imgs,
            &mut GroupingTrace::default(),
        )
    }

    pub fn shallow_extract(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Eager;
        let w = bind(&mut g, &self.weights.shallow);
        shallow_on(&mut g, &w, img)
    }
}

pub fn shallow_on<G: Graph>(g: &mut G, w: &ConvWeights<G::V>, img: &G::V) -> Result<G::V> {
    let (c, _, _) = g.value(img).dims3()?;
    if c != 3 {
        return Err(shape_err!("expected a 3-channel image, got {c} channels"));
    }
    w.apply(g, img)
}

/// Feed-forward on `[N, d]` tokens laid out on an `h × w` grid.
pub fn conv_ffn_on<G: Graph>(g: &mut G, w: &FfnWeights<G::V>, x: &G::V, h: usize, wd: usize) -> Result<G::V> {
    let u = w.norm.apply(g, x)?;
    let u = w.expand.apply(g, &u)?;
    let u = g.to_map(&u, h, wd)?;
    let u = w.depthwise.apply(g, &u)?;
    let u = g.gelu(&u);
    let u = g.to_tokens(&u)?;
    let u = w.project.apply(g, &u)?;
    g.add(x, &u)
}

/// Tensor form of [`conv_ffn_on`] over a `[d, h, w]` map.
pub fn conv_ffn(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    let (_, h, wd) = x.dims3()?;
    let mut g = Eager;
    let w = bind(&mut g, w);
    let t = g.to_tokens(x)?;
    let y = conv_ffn_on(&mut g, &w, &t, h, wd)?;
    g.to_map(&y, h, wd)
}

/// The attention half of the aggregation block applied to normalized
/// tokens `ln`, with the residual taken from `x`.
pub fn tab_mix_on<G: Graph>(
    g: &mut G,
    w: &TabWeights<G::V>,
    x: &G::V,
    ln: &G::V,
    grouping: &TokenGrouping,
    centers: &Tensor,
) -> Result<G::V> {
    let a = iasa_on(g, ln, grouping, &w.iasa)?;
    let b = irca_on(g, ln, centers, &w.irca)?;
    let s = g.add(&a, &b)?;
    let o = g.matmul(&s, &w.fuse)?;
    g.add(x, &o)
}

/// Local attention block on `[N, d]` tokens over an `h × w` grid.
pub fn lrsa_block_on<G: Graph>(
    g: &mut G,
    w: &LrsaWeights<G::V>,
    cfg: &ModelConfig,
    x: &G::V,
    h: usize,
    wd: usize,
) -> Result<G::V> {
    let ln = w.norm.apply(g, x)?;
    let m = g.to_map(&ln, h, wd)?;
    let a = lrsa_on(g, &m, &w.attn, cfg.patch, cfg.overlap)?;
    let a = g.to_tokens(&a)?;
    let y = g.add(x, &a)?;
    conv_ffn_on(g, &w.ffn, &y, h, wd)
}

/// Chooses centers and groupings for one block across the batch.
fn aggregate(
    cfg: &ModelConfig,
    rg: usize,
    ln: &[Tensor],
    dims: &[(usize, usize)],
    mode: &mut CenterMode<'_>,
) -> Result<(Vec<Tensor>, Vec<TokenGrouping>)> {
    let group = |x: &Tensor, c: &Tensor| build_grouping(&nearest_centers(x, c)?, cfg.group_size);
    let maps =
        || -> Result<Vec<Tensor>> { ln.iter().zip(dims).map(|(t, &(h, w))| to_map(t, h, w)).collect() };
    for t in ln {
        if cfg.centers > t.shape()[0] {
            warn!(
                "{} centers exceed the {} tokens of an image",
                cfg.centers,
                t.shape()[0]
            );
        }
    }
    match mode {
        CenterMode::Train(buffers) => {
            let buf = buffers
                .get_mut(rg)
                .ok_or_else(|| Error::State(format!("no center buffer for group {rg}")))?;
            if !buf.is_initialized() {
                let maps = maps()?;
                buf.initialize(initial_centers(&maps.iter().collect::<Vec<_>>(), cfg.centers)?)?;
            }
            let all = Tensor::concat_rows(&ln.iter().collect::<Vec<_>>())?;
            let refined = refine_centers(&all, buf.centers(), cfg.refine_iters)?;
            buf.ema_update(&refined)?;
            let c = buf.centers().clone();
            let gr = ln.iter().map(|t| group(t, &c)).collect::<Result<_>>()?;
            Ok((vec![c; ln.len()], gr))
        }
        CenterMode::Infer(buffers) => {
            let buf = buffers
                .get(rg)
                .ok_or_else(|| Error::State(format!("no center buffer for group {rg}")))?;
            let cs: Vec<Tensor> = if buf.is_initialized() {
                vec![buf.centers().clone(); ln.len()]
            } else {
                maps()?
                    .iter()
                    .map(|m| initial_centers(&[m], cfg.centers))
                    .collect::<Result<_>>()?
            };
            let gr = ln
                .iter()
                .zip(&cs)
                .map(|(t, c)| group(t, c))
                .collect::<Result<_>>()?;
            Ok((cs, gr))
        }
        CenterMode::Frozen(trace) => {
            let (cs, gr) = trace
                .centers
                .get(rg)
                .zip(trace.groupings.get(rg))
                .ok_or_else(|| Error::State(format!("trace has no entry for group {rg}")))?;
            if cs.len() != ln.len() || gr.len() != ln.len() {
                return Err(Error::State("trace was recorded for another batch".into()));
            }
            Ok((cs.clone(), gr.clone()))
        }
    }
}

/// Residual group over a batch of `[N, d]` token tensors:
/// `x + tail(lrsa_block(tab_block(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn residual_group_on<G: Graph>(
    g: &mut G,
    w: &GroupWeights<G::V>,
    cfg: &ModelConfig,
    rg: usize,
    xs: &[G::V],
    dims: &[(usize, usize)],
    mode: &mut CenterMode<'_>,
    trace: &mut GroupingTrace,
) -> Result<Vec<G::V>> {
    let lns = xs
        .iter()
        .map(|x| w.tab.norm.apply(g, x))
        .collect::<Result<Vec<_>>>()?;
    let ln_vals: Vec<Tensor> = lns.iter().map(|v| g.value(v).clone()).collect();
    let (centers, groupings) = aggregate(cfg, rg, &ln_vals, dims, mode)?;

    let mut out = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let (h, wd) = dims[i];
        let y = tab_mix_on(g, &w.tab, x, &lns[i], &groupings[i], &centers[i])?;
        let y = conv_ffn_on(g, &w.tab.ffn, &y, h, wd)?;
        let y = lrsa_block_on(g, &w.lrsa, cfg, &y, h, wd)?;
        let y = g.to_map(&y, h, wd)?;
        let y = w.tail.apply(g, &y)?;
        let y = g.to_tokens(&y)?;
        out.push(g.add(x, &y)?);
    }
    trace.centers.push(centers);
    trace.groupings.push(groupings);
    Ok(out)
}

/// Full network on a batch of `[3, h, w]` images in `[0, 1]`.
pub fn forward_on<G: Graph>(
    g: &mut G,
    w: &ModelWeights<G::V>,
    cfg: &ModelConfig,
    mut mode: CenterMode<'_>,
    imgs: &[G::V],
    trace: &mut GroupingTrace,
) -> Result<Vec<G::V>> {
    if imgs.is_empty() {
        return Err(Error::Usage("forward needs at least one image".into()));
    }
    let r = cfg.scale;
    let mut dims = Vec::with_capacity(imgs.len());
    let mut x0 = Vec::with_capacity(imgs.len());
    for img in imgs {
        let f = shallow_on(g, &w.shallow, img)?;
        let (_, h, wd) = g.value(&f).dims3()?;
        dims.push((h, wd));
        x0.push(g.to_tokens(&f)?);
    }
    let mut xs = x0.clone();
    for (rg, gw) in w.groups.iter().enumerate() {
        xs = residual_group_on(g, gw, cfg, rg, &xs, &dims, &mut mode, trace)?;
    }
    let mut out = Vec::with_capacity(imgs.len());
    for (i, img) in imgs.iter().enumerate() {
        let (h, wd) = dims[i];
        let deep = g.add(&xs[i], &x0[i])?;
        let deep = g.to_map(&deep, h, wd)?;
        let y = w.recon.apply(g, &deep)?;
        let y = g.pixel_shuffle(&y, r)?;
        let up = g.bicubic(img, h * r, wd * r)?;
        out.push(g.add(&y, &up)?);
    }
    Ok(out)
}

/// One aggregation block on a `[d, h, w]` map with its own center buffer.
/// With `training` set the buffer is refined and EMA-updated first.
pub fn tab_forward(
    x: &Tensor,
    centers: &mut TokenCenters,
    w: &TabWeights,
    cfg: &ModelConfig,
    training: bool,
) -> Result<Tensor> {
    let (_, h, wd) = x.dims3()?;
    let mut g = Eager;
    let w = bind(&mut g, w);
    let t = g.to_tokens(x)?;
    let ln = w.norm.apply(&mut g, &t)?;
    let buf = std::slice::from_mut(centers);
    let mut mode = if training {
        CenterMode::Train(buf)
    } else {
        CenterMode::Infer(buf)
    };
    let (cs, gr) = aggregate(cfg, 0, std::slice::from_ref(&ln), &[(h, wd)], &mut mode)?;
    let y = tab_mix_on(&mut g, &w, &t, &ln, &gr[0], &cs[0])?;
    let y = conv_ffn_on(&mut g, &w.ffn, &y, h, wd)?;
    g.to_map(&y, h, wd)
}

/// One residual group on a `[d, h, w]` map.
pub fn residual_group(
    x: &Tensor,
    centers: &mut TokenCenters,
    w: &GroupWeights,
    cfg: &ModelConfig,
    training: bool,
) -> Result<Tensor> {
    let (_, h, wd) = x.dims3()?;
    let mut g = Eager;
    let w = bind(&mut g, w);
    let t = g.to_tokens(x)?;
    let buf = std::slice::from_mut(centers);
    let mut mode = if training {
        CenterMode::Train(buf)
    } else {
        CenterMode::Infer(buf)
    };
    let y = residual_group_on(
        &mut g,
        &w,
        cfg,
        0,
        &[t],
        &[(h, wd)],
        &mut mode,
        &mut GroupingTrace::default(),
    )?;
    g.to_map(&y[0], h, wd)
}
