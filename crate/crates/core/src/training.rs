//! Small-scale optimization: L1 loss, Adam with cosine decay, random patch
//! sampling, and the training loop that also drives the center EMA.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{l1_value, Graph, Tape};
use crate::data::{crop_to_multiple, degrade_bicubic};
use crate::error::{Error, Result};
use crate::network::{forward_on, CenterMode, GroupingTrace, Model};
use crate::params::{bind, flatten, rebuild};
use crate::tensor::Tensor;

/// Mean absolute error, accumulated in f64.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    l1_value(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step count and the two moment estimates of every
/// parameter, in parameter-id order.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainState {
    pub fn new(params: &[Tensor], seed: u64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            seed,
            adam: AdamConfig::default(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &BTreeMap<usize, Tensor>,
    state: &mut TrainState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.get(&i);
        if let Some(g) = g {
            p.expect_same_shape(g)?;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k] as f64);
            let mk = beta1 * m[k] as f64 + (1.0 - beta1) * gk;
            let vk = beta2 * v[k] as f64 + (1.0 - beta2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let upd = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            *w = (*w as f64 - upd) as f32;
        }
    }
    Ok(())
}

/// Learning rate after `step` of `total` steps, decaying from `base` to zero
/// along half a cosine.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `batch` random HR crops of `patch × patch` and their bicubic LR versions.
/// Images smaller than the patch are skipped with a warning.
pub fn sample_patches(
    hr_set: &[Tensor],
    patch: usize,
    scale: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if patch == 0 || scale == 0 || !patch.is_multiple_of(scale) {
        return Err(Error::Usage(format!(
            "patch {patch} must be a positive multiple of scale {scale}"
        )));
    }
    let usable: Vec<&Tensor> = hr_set
        .iter()
        .filter(|t| {
            let ok = t.rank() == 3 && t.shape()[1] >= patch && t.shape()[2] >= patch;
            if !ok {
                warn!(
                    "skipping image of shape {:?}: smaller than patch {patch}",
                    t.shape()
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Usage(format!(
            "no training image is at least {patch}x{patch}"
        )));
    }
    let mut lr = Vec::with_capacity(batch);
    let mut hr = Vec::with_capacity(batch);
    for _ in 0..batch {
        let img = usable[rng.gen_range(0..usable.len())];
        let (_, h, w) = img.dims3()?;
        let y = rng.gen_range(0..=h - patch);
        let x = rng.gen_range(0..=w - patch);
        let crop = crop_window(img, y, x, patch, patch)?;
        lr.push(degrade_bicubic(&crop, scale)?);
        hr.push(crop);
    }
    Ok((lr, hr))
}

/// `[c, ph, pw]` window of `img` with top-left corner `(y, x)`.
pub fn crop_window(img: &Tensor, y: usize, x: usize, ph: usize, pw: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if y + ph > h || x + pw > w {
        return Err(Error::Usage(format!(
            "window {ph}x{pw} at ({y}, {x}) exceeds {h}x{w}"
        )));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in y..y + ph {
            let s = (ch * h + r) * w + x;
            out.extend_from_slice(&d[s..s + pw]);
        }
    }
    Tensor::new(&[c, ph, pw], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// HR patch side; must be a multiple of the model scale.
    pub patch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 5e-4,
            batch: 4,
            patch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One optimization step on a prepared batch. Returns the batch loss.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    lr_batch: &[Tensor],
    hr_batch: &[Tensor],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, &model.weights);
    let inputs: Vec<_> = lr_batch.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = forward_on(
        &mut tape,
        &w,
        &model.config,
        CenterMode::Train(&mut model.centers),
        &inputs,
        &mut GroupingTrace::default(),
    )?;
    let mut total = None;
    for (o, hr) in outs.iter().zip(hr_batch) {
        let t = tape.constant(hr.clone());
        let l = tape.l1_loss(o, &t)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(&acc, &l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    let loss = tape.scale(&total, 1.0 / outs.len() as f32);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became {value} at step {}",
            state.step + 1
        )));
    }
    let grads = tape.backward(loss)?;
    let mut params: Vec<Tensor> = flatten(&model.weights).into_iter().map(|(_, t)| t).collect();
    adam_step(&mut params, grads.params(), state, lr)?;
    model.weights = rebuild(&model.weights, params)?;
    Ok(value)
}

/// Runs `opts.steps` steps of patch sampling, training-mode forward, L1
/// loss, backward and Adam. Centers move only through their EMA inside the
/// forward passes.
pub fn train_loop(model: &mut Model, dataset: &[Tensor], opts: &TrainOptions) -> Result<Vec<LossRecord>> {
    let scale = model.config.scale;
    let dataset: Vec<Tensor> = dataset
        .iter()
        .map(|t| crop_to_multiple(t, scale))
        .collect::<Result<_>>()?;
    let params: Vec<Tensor> = flatten(&model.weights).into_iter().map(|(_, t)| t).collect();
    let mut state = TrainState::new(&params, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let lr = cosine_lr(opts.lr, step, opts.steps);
        let (lr_b, hr_b) = sample_patches(&dataset, opts.patch, scale, opts.batch, &mut rng)?;
        let loss = train_step(model, &mut state, &lr_b, &hr_b, lr)?;
        if step % 50 == 0 || step + 1 == opts.steps {
            info!("step {step}: loss {loss:.6} lr {lr:.3e}");
        }
        trace.push(LossRecord { step, loss, lr });
    }
    Ok(trace)
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    s
}

pub fn write_loss_csv(trace: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(trace)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
