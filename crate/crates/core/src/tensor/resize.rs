//! Separable bicubic resampling (Keys kernel, a = -0.5).
//!
//! Sample centres follow the half-pixel convention. When shrinking, the
//! kernel is stretched by the inverse scale so it acts as a low-pass filter.
//! Taps falling outside the image read the nearest edge pixel, and each
//! output's weights are normalised to sum to one.

use super::Tensor;
use crate::error::{shape_err, Result};

const A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Precomputed taps for resampling one axis from `input` to `output` samples.
#[derive(Clone, Debug)]
pub struct ResampleAxis {
    pub input: usize,
    pub output: usize,
    taps: Vec<Vec<(usize, f32)>>,
}

impl ResampleAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let stretch = scale.max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..output)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale;
                let lo = (center - support + 0.5).floor() as i64;
                let hi = (center + support + 0.5).floor() as i64;
                let raw: Vec<(usize, f64)> = (lo..hi)
                    .map(|j| {
                        let w = cubic_kernel((j as f64 + 0.5 - center) / stretch);
                        (j.clamp(0, input as i64 - 1) as usize, w)
                    })
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                raw.into_iter().map(|(j, w)| (j, (w / total) as f32)).collect()
            })
            .collect();
        Self { input, output, taps }
    }

    pub fn taps(&self, i: usize) -> &[(usize, f32)] {
        &self.taps[i]
    }
}

/// Resizes `[c, h, w]` to `[c, out_h, out_w]`: horizontal pass, then vertical.
pub fn bicubic_resize_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize target {out_h}x{out_w} must be positive"));
    }
    let ax = ResampleAxis::new(w, out_w);
    let ay = ResampleAxis::new(h, out_h);
    let src = x.data();
    let mut tmp = vec![0.0f32; c * h * out_w];
    for row in 0..c * h {
        let s = &src[row * w..(row + 1) * w];
        for ox in 0..out_w {
            tmp[row * out_w + ox] = ax.taps(ox).iter().map(|&(j, wt)| wt * s[j]).sum();
        }
    }
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let dst = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for &(j, wt) in ay.taps(oy) {
                let s = &tmp[(ch * h + j) * out_w..(ch * h + j + 1) * out_w];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += wt * v;
                }
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Resizes by the rational factor `num / den`, rounding output sides to the
/// nearest integer.
pub fn bicubic_resize(x: &Tensor, num: usize, den: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if num == 0 || den == 0 {
        return Err(shape_err!("resize scale {num}/{den} must be positive"));
    }
    let side = |n: usize| ((n * num + den / 2) / den).max(1);
    bicubic_resize_to(x, side(h), side(w))
}

/// Adjoint of [`bicubic_resize_to`]: maps an output-space gradient back to
/// the `[c, h, w]` input grid.
pub(crate) fn bicubic_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.dims3()?;
    let ax = ResampleAxis::new(w, out_w);
    let ay = ResampleAxis::new(h, out_h);
    let g = grad.data();
    let mut tmp = vec![0.0f32; c * h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let s = &g[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for &(j, wt) in ay.taps(oy) {
                let d = &mut tmp[(ch * h + j) * out_w..(ch * h + j + 1) * out_w];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += wt * sv;
                }
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for row in 0..c * h {
        for ox in 0..out_w {
            let gv = tmp[row * out_w + ox];
            for &(j, wt) in ax.taps(ox) {
                out[row * w + j] += wt * gv;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
