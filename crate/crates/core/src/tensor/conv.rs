use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Dense 2-D cross-correlation of a `[c_in, h, w]` map with
/// `[c_out, c_in, k, k]` weights and zero padding `pad`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    conv2d_grouped(x, weight, bias, pad, 1)
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output columns `ox` whose input column `ox + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_geom(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let (c_in, h, w) = x.dims3()?;
    let [c_out, cin_g, k, k2] = weight.shape()[..] else {
        return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape()));
    };
    if k != k2 {
        return Err(shape_err!("conv kernel must be square, got {k}x{k2}"));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
        return Err(shape_err!(
            "conv channel mismatch: input {c_in}, weight {:?}, groups {groups}",
            weight.shape()
        ));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(shape_err!("conv bias of {} for {c_out} outputs", b.numel()));
        }
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err!("conv kernel {k} larger than padded input {h}x{w}"));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        pad,
        groups,
        oh: h + 2 * pad - k + 1,
        ow: w + 2 * pad - k + 1,
    })
}

/// Grouped cross-correlation; `groups == c_in` gives a depthwise convolution.
pub fn conv2d_grouped(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = conv_geom(x, weight, bias, pad, groups)?;
    let (xd, wd) = (x.data(), weight.data());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; g.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        if let Some(b) = bias {
            dst.fill(b.data()[co]);
        }
        let group = co / g.cout_per_group();
        for cig in 0..g.cin_per_group() {
            let ci = group * g.cin_per_group() + cig;
            let src = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wd[((co * g.cin_per_group() + cig) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.oh {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let srow = &src[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            drow[ox] += wv * srow[ox + kx - g.pad];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_grouped`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    pad: usize,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(x, weight, None, pad, groups)?;
    if grad.shape() != [g.c_out, g.oh, g.ow] {
        return Err(shape_err!("conv grad shape {:?}", grad.shape()));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let kk = g.k * g.k;

    let db: Vec<f32> = gd.chunks(plane).map(|p| p.iter().sum()).collect();

    let mut dw = vec![0.0f32; weight.numel()];
    dw.par_chunks_mut(g.cin_per_group() * kk)
        .enumerate()
        .for_each(|(co, dst)| {
            let group = co / g.cout_per_group();
            let gplane = &gd[co * plane..(co + 1) * plane];
            for cig in 0..g.cin_per_group() {
                let ci = group * g.cin_per_group() + cig;
                let src = &xd[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let (lo, hi) = g.valid_cols(kx);
                        let mut acc = 0.0f32;
                        for oy in 0..g.oh {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let srow = &src[(iy - g.pad) * g.w..];
                            let grow = &gplane[oy * g.ow..];
                            for ox in lo..hi {
                                acc += grow[ox] * srow[ox + kx - g.pad];
                            }
                        }
                        dst[cig * kk + ky * g.k + kx] = acc;
                    }
                }
            }
        });

    let mut dx = vec![0.0f32; x.numel()];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(ci, dst)| {
        let group = ci / g.cin_per_group();
        let cig = ci % g.cin_per_group();
        for cog in 0..g.cout_per_group() {
            let co = group * g.cout_per_group() + cog;
            let gplane = &gd[co * plane..(co + 1) * plane];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wd[((co * g.cin_per_group() + cig) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.oh {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let drow = &mut dst[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            drow[ox + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });

    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.c_out], db)?,
    ))
}

/// Rearranges `[c*r*r, h, w]` into `[c, h*r, w*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr, h, w) = x.dims3()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(shape_err!("{cr} channels not divisible by r^2 = {}", r * r));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let ic = ch * r * r + (y % r) * r + xx % r;
                out[(ch * oh + y) * ow + xx] = src[(ic * h + y / r) * w + xx / r];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.dims3()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(shape_err!("{oh}x{ow} not divisible by {r}"));
    }
    let (h, w) = (oh / r, ow / r);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let ic = ch * r * r + (y % r) * r + xx % r;
                out[(ic * h + y / r) * w + xx / r] = src[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(&[c * r * r, h, w], out)
}

/// Mean over non-overlapping `window x window` cells. Maps whose sides are
/// not multiples of `window` are first padded by replicating the last
/// row/column.
pub fn avg_pool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if window == 0 {
        return Err(shape_err!("pool window must be positive"));
    }
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let src = x.data();
    let inv = 1.0 / (window * window) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..window {
                    let y = (oy * window + dy).min(h - 1);
                    for dx in 0..window {
                        let xx = (ox * window + dx).min(w - 1);
                        acc += src[(ch * h + y) * w + xx] as f64;
                    }
                }
                out.push((acc * inv) as f32);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Mean over a `grid_h x grid_w` grid of regular regions. Region `i` along an
/// axis of length `n` spans `[floor(i*n/g), ceil((i+1)*n/g))`, so every
/// region holds at least one pixel even when `g > n`.
pub fn adaptive_avg_pool2d(x: &Tensor, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if grid_h == 0 || grid_w == 0 {
        return Err(shape_err!("pool grid must be positive"));
    }
    let span = |i: usize, g: usize, n: usize| (i * n / g, ((i + 1) * n).div_ceil(g));
    let src = x.data();
    let mut out = Vec::with_capacity(c * grid_h * grid_w);
    for ch in 0..c {
        for gy in 0..grid_h {
            let (y0, y1) = span(gy, grid_h, h);
            for gx in 0..grid_w {
                let (x0, x1) = span(gx, grid_w, w);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[(ch * h + y) * w + xx] as f64;
                    }
                }
                out.push((acc / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    Tensor::new(&[c, grid_h, grid_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &Tensor, wt: &Tensor, b: &Tensor, pad: i64) -> Vec<f64> {
        let (ci, h, w) = x.dims3().unwrap();
        let (co, k) = (wt.shape()[0], wt.shape()[2]);
        let mut out = Vec::new();
        for o in 0..co {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    let mut acc = b.data()[o] as f64;
                    for c in 0..ci {
                        for ky in 0..k as i64 {
                            for kx in 0..k as i64 {
                                let (iy, ix) = (y + ky - pad, xx + kx - pad);
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += wt.at(&[o, c, ky as usize, kx as usize]) as f64
                                    * x.at(&[c, iy as usize, ix as usize]) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_scales() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 0).unwrap();
        assert!(y.bit_eq(&x.scale(2.0)));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // [0,0,1,1]
        w.data_mut()[18 + 9 + 4] = 1.0; // [1,1,1,1]
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = Tensor::rand_uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
            let y = conv2d(&x, &w, Some(&b), 1).unwrap();
            assert_eq!(y.shape(), &[3, 5, 5]);
            for (g, o) in y.data().iter().zip(direct_conv(&x, &w, &b, 1)) {
                assert!((*g as f64 - o).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Tensor::rand_uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
            let z = Tensor::rand_uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let (a, b): (f32, f32) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let lhs = conv2d(&x.scale(a).add(&z.scale(b)).unwrap(), &w, None, 1).unwrap();
            let rhs = conv2d(&x, &w, None, 1)
                .unwrap()
                .scale(a)
                .add(&conv2d(&z, &w, None, 1).unwrap().scale(b))
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-4);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 1).is_err());
    }

    #[test]
    fn depthwise_matches_per_channel_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(&[3, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 1, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d_grouped(&x, &w, None, 1, 3).unwrap();
        for c in 0..3 {
            let xc = Tensor::new(&[1, 5, 4], x.data()[c * 20..(c + 1) * 20].to_vec()).unwrap();
            let wc = Tensor::new(&[1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = conv2d(&xc, &wc, None, 1).unwrap();
            assert_eq!(&y.data()[c * 20..(c + 1) * 20], yc.data());
        }
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        assert!(pixel_shuffle(&x, 1).unwrap().bit_eq(&x));
        let abcd = Tensor::new(&[4, 1, 1], vec![1., 2., 3., 4.]).unwrap();
        let y = pixel_shuffle(&abcd, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        assert!(pixel_shuffle(&Tensor::zeros(&[3, 1, 1]), 2).is_err());
    }

    #[test]
    fn pixel_unshuffle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[8, 3, 3], -1.0, 1.0, &mut rng);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert!(pixel_unshuffle(&y, 2).unwrap().bit_eq(&x));
    }

    #[test]
    fn avg_pool_examples() {
        let c = Tensor::full(&[2, 6, 6], 0.7);
        assert!(avg_pool2d(&c, 3).unwrap().data().iter().all(|&v| v == 0.7));
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool2d(&x, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn avg_pool_matches_naive_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = Tensor::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
            let y = avg_pool2d(&x, 4).unwrap();
            assert_eq!(y.shape(), &[3, 2, 2]);
            for c in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut s = 0.0f64;
                        for dy in 0..4 {
                            for dx in 0..4 {
                                s += x.at(&[c, oy * 4 + dy, ox * 4 + dx]) as f64;
                            }
                        }
                        assert!((y.at(&[c, oy, ox]) as f64 - s / 16.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_replicates_edges() {
        let x = Tensor::new(&[1, 1, 3], vec![1., 2., 3.]).unwrap();
        // Padded row [1,2,3,3] pooled by 2 -> rows replicated too.
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0]);
    }

    #[test]
    fn adaptive_pool_covers_small_maps() {
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f32);
        let y = adaptive_avg_pool2d(&x, 4, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.at(&[0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 3, 3]), 3.0);
        let z = adaptive_avg_pool2d(&Tensor::from_fn(&[1, 4, 4], |i| i as f32), 2, 2).unwrap();
        assert!(z.bit_eq(&avg_pool2d(&Tensor::from_fn(&[1, 4, 4], |i| i as f32), 2).unwrap()));
    }
}
