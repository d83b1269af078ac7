use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luma(r: f64, g: f64, b: f64) -> f64 {
    (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
}

/// Studio-swing BT.601 luma of an RGB image in `[0, 1]`.
pub fn to_y(img: &Tensor) -> Result<Tensor> {
    let y = y_plane(img)?;
    Tensor::new(
        &[1, img.shape()[1], img.shape()[2]],
        y.into_iter().map(|v| v as f32).collect(),
    )
}

fn y_plane(img: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(shape_err!("luma needs 3 channels, got {c}"));
    }
    let n = h * w;
    let d = img.data();
    Ok((0..n)
        .map(|i| luma(d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64))
        .collect())
}

/// Luma planes of both images with `crop` pixels removed from each border.
fn cropped_pair(a: &Tensor, b: &Tensor, crop: usize) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    a.expect_same_shape(b)?;
    let (_, h, w) = a.dims3()?;
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::Usage(format!(
            "border crop {crop} leaves nothing of {h}x{w}"
        )));
    }
    let (ya, yb) = (y_plane(a)?, y_plane(b)?);
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let take = |y: &[f64]| -> Vec<f64> {
        (crop..h - crop)
            .flat_map(|r| y[r * w + crop..r * w + w - crop].iter().copied())
            .collect()
    };
    Ok((take(&ya), take(&yb), ch, cw))
}

/// Peak signal-to-noise ratio on luma, in dB, for peak 1. Identical inputs
/// give `+∞`.
pub fn psnr_y(a: &Tensor, b: &Tensor, crop: usize) -> Result<f64> {
    let (ya, yb, _, _) = cropped_pair(a, b, crop)?;
    let mse = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / ya.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity on luma over every valid placement of an
/// 11×11 Gaussian window (σ = 1.5).
pub fn ssim_y(a: &Tensor, b: &Tensor, crop: usize) -> Result<f64> {
    let (ya, yb, h, w) = cropped_pair(a, b, crop)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ya, h, w, &k);
    let mu_b = filter_valid(&yb, h, w, &k);
    let aa = filter_valid(&prod(&ya, &ya), h, w, &k);
    let bb = filter_valid(&prod(&yb, &yb), h, w, &k);
    let ab = filter_valid(&prod(&ya, &yb), h, w, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rgb(r: f32, g: f32, b: f32) -> Tensor {
        Tensor::new(&[3, 1, 1], vec![r, g, b]).unwrap()
    }

    #[test]
    fn luma_fixed_points() {
        assert!((to_y(&rgb(0.0, 0.0, 0.0)).unwrap().data()[0] - 16.0 / 255.0).abs() < 1e-7);
        assert!((to_y(&rgb(1.0, 1.0, 1.0)).unwrap().data()[0] - 235.0 / 255.0).abs() < 1e-6);
        let y = to_y(&rgb(0.2, 0.5, 0.9)).unwrap().data()[0] as f64;
        let want = (65.481 * 0.2f32 as f64 + 128.553 * 0.5 + 24.966 * 0.9f32 as f64 + 16.0) / 255.0;
        assert!((y - want).abs() < 1e-6);
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform(&[3, 6, 6], 0.2, 0.8, &mut rng);
        assert_eq!(psnr_y(&a, &a, 2).unwrap(), f64::INFINITY);
        // A shift of 0.1·255/219 in every channel moves luma by exactly 0.1.
        let s = 0.1 * 255.0 / 219.0;
        let b = a.map(|v| v + s as f32);
        assert!((psnr_y(&a, &b, 0).unwrap() - 20.0).abs() < 1e-4);
        let c = Tensor::rand_uniform(&[3, 6, 6], 0.0, 1.0, &mut rng);
        assert_eq!(psnr_y(&a, &c, 1).unwrap(), psnr_y(&c, &a, 1).unwrap());
        assert!(psnr_y(&a, &c, 3).is_err());
    }

    #[test]
    fn crop_ignores_borders() {
        let a = Tensor::full(&[3, 6, 6], 0.5);
        let mut b = a.clone();
        b.data_mut()[0] = 0.0;
        assert!(psnr_y(&a, &b, 0).unwrap().is_finite());
        assert_eq!(psnr_y(&a, &b, 1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(&[3, 14, 13], 0.0, 1.0, &mut rng);
        assert!((ssim_y(&a, &a, 0).unwrap() - 1.0).abs() < 1e-9);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim_y(&a, &neg, 0).unwrap() < 0.0);
        assert!(matches!(ssim_y(&a, &a, 2), Err(Error::Usage(_))));
    }
}
