use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{bicubic_resize_to, Tensor};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads an 8-bit RGB PNG as `[3, h, w]` with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    if img.color() != ColorType::Rgb8 {
        return Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?}", img.color()),
        ));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Nearest byte of a `[0, 1]` value after clamping; halves round away from
/// zero.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, h, w]` tensor as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Usage(format!("cannot save a {c}-channel image")));
    }
    let d = t.data();
    let mut raw = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            raw[3 * p + ch] = quantize(d[ch * h * w + p]);
        }
    }
    let img =
        RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Drops trailing rows and columns so both sides are multiples of `r`.
pub fn crop_to_multiple(img: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (nh, nw) = (h / r * r, w / r * r);
    if nh == 0 || nw == 0 {
        return Err(Error::Usage(format!("{h}x{w} image is smaller than scale {r}")));
    }
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        for y in 0..nh {
            let s = (ch * h + y) * w;
            out.extend_from_slice(&d[s..s + nw]);
        }
    }
    Tensor::new(&[c, nh, nw], out)
}

/// Antialiased bicubic downscale by `1/r` after cropping to a multiple of
/// `r`.
pub fn degrade_bicubic(hr: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Usage("scale must be positive".into()));
    }
    let hr = crop_to_multiple(hr, r)?;
    let (_, h, w) = hr.dims3()?;
    bicubic_resize_to(&hr, h / r, w / r)
}

/// `.png` files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::cubic_kernel;

    #[test]
    fn round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
            assert_eq!(*b, quantize(*a) as f32 / 255.0);
        }
    }

    #[test]
    fn extremes_survive_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bw.png");
        let img = Tensor::new(
            &[3, 1, 4],
            vec![0.0, 1.0, -0.5, 1.5, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(&back.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.5 / 255.0), 2);
    }

    #[test]
    fn rejects_non_rgb_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::new(2, 2).save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        assert!(matches!(
            load_image(&dir.path().join("none.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn degrade_cases() {
        let c = Tensor::full(&[3, 8, 6], 0.3);
        let lr = degrade_bicubic(&c, 2).unwrap();
        assert_eq!(lr.shape(), &[3, 4, 3]);
        assert!(lr.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let img = Tensor::rand_uniform(&[3, 5, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(degrade_bicubic(&img, 1).unwrap().max_abs_diff(&img) < 1e-6);
        assert_eq!(degrade_bicubic(&img, 2).unwrap().shape(), &[3, 2, 2]);
    }

    #[test]
    fn degrade_matches_kernel_oracle() {
        let img = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let lr = degrade_bicubic(&img, 2).unwrap();
        // Kernel stretched by 2, centers at half pixels, edge replication.
        let weights = |o: usize| -> Vec<(usize, f64)> {
            let center = (o as f64 + 0.5) * 2.0 - 0.5;
            let taps: Vec<(i64, f64)> = ((center - 4.0).floor() as i64..=(center + 4.0).ceil() as i64)
                .map(|i| (i, cubic_kernel((i as f64 - center) / 2.0)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter()
                .map(|(i, w)| (i.clamp(0, 7) as usize, w / s))
                .collect()
        };
        for y in 0..4 {
            for x in 0..4 {
                let mut v = 0.0;
                for &(iy, wy) in &weights(y) {
                    for &(ix, wx) in &weights(x) {
                        v += wy * wx * img.at(&[0, iy, ix]) as f64;
                    }
                }
                assert!((lr.at(&[0, y, x]) as f64 - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn lists_sorted_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::zeros(&[3, 2, 2]);
        for n in ["b.png", "a.PNG", "c.txt"] {
            save_image(&img, &dir.path().join(n)).unwrap();
        }
        let names: Vec<String> = list_pngs(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["a.PNG", "b.png"]);
    }
}
