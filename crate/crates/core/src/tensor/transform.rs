use super::Tensor;
use crate::error::Result;

/// One of the eight symmetries of the square: optional horizontal mirror
/// followed by `rot` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self { rot: 0, flip: false };

    pub fn all() -> [Self; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Self {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }
}

fn rot90(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    // out[c][w-1-j][i] = in[c][i][j]; output is w x h
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * w + (w - 1 - j)) * h + i] = src[(ch * h + i) * w + j];
            }
        }
    }
    Tensor::new(&[c, w, h], out)
}

fn flip_h(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for row in 0..c * h {
        for j in 0..w {
            out[row * w + j] = src[row * w + (w - 1 - j)];
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn dihedral(x: &Tensor, t: Dihedral) -> Result<Tensor> {
    let mut y = if t.flip { flip_h(x)? } else { x.clone() };
    for _ in 0..t.rot % 4 {
        y = rot90(&y)?;
    }
    Ok(y)
}

pub fn dihedral_inverse(x: &Tensor, t: Dihedral) -> Result<Tensor> {
    let mut y = x.clone();
    for _ in 0..(4 - t.rot % 4) % 4 {
        y = rot90(&y)?;
    }
    if t.flip {
        y = flip_h(&y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_undoes_every_transform() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f32);
        for t in Dihedral::all() {
            let y = dihedral(&x, t).unwrap();
            assert!(dihedral_inverse(&y, t).unwrap().bit_eq(&x), "{t:?}");
        }
    }

    #[test]
    fn eight_distinct_images() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let ys: Vec<_> = Dihedral::all()
            .iter()
            .map(|&t| dihedral(&x, t).unwrap())
            .collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(!ys[i].bit_eq(&ys[j]));
            }
        }
    }

    #[test]
    fn rot90_counter_clockwise() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = rot90(&x).unwrap();
        assert_eq!(y.data(), &[2., 4., 1., 3.]);
    }
}
