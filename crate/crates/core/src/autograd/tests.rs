use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `y` against fixed random weights so every output coordinate
/// carries a distinct upstream gradient.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(&y).shape().to_vec();
    let r = t.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = t.mul(&y, &r)?;
    Ok(t.sum(&p))
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    check_eps(name, x, 1e-3, f)
}

// Operations linear in `x` tolerate a wide step, which keeps small
// coordinates clear of f32 cancellation.
fn check_eps(name: &str, x: &Tensor, eps: f32, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let err = grad_check(f, x, eps).unwrap();
    assert!(err < 1e-3, "{name}: relative error {err}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_fn(&[2, 3, 2], |i| i as f32));
    let s = t.sum(&x);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().bit_eq(&Tensor::ones(&[2, 3, 2])));
}

#[test]
fn square_gradient_by_hand() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = t.mul(&x, &x).unwrap();
    let s = t.sum(&sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_usage_error() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(crate::Error::Usage(_))));
}

#[test]
fn identity_sum_check_is_exact() {
    let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng(0));
    let err = grad_check(|t, x| Ok(t.sum(&x)), &x, 1e-3).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng(1));
    let other = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng(2));
    check("add", &x, |t, x| {
        let o = t.constant(other.clone());
        let y = t.add(&x, &o)?;
        probe(t, y, 3)
    });
    check("mul", &x, |t, x| {
        let o = t.constant(other.clone());
        let y = t.mul(&x, &o)?;
        probe(t, y, 3)
    });
    check("scale", &x, |t, x| {
        let y = t.scale(&x, -2.5);
        probe(t, y, 3)
    });
    check("gelu", &x, |t, x| {
        let y = t.gelu(&x);
        probe(t, y, 3)
    });
    check("mean", &x, |t, x| {
        let y = t.mul(&x, &x)?;
        Ok(t.mean(&y))
    });
    check("l1_loss", &x, |t, x| {
        let o = t.constant(other.clone());
        t.l1_loss(&x, &o)
    });
}

#[test]
fn matmul_matches_finite_differences() {
    let a = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng(4));
    let b = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng(5));
    check("matmul lhs", &a, |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(&x, &bv)?;
        probe(t, y, 6)
    });
    check("matmul rhs", &b, |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(&av, &x)?;
        probe(t, y, 6)
    });
    let batched = Tensor::rand_uniform(&[2, 2, 3], -1.0, 1.0, &mut rng(7));
    check("matmul broadcast rhs", &b, |t, x| {
        let av = t.constant(batched.clone());
        let y = t.matmul(&av, &x)?;
        probe(t, y, 8)
    });
}

#[test]
fn softmax_and_layer_norm_match_finite_differences() {
    let x = Tensor::rand_uniform(&[2, 3], -2.0, 2.0, &mut rng(9));
    check("softmax", &x, |t, x| {
        let y = t.softmax(&x, None)?;
        probe(t, y, 10)
    });
    check("masked softmax", &x, |t, x| {
        let y = t.softmax(&x, Some(&[false, true, false, false, false, true]))?;
        probe(t, y, 10)
    });
    let gamma = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng(11));
    let beta = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng(12));
    check("layer_norm x", &x, |t, x| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(&x, &g, &b)?;
        probe(t, y, 13)
    });
    check("layer_norm gamma", &gamma, |t, g| {
        let (xv, b) = (t.constant(x.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(&xv, &g, &b)?;
        probe(t, y, 13)
    });
}

#[test]
fn conv_matches_finite_differences() {
    let x = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng(14));
    let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng(15));
    let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng(16));
    check_eps("conv x", &x, 1e-2, |t, x| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(&x, &wv, Some(&bv), 1, 1)?;
        probe(t, y, 17)
    });
    check_eps("conv w", &w, 1e-2, |t, wv| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.conv2d(&xv, &wv, Some(&bv), 1, 1)?;
        probe(t, y, 17)
    });
    check_eps("conv b", &b, 1e-2, |t, bv| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(&xv, &wv, Some(&bv), 1, 1)?;
        probe(t, y, 17)
    });
    let dw = Tensor::rand_uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng(18));
    check_eps("depthwise x", &x, 1e-2, |t, x| {
        let wv = t.constant(dw.clone());
        let y = t.conv2d(&x, &wv, None, 1, 2)?;
        probe(t, y, 19)
    });
}

#[test]
fn layout_ops_match_finite_differences() {
    let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng(20));
    check("transpose", &x, |t, x| {
        let y = t.transpose(&x)?;
        probe(t, y, 21)
    });
    check("gather", &x, |t, x| {
        let y = t.gather_rows(&x, &[1, 0, 1])?;
        probe(t, y, 22)
    });
    check("scatter", &x, |t, x| {
        let y = t.scatter_rows(&x, &[Some(2), None], 3)?;
        probe(t, y, 23)
    });
    check("concat", &x, |t, x| {
        let y = t.concat_rows(&[x, x])?;
        probe(t, y, 24)
    });
    check("row bias", &x, |t, x| {
        let b = t.gather_rows(&x, &[0])?;
        let b = t.reshape(&b, &[3])?;
        let y = t.add_row_bias(&x, &b)?;
        probe(t, y, 25)
    });
    let h = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng(26));
    check("heads", &h, |t, x| {
        let s = t.split_heads(&x, 2)?;
        let s = t.scale(&s, 3.0);
        let y = t.merge_heads(&s, 2)?;
        probe(t, y, 27)
    });
    let ps = Tensor::rand_uniform(&[4, 2, 3], -1.0, 1.0, &mut rng(28));
    check("pixel_shuffle", &ps, |t, x| {
        let y = t.pixel_shuffle(&x, 2)?;
        probe(t, y, 29)
    });
    let img = Tensor::rand_uniform(&[1, 3, 2], -1.0, 1.0, &mut rng(30));
    check("bicubic", &img, |t, x| {
        let y = t.bicubic(&x, 6, 4)?;
        probe(t, y, 31)
    });
}

#[test]
fn backward_is_deterministic() {
    let mut t = Tape::new();
    let x = t.input(Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng(32)));
    let w = t.param(0, &Tensor::rand_uniform(&[6, 6], -1.0, 1.0, &mut rng(33)));
    let y = t.matmul(&x, &w).unwrap();
    let y = t.softmax(&y, None).unwrap();
    let l = probe(&mut t, y, 34).unwrap();
    let a = t.backward(l).unwrap();
    let b = t.backward(l).unwrap();
    assert!(a.param(0).unwrap().bit_eq(b.param(0).unwrap()));
    assert!(a.wrt(x).unwrap().bit_eq(b.wrt(x).unwrap()));
}

#[test]
fn constants_are_gradient_barriers() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::ones(&[2, 2]));
    let w = t.param(7, &Tensor::ones(&[2, 2]));
    let y = t.matmul(&c, &w).unwrap();
    let l = t.sum(&y);
    let g = t.backward(l).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.params().keys().copied().collect::<Vec<_>>(), vec![7]);
}

#[test]
fn shared_param_accumulates_once_per_id() {
    let mut t = Tape::new();
    let a = t.param(3, &Tensor::scalar(2.0));
    let b = t.param(3, &Tensor::scalar(2.0));
    let y = t.mul(&a, &b).unwrap();
    let l = t.sum(&y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.params().len(), 1);
    assert_eq!(g.param(3).unwrap().data(), &[4.0]);
}

#[test]
fn eager_and_tape_agree() {
    let x = Tensor::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng(35));
    let w = Tensor::rand_uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng(36));
    fn run<G: Graph>(g: &mut G, x: &Tensor, w: &Tensor) -> Tensor {
        let xv = g.constant(x.clone());
        let wv = g.param(0, w);
        let y = g.conv2d(&xv, &wv, None, 1, 1).unwrap();
        let t = g.to_tokens(&y).unwrap();
        let s = g.softmax(&t, None).unwrap();
        let y = g.gelu(&s);
        g.value(&y).clone()
    }
    let e = run(&mut Eager, &x, &w);
    let t = run(&mut Tape::new(), &x, &w);
    assert!(e.bit_eq(&t));
}
