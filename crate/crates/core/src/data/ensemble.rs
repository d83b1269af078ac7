use crate::error::Result;
use crate::network::Model;
use crate::tensor::{dihedral, dihedral_inverse, Dihedral, Tensor};

/// Mean of the model output over the eight rotations and reflections of
/// the input, each mapped back to the original orientation.
pub fn self_ensemble(model: &Model, img: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for t in Dihedral::all() {
        let out = dihedral_inverse(&model.forward(&dihedral(img, t)?)?, t)?;
        let a = acc.get_or_insert_with(|| vec![0.0; out.numel()]);
        for (s, &v) in a.iter_mut().zip(out.data()) {
            *s += v as f64;
        }
        shape = out.shape().to_vec();
    }
    let data = acc
        .unwrap_or_default()
        .into_iter()
        .map(|s| (s / 8.0) as f32)
        .collect();
    Tensor::new(&shape, data)
}
