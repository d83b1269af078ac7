//! Binary masks of the token groups a residual group forms on an image.

use std::path::{Path, PathBuf};

use crate::data::save_image;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// One `h × w` boolean mask per non-empty group, in group-id order.
pub fn group_masks(labels: &[usize], h: usize, w: usize, m: usize) -> Result<Vec<(usize, Vec<bool>)>> {
    if labels.len() != h * w {
        return Err(Error::Usage(format!(
            "{} labels for a {h}x{w} grid",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Usage(format!("label {bad} out of range for {m} groups")));
    }
    Ok((0..m)
        .map(|j| (j, labels.iter().map(|&l| l == j).collect::<Vec<_>>()))
        .filter(|(_, mask)| mask.iter().any(|&b| b))
        .collect())
}

/// Masks of residual group `rg`'s token grouping for `img`, computed with
/// an inference forward.
pub fn image_group_masks(model: &Model, img: &Tensor, rg: usize) -> Result<Vec<(usize, Vec<bool>)>> {
    let k = model.config.groups;
    if rg >= k {
        return Err(Error::Usage(format!(
            "residual group {rg} out of range for {k} groups"
        )));
    }
    let (_, h, w) = img.dims3()?;
    let (_, trace) = model.infer_traced(std::slice::from_ref(img))?;
    group_masks(&trace.groupings[rg][0].labels, h, w, model.config.centers)
}

/// White-on-black RGB image of a mask.
pub fn mask_image(mask: &[bool], h: usize, w: usize) -> Result<Tensor> {
    let plane: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[3, h, w], plane.repeat(3))
}

/// Writes `group_<id>.png` for every mask into `dir` and returns the paths.
pub fn write_group_masks(
    masks: &[(usize, Vec<bool>)],
    h: usize,
    w: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    masks
        .iter()
        .map(|(j, mask)| {
            let path = dir.join(format!("group_{j:03}.png"));
            save_image(&mask_image(mask, h, w)?, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn masks_partition(labels in proptest::collection::vec(0usize..5, 12)) {
            let masks = group_masks(&labels, 3, 4, 5).unwrap();
            for t in 0..12 {
                let hits = masks.iter().filter(|(_, m)| m[t]).count();
                prop_assert_eq!(hits, 1);
            }
            prop_assert!(masks.iter().all(|(_, m)| m.iter().any(|&b| b)));
        }
    }

    #[test]
    fn single_group_is_all_white() {
        let masks = group_masks(&[0; 6], 2, 3, 1).unwrap();
        assert_eq!(masks.len(), 1);
        assert!(mask_image(&masks[0].1, 2, 3)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(group_masks(&[0, 1], 1, 3, 2).is_err());
        assert!(group_masks(&[0, 2], 1, 2, 2).is_err());
    }
}
