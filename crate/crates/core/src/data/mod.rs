//! Image files, evaluation metrics, test-time ensembling and checkpoints.

pub mod checkpoint;
mod ensemble;
mod image;
mod metrics;

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use ensemble::self_ensemble;
pub use image::{crop_to_multiple, degrade_bicubic, list_pngs, load_image, quantize, save_image};
pub use metrics::{psnr_y, ssim_y, to_y, SSIM_SIGMA, SSIM_WINDOW};
