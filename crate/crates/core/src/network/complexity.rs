//! Analytic multiply-accumulate counts.
//!
//! Convolutions count `h·w·c_in·c_out·k²` (depthwise: `h·w·c·k²`), linear
//! maps `N·d_in·d_out`, and every attention product `2·L_q·L_k·d`
//! (scores plus weighted values). Grouped attention counts its padded token
//! count and both halves of each key window; cross-attention includes the
//! projections of the centers. Resizing, normalization, activations and bias
//! additions are not counted.

use super::ModelConfig;
use crate::attention::lrsa_tiles;
use crate::error::Result;

pub fn conv_macs(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    (h * w * c_in * c_out * k * k) as u64
}

pub fn linear_macs(n: usize, d_in: usize, d_out: usize) -> u64 {
    (n * d_in * d_out) as u64
}

pub fn attention_macs(lq: usize, lk: usize, d: usize) -> u64 {
    2 * (lq * lk * d) as u64
}

pub fn ffn_macs(n: usize, d: usize, hidden: usize) -> u64 {
    2 * linear_macs(n, d, hidden) + (n * hidden * 9) as u64
}

/// Grouped self-attention including its four projections.
pub fn iasa_macs(n: usize, d: usize, group_size: usize) -> u64 {
    let padded = n.div_ceil(group_size) * group_size;
    4 * linear_macs(n, d, d) + attention_macs(padded, 2 * group_size, d)
}

/// Cross-attention to `m` centers including all projections.
pub fn irca_macs(n: usize, m: usize, d: usize) -> u64 {
    2 * linear_macs(n, d, d) + 2 * linear_macs(m, d, d) + attention_macs(n, m, d)
}

pub fn lrsa_macs(h: usize, w: usize, d: usize, patch: usize, overlap: usize) -> Result<u64> {
    let attn: u64 = lrsa_tiles(h, w, patch, overlap)?
        .iter()
        .map(|t| attention_macs(t.queries.len(), t.keys.len(), d))
        .sum();
    Ok(4 * linear_macs(h * w, d, d) + attn)
}

pub fn residual_group_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    let (n, d, hid) = (h * w, cfg.dim, cfg.hidden());
    let tab = iasa_macs(n, d, cfg.group_size)
        + irca_macs(n, cfg.centers, d)
        + linear_macs(n, d, d)
        + ffn_macs(n, d, hid);
    let lrsa = lrsa_macs(h, w, d, cfg.patch, cfg.overlap)? + ffn_macs(n, d, hid);
    Ok(tab + lrsa + conv_macs(h, w, d, d, 3))
}

/// Total for one `3 × h × w` input.
pub fn multi_adds(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    let r2 = cfg.scale * cfg.scale;
    let shallow = conv_macs(h, w, 3, cfg.dim, 3);
    let body = cfg.groups as u64 * residual_group_macs(cfg, h, w)?;
    let recon = conv_macs(h, w, cfg.dim, 3 * r2, 3);
    Ok(shallow + body + recon)
}
