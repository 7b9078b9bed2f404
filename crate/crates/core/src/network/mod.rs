//! Block assembly and the full super-resolution forward pass.

mod blocks;
mod config;
mod params;
mod weights;

pub use blocks::{
    conv_mlp, esa_forward, hpa_forward, layer_norm, lm_forward, receiving_block, rha_forward,
    sha_forward, sharing_block,
};
pub use config::ModelConfig;
pub use params::{Params, Visitor, VisitorMut};
pub use weights::{
    ConvMlpWeights, EsaWeights, GroupWeights, HpaWeights, LmWeights, Norm, ReceivingBlockWeights,
    RhaWeights, ShaWeights, SharingBlockWeights, UcanWeights,
};

use crate::error::{bail, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Shallow conv → groups → fuse with shallow features → conv → pixel shuffle.
///
/// Input values outside `[0, 1]` are clamped with a warning.
pub fn ucan_forward(img: &Tensor, weights: &UcanWeights) -> Result<Tensor> {
    let cfg = &weights.config;
    if img.c() != 3 {
        bail!(Dimension, "expected a 3-channel image, got {} channels", img.c());
    }
    let out_of_range = img.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let clamped;
    let img = if out_of_range > 0 {
        log::warn!("clamping {out_of_range} input values to [0, 1]");
        clamped = img.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        &clamped
    } else {
        img
    };
    let f0 = weights.shallow.forward(img)?;
    let mut f = f0.clone();
    for g in &weights.groups {
        let (y, shares) = sharing_block(&f, &g.sb, cfg)?;
        f = receiving_block(&y, &g.rb, cfg, &shares)?;
    }
    let fused = ops::add(&f0, &weights.fusion.forward(&f)?)?;
    let out = ops::pixel_shuffle(&weights.recon.forward(&fused)?, cfg.scale)?;
    if !out.is_finite() {
        bail!(Numeric, "forward pass produced non-finite values");
    }
    Ok(out)
}
