use super::config::ModelConfig;
use super::weights::{
    ConvMlpWeights, EsaWeights, HpaWeights, LmWeights, Norm, ReceivingBlockWeights, RhaWeights,
    ShaWeights, SharingBlockWeights,
};
use crate::attention::{windowed_mhsa, windowed_mhsa_with_maps, Engine};
use crate::conv::{max_pool2d, upsample_bilinear};
use crate::dual_fusion::{dfl_forward_receiver, dfl_forward_shared, AttentionShare};
use crate::error::{bail, Result};
use crate::large_kernel::lkd_forward;
use crate::ops;
use crate::tensor::Tensor;

pub fn layer_norm(x: &Tensor, n: &Norm) -> Result<Tensor> {
    ops::layer_norm(x, n.gamma.data(), n.beta.data())
}

pub fn conv_mlp(x: &Tensor, w: &ConvMlpWeights) -> Result<Tensor> {
    let y = w.expand.forward(x)?;
    let y = ops::gelu(&w.dw.forward(&y)?);
    w.project.forward(&y)
}

/// `F = x + MLP(LN(x))`, then `F + TiledWMSA(LN(F))`. Identity when HPA is disabled.
pub fn hpa_forward(x: &Tensor, w: &HpaWeights, cfg: &ModelConfig) -> Result<Tensor> {
    if !cfg.hpa_enabled {
        return Ok(x.clone());
    }
    let f_mlp = ops::add(x, &conv_mlp(&layer_norm(x, &w.norm_mlp)?, &w.mlp)?)?;
    let normed = layer_norm(&f_mlp, &w.norm_attn)?;
    let (attn, _) = windowed_mhsa(&normed, &cfg.hpa(), &w.attn, Engine::Tiled(cfg.tiles()), false)?;
    ops::add(&f_mlp, &attn)
}

pub fn lm_forward(x: &Tensor, w: &LmWeights) -> Result<Tensor> {
    Ok(ops::gelu(&w.pw.forward(&w.dw.forward(x)?)?))
}

/// Window attention then dual fusion, each pre-normed and residual; emits both shares.
pub fn sha_forward(x: &Tensor, w: &ShaWeights, cfg: &ModelConfig) -> Result<(Tensor, AttentionShare)> {
    let (a, maps) = windowed_mhsa(&layer_norm(x, &w.norm_wmsa)?, &cfg.wmsa(), &w.wmsa, Engine::Naive, true)?;
    let y = ops::add(x, &a)?;
    let (d, mut share) = dfl_forward_shared(&layer_norm(&y, &w.norm_dfl)?, &w.dfl, &cfg.dfl())?;
    share.map = maps;
    Ok((ops::add(&y, &d)?, share))
}

pub fn rha_forward(
    x: &Tensor,
    w: &RhaWeights,
    cfg: &ModelConfig,
    share: &AttentionShare,
) -> Result<Tensor> {
    let Some(maps) = &share.map else {
        bail!(Contract, "attention share carries no window maps");
    };
    let a = windowed_mhsa_with_maps(&layer_norm(x, &w.norm_wmsa)?, &cfg.wmsa(), &w.wmsa, maps)?;
    let y = ops::add(x, &a)?;
    let d = dfl_forward_receiver(
        &layer_norm(&y, &w.norm_dfl)?,
        &w.dfl,
        &cfg.dfl(),
        &share.qk,
        cfg.sharing,
    )?;
    ops::add(&y, &d)
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Reduce, strided conv, max-pool, conv group, upsample, restore, sigmoid gate.
pub fn esa_forward(x: &Tensor, w: &EsaWeights) -> Result<Tensor> {
    let [_, _, h, wd] = x.shape();
    let c1_ = w.reduce.forward(x)?;
    let c1 = w.stride.forward(&c1_)?;
    let v_max = max_pool2d(&c1, 7, 3)?;
    let v_range = relu(&w.conv_max.forward(&v_max)?);
    let c3 = relu(&w.conv3.forward(&v_range)?);
    let c3 = w.conv3b.forward(&c3)?;
    let c3 = upsample_bilinear(&c3, h, wd);
    let cf = w.skip.forward(&c1_)?;
    let gate = w.restore.forward(&ops::add(&c3, &cf)?)?.map(ops::sigmoid_scalar);
    ops::mul(x, &gate)
}

fn block_tail(
    x: &Tensor,
    y: Tensor,
    lkd: &[crate::large_kernel::LkdWeights],
    esa: &EsaWeights,
    cfg: &ModelConfig,
    residual: bool,
) -> Result<Tensor> {
    let lc = cfg.lkd();
    let mut y = y;
    for l in lkd {
        y = lkd_forward(&y, &lc, l)?;
    }
    if residual {
        y = ops::add(&y, x)?;
    }
    esa_forward(&y, esa)
}

pub(crate) fn sharing_block_impl(
    x: &Tensor,
    w: &SharingBlockWeights,
    cfg: &ModelConfig,
    residual: bool,
) -> Result<(Tensor, Vec<AttentionShare>)> {
    let mut y = lm_forward(&hpa_forward(x, &w.hpa, cfg)?, &w.lm)?;
    let mut shares = Vec::with_capacity(w.sha.len());
    for s in &w.sha {
        let (next, share) = sha_forward(&y, s, cfg)?;
        y = next;
        shares.push(share);
    }
    Ok((block_tail(x, y, &w.lkd, &w.esa, cfg, residual)?, shares))
}

/// HPA → LM → SHA×depth → LKD×depth → residual → ESA; returns one share per SHA.
pub fn sharing_block(
    x: &Tensor,
    w: &SharingBlockWeights,
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<AttentionShare>)> {
    sharing_block_impl(x, w, cfg, true)
}

/// Mirror of [`sharing_block`] whose attention modules consume `shares` positionally.
pub fn receiving_block(
    x: &Tensor,
    w: &ReceivingBlockWeights,
    cfg: &ModelConfig,
    shares: &[AttentionShare],
) -> Result<Tensor> {
    if shares.len() != w.rha.len() {
        bail!(
            Contract,
            "receiving block has {} attention modules but got {} shares",
            w.rha.len(),
            shares.len()
        );
    }
    let mut y = lm_forward(&hpa_forward(x, &w.hpa, cfg)?, &w.lm)?;
    for (r, share) in w.rha.iter().zip(shares) {
        y = rha_forward(&y, r, cfg, share)?;
    }
    block_tail(x, y, &w.lkd, &w.esa, cfg, true)
}
