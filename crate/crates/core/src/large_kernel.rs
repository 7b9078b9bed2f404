//! Large kernel distillation: the first `C_fg` channels go through three branches
//! (hierarchical large kernel, local bottleneck, pooled channel projection) and the
//! remaining channels bypass untouched.

use crate::conv::{conv2d, Conv2d, ConvSpec};
use crate::error::{bail, Result};
use crate::ops::{self, Linear};
use crate::profile;
use crate::tensor::{Matrix, Tensor};

pub const MIN_FINE_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LkdConfig {
    pub k_core: usize,
    pub dilation: usize,
    pub k_extra: Option<usize>,
    pub reduction: usize,
    pub channels: usize,
}

impl LkdConfig {
    pub fn new(k_core: usize, dilation: usize, k_extra: Option<usize>, channels: usize) -> Self {
        Self {
            k_core,
            dilation,
            k_extra,
            reduction: 4,
            channels,
        }
    }

    /// `max(C/4, 16)`, never more than `C`.
    pub fn fine_channels(&self) -> usize {
        fine_channels(self.channels)
    }

    /// `(kernel, dilation)` of each separable stage, in application order.
    pub fn stages(&self) -> Vec<(usize, usize)> {
        let mut s = vec![(self.k_core, 1), (self.k_core, self.dilation)];
        if let Some(k) = self.k_extra {
            s.push((k, self.dilation));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (k, _) in self.stages() {
            if k % 2 == 0 {
                bail!(Config, "kernel sizes must be odd, got {k}");
            }
        }
        if self.dilation == 0 {
            bail!(Config, "dilation must be >= 1");
        }
        if self.reduction == 0 || !self.fine_channels().is_multiple_of(self.reduction) {
            bail!(
                Config,
                "reduction {} must divide the fine channel count {}",
                self.reduction,
                self.fine_channels()
            );
        }
        Ok(())
    }
}

pub fn fine_channels(c: usize) -> usize {
    (c / 4).max(MIN_FINE_CHANNELS).min(c)
}

/// Closed-form receptive field of the large-kernel branch.
pub fn predict_erf(cfg: &LkdConfig) -> Result<usize> {
    let stages = cfg.stages();
    for (k, _) in &stages {
        if k % 2 == 0 || *k == 0 {
            bail!(Config, "kernel sizes must be odd, got {k}");
        }
    }
    if cfg.dilation == 0 {
        bail!(Config, "dilation must be >= 1");
    }
    Ok(1 + stages.iter().map(|(k, d)| (k - 1) * d).sum::<usize>())
}

/// Depthwise `1×k` then `k×1` kernels of one separable stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableStage {
    /// `(C_fg, 1, 1, k)`.
    pub horizontal: Tensor,
    /// `(C_fg, 1, k, 1)`.
    pub vertical: Tensor,
}

impl SeparableStage {
    pub fn constant(channels: usize, k: usize, value: f32) -> Self {
        Self {
            horizontal: Tensor::full([channels, 1, 1, k], value),
            vertical: Tensor::full([channels, 1, k, 1], value),
        }
    }

    /// Center tap 1, rest 0.
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut s = Self::constant(channels, k, 0.0);
        for c in 0..channels {
            s.horizontal.set(c, 0, 0, k / 2, 1.0);
            s.vertical.set(c, 0, k / 2, 0, 1.0);
        }
        s
    }
}

/// 1×1 reduce → GELU → 3×3 → GELU → 1×1 expand.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWeights {
    pub reduce: Conv2d,
    pub mid: Conv2d,
    pub expand: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LkdWeights {
    pub hlk: Vec<SeparableStage>,
    pub local: LocalWeights,
    /// Projection of pooled fine features, `C_fg → C_fg`.
    pub channel: Linear,
}

pub fn hlk_branch(x: &Tensor, cfg: &LkdConfig, stages: &[SeparableStage]) -> Result<Tensor> {
    let cf = cfg.fine_channels();
    if x.c() != cf {
        bail!(Dimension, "large-kernel branch expects {cf} channels, got {}", x.c());
    }
    let plan = cfg.stages();
    if plan.len() != stages.len() {
        bail!(Dimension, "config has {} stages, weights have {}", plan.len(), stages.len());
    }
    let mut y = x.clone();
    for ((k, d), s) in plan.into_iter().zip(stages) {
        if s.horizontal.shape() != [cf, 1, 1, k] || s.vertical.shape() != [cf, 1, k, 1] {
            bail!(Dimension, "stage kernels must be [{cf}, 1, 1, {k}] and [{cf}, 1, {k}, 1]");
        }
        y = conv2d(&y, &s.horizontal, None, ConvSpec::depthwise(cf).dilated(1, d))?;
        y = conv2d(&y, &s.vertical, None, ConvSpec::depthwise(cf).dilated(d, 1))?;
    }
    Ok(y)
}

pub fn local_branch(x: &Tensor, reduction: usize, w: &LocalWeights) -> Result<Tensor> {
    if reduction == 0 || !x.c().is_multiple_of(reduction) {
        bail!(Config, "reduction {reduction} does not divide {} channels", x.c());
    }
    if w.reduce.out_channels() != x.c() / reduction {
        bail!(
            Dimension,
            "bottleneck has {} channels, expected {}",
            w.reduce.out_channels(),
            x.c() / reduction
        );
    }
    let y = ops::gelu(&w.reduce.forward(x)?);
    let y = ops::gelu(&w.mid.forward(&y)?);
    w.expand.forward(&y)
}

/// Global average pool, linear projection, broadcast over space.
pub fn channel_branch(x: &Tensor, proj: &Linear) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f64;
    let pooled = Matrix::from_fn(n, c, |i, ch| {
        (x.plane(i, ch).iter().map(|&v| v as f64).sum::<f64>() / hw) as f32
    });
    profile::record_elementwise(x.len());
    let p = proj.forward(&pooled)?;
    let mut out = Tensor::zeros([n, p.cols(), h, w]);
    for i in 0..n {
        for ch in 0..p.cols() {
            out.plane_mut(i, ch).fill(p.get(i, ch));
        }
    }
    Ok(out)
}

/// `concat(X_c ⊙ (LC(F_fg) + LK(F_fg)), F_cg)`.
pub fn lkd_forward(x: &Tensor, cfg: &LkdConfig, w: &LkdWeights) -> Result<Tensor> {
    if x.c() < MIN_FINE_CHANNELS {
        bail!(Config, "large kernel block needs at least {MIN_FINE_CHANNELS} channels, got {}", x.c());
    }
    if x.c() != cfg.channels {
        bail!(Dimension, "block configured for {} channels, input has {}", cfg.channels, x.c());
    }
    cfg.validate()?;
    let (fine, coarse) = ops::split_channels(x, cfg.fine_channels())?;
    let lk = hlk_branch(&fine, cfg, &w.hlk)?;
    let lc = local_branch(&fine, cfg.reduction, &w.local)?;
    let xc = channel_branch(&fine, &w.channel)?;
    let fused = ops::mul(&xc, &ops::add(&lc, &lk)?)?;
    ops::concat_channels(&fused, coarse.as_ref())
}
