use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::large_kernel::{hlk_branch, predict_erf, LkdConfig, SeparableStage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErfReport {
    pub k_core: usize,
    pub dilation: usize,
    pub k_extra: Option<usize>,
    pub predicted: usize,
    pub measured_h: usize,
    pub measured_w: usize,
}

impl ErfReport {
    pub fn matches(&self) -> bool {
        self.predicted == self.measured_h && self.predicted == self.measured_w
    }
}

/// Rows and columns of channel 0 holding any nonzero value.
pub fn support(t: &Tensor) -> (usize, usize) {
    let [_, _, h, w] = t.shape();
    let plane = t.plane(0, 0);
    let rows = (0..h).filter(|&y| plane[y * w..(y + 1) * w].iter().any(|&v| v != 0.0)).count();
    let cols = (0..w).filter(|&x| (0..h).any(|y| plane[y * w + x] != 0.0)).count();
    (rows, cols)
}

/// Impulse response support of `f` for a delta at the center of a `size × size` plane.
pub fn impulse_support(
    channels: usize,
    size: usize,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<(usize, usize)> {
    let mut x = Tensor::zeros([1, channels, size, size]);
    x.set(0, 0, size / 2, size / 2, 1.0);
    Ok(support(&f(&x)?))
}

/// Runs the large-kernel branch with all-ones kernels on a delta and counts its support.
pub fn measure_erf(cfg: &LkdConfig) -> Result<ErfReport> {
    let predicted = predict_erf(cfg)?;
    let cf = cfg.fine_channels();
    let stages: Vec<_> = cfg
        .stages()
        .into_iter()
        .map(|(k, _)| SeparableStage::constant(cf, k, 1.0))
        .collect();
    let size = 2 * predicted + 1;
    let (measured_h, measured_w) = impulse_support(cf, size, |x| hlk_branch(x, cfg, &stages))?;
    Ok(ErfReport {
        k_core: cfg.k_core,
        dilation: cfg.dilation,
        k_extra: cfg.k_extra,
        predicted,
        measured_h,
        measured_w,
    })
}

/// The six configurations of the reference receptive-field table with their ERFs.
pub const ERF_TABLE: [(usize, usize, Option<usize>, usize); 6] = [
    (3, 1, None, 5),
    (5, 1, None, 9),
    (5, 2, None, 13),
    (5, 3, Some(11), 47),
    (5, 3, Some(13), 53),
    (5, 3, Some(17), 65),
];
