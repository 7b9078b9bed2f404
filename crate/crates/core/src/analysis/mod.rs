//! Rank analysis, receptive-field measurement, operation counting and benchmarks.

mod bench;
mod erf;
mod rank;
mod report;
mod svd;

pub use bench::{bench_attention, check_scaling, BenchConfig, BenchEngine, BenchRecord};
pub use erf::{impulse_support, measure_erf, support, ErfReport, ERF_TABLE};
pub use rank::{attention_matrix, attention_rank, mean_rank, rank_sweep, RankKind, RankReport, RankSetup};
pub use report::{bench_csv, erf_csv, macs_csv, rank_csv, MacRecord};
pub use svd::{numerical_rank, singular_values, ColMatrix, SvdResult, CONVERGENCE, MAX_SWEEPS};

pub use crate::profile::{count_macs, MacReport};

use crate::error::Result;
use crate::network::{ucan_forward, UcanWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Counted MACs of one full forward pass on a seeded `h × w` image.
pub fn model_macs(weights: &UcanWeights, h: usize, w: usize) -> Result<MacReport> {
    let mut rng = Rng::new(weights.config.seed);
    let img = Tensor::new(
        [1, 3, h, w],
        (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0)).collect(),
    )?;
    let (out, rep) = count_macs(|| ucan_forward(&img, weights));
    out?;
    Ok(rep)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<_> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn model_macs_scale_linearly_in_pixels() {
        let cfg = ModelConfig {
            channels: 16,
            groups: 1,
            ha_depth: 1,
            lkd_depth: 1,
            wmsa_window: 8,
            wmsa_heads: 2,
            hpa_window: 8,
            hpa_heads: 2,
            ..ModelConfig::default()
        };
        let w = UcanWeights::init(&cfg).unwrap();
        let pts: Vec<_> = [16usize, 32, 48]
            .iter()
            .map(|&s| ((s * s) as f64, model_macs(&w, s, s).unwrap().total_macs() as f64))
            .collect();
        let slope = loglog_slope(&pts);
        assert!((slope - 1.0).abs() <= 0.02, "slope {slope}");
        let again = model_macs(&w, 16, 16).unwrap();
        assert_eq!(again.total_macs() as f64, pts[0].1);
    }
}
