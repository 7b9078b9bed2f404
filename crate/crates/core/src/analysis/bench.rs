use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_attention_linear, linear_attention_quadratic, softmax_attention, tiled_exact_attention,
    TileConfig,
};
use crate::error::{bail, Result};
use crate::feature_map::{FeatureMapKind, HedgehogParams};
use crate::profile::count_macs;
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchEngine {
    Naive,
    Tiled,
    Linear,
}

impl BenchEngine {
    pub fn name(self) -> &'static str {
        match self {
            BenchEngine::Naive => "naive",
            BenchEngine::Tiled => "tiled",
            BenchEngine::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "naive" => Some(BenchEngine::Naive),
            "tiled" => Some(BenchEngine::Tiled),
            "linear" => Some(BenchEngine::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub engines: Vec<BenchEngine>,
    pub warmup: usize,
    pub runs: usize,
    pub tiles: TileConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![256, 512, 1024],
            d: 32,
            engines: vec![BenchEngine::Naive, BenchEngine::Tiled, BenchEngine::Linear],
            warmup: 3,
            runs: 10,
            tiles: TileConfig::new(64, 64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    pub engine: BenchEngine,
    pub median_ms: f64,
    pub peak_temp_elements: u64,
    pub largest_temp_elements: u64,
    /// Max abs difference to the engine's reference, relative to the reference's max abs:
    /// naive softmax for the softmax engines, the quadratic form for the linear engine.
    pub rel_error: f64,
}

fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    let scale = b.data().iter().fold(0f64, |m, &v| m.max(v.abs() as f64)).max(f64::MIN_POSITIVE);
    a.data()
        .iter()
        .zip(b.data())
        .fold(0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()))
        / scale
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Wall time (median after warmup) and temporary allocation of each engine at each `N`.
pub fn bench_attention(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.warmup < 3 || cfg.runs < 10 {
        bail!(Config, "benchmarks need >= 3 warmup iterations and >= 10 timed runs");
    }
    if cfg.d == 0 || cfg.n_list.contains(&0) {
        bail!(Config, "benchmark sizes must be >= 1");
    }
    let scale = 1.0 / (cfg.d as f32).sqrt();
    let mut out = Vec::new();
    for &n in &cfg.n_list {
        let mut rng = Rng::new(cfg.seed ^ n as u64);
        let q = Matrix::randn(n, cfg.d, 1.0, &mut rng);
        let k = Matrix::randn(n, cfg.d, 1.0, &mut rng);
        let v = Matrix::randn(n, cfg.d, 1.0, &mut rng);
        let phi = FeatureMapKind::Hedgehog(HedgehogParams::init(cfg.d, 1, &mut rng.derive(1)));
        let reference = softmax_attention(&q, &k, &v, scale)?;
        for &engine in &cfg.engines {
            let run = || -> Result<Matrix> {
                match engine {
                    BenchEngine::Naive => softmax_attention(&q, &k, &v, scale),
                    BenchEngine::Tiled => tiled_exact_attention(&q, &k, &v, scale, cfg.tiles),
                    BenchEngine::Linear => linear_attention_linear(&q, &k, &v, &phi),
                }
            };
            for _ in 0..cfg.warmup {
                run()?;
            }
            let mut times = Vec::with_capacity(cfg.runs);
            for _ in 0..cfg.runs {
                let t = Instant::now();
                std::hint::black_box(run()?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let (result, rep) = count_macs(run);
            let result = result?;
            let rel = match engine {
                BenchEngine::Linear => rel_error(&result, &linear_attention_quadratic(&q, &k, &v, &phi)?),
                _ => rel_error(&result, &reference),
            };
            out.push(BenchRecord {
                n,
                engine,
                median_ms: median(times),
                peak_temp_elements: rep.peak_temp_elements,
                largest_temp_elements: rep.largest_temp_elements,
                rel_error: rel,
            });
        }
    }
    Ok(out)
}

/// Allocation-scaling and agreement checks over a benchmark table; returns violations.
pub fn check_scaling(records: &[BenchRecord]) -> Vec<String> {
    let mut bad = Vec::new();
    let get = |e: BenchEngine, n: usize| records.iter().find(|r| r.engine == e && r.n == n);
    for r in records {
        if r.rel_error > 1e-5 {
            bad.push(format!("{} at N={} differs from its reference by {:.2e}", r.engine.name(), r.n, r.rel_error));
        }
        if r.engine == BenchEngine::Linear && r.largest_temp_elements >= (r.n * r.n) as u64 && r.n > 1 {
            bad.push(format!("linear engine at N={} allocated an N×N buffer", r.n));
        }
    }
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    for w in ns.windows(2) {
        let (a, b) = (w[0], w[1]);
        if let (Some(x), Some(y)) = (get(BenchEngine::Naive, a), get(BenchEngine::Naive, b)) {
            let expect = (b as f64 / a as f64).powi(2);
            let ratio = y.peak_temp_elements as f64 / x.peak_temp_elements.max(1) as f64;
            if (ratio - expect).abs() > 0.125 * expect {
                bad.push(format!("naive allocation ratio {ratio:.2} for N {a}→{b}, expected ≈{expect:.1}"));
            }
        }
        if let (Some(x), Some(y)) = (get(BenchEngine::Tiled, a), get(BenchEngine::Tiled, b)) {
            if y.peak_temp_elements != x.peak_temp_elements {
                bad.push(format!("tiled allocation changed from {} to {} for N {a}→{b}", x.peak_temp_elements, y.peak_temp_elements));
            }
        }
    }
    bad
}
