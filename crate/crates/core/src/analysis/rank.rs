use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svd::{numerical_rank, singular_values, ColMatrix};
use crate::error::{bail, Result};
use crate::feature_map::{FeatureMapKind, FeatureMapTag, HedgehogParams};
use crate::ops::EPS;
use crate::rng::Rng;

/// What produces the attention matrix being analysed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankKind {
    /// `softmax(QKᵀ/√d)` baseline.
    Softmax,
    /// Row-normalized `φ(Q)φ(K)ᵀ`.
    Map(FeatureMapTag),
}

impl RankKind {
    pub fn name(self) -> &'static str {
        match self {
            RankKind::Softmax => "softmax",
            RankKind::Map(t) => t.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "softmax" {
            Some(RankKind::Softmax)
        } else {
            FeatureMapTag::parse(s).map(RankKind::Map)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub kind: String,
    pub n: usize,
    pub d: usize,
    pub pairs: usize,
    pub seed: u64,
    pub tol: f64,
    pub rank: usize,
    pub sweeps: usize,
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSetup {
    pub n: usize,
    pub d: usize,
    /// Hedgehog exponential pairs.
    pub pairs: usize,
    pub tol: f64,
}

impl RankSetup {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            pairs: 1,
            tol: 1e-6,
        }
    }
}

fn gaussian_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal_f64()).collect()).collect()
}

fn feature_map(tag: FeatureMapTag, d: usize, pairs: usize, rng: &mut Rng) -> FeatureMapKind {
    match tag {
        FeatureMapTag::Identity => FeatureMapKind::Identity,
        FeatureMapTag::Relu => FeatureMapKind::Relu,
        FeatureMapTag::EluPlusOne => FeatureMapKind::EluPlusOne,
        FeatureMapTag::SymRelu => FeatureMapKind::SymRelu,
        FeatureMapTag::Hedgehog => FeatureMapKind::Hedgehog(HedgehogParams::init(d, pairs, rng)),
    }
}

/// The `N × N` attention matrix for `(q, k)` rows, in f64.
pub fn attention_matrix(kind: &RankKind, q: &[Vec<f64>], k: &[Vec<f64>], phi: Option<&FeatureMapKind>) -> Result<ColMatrix> {
    let (n, m) = (q.len(), k.len());
    let mut a = ColMatrix::zeros(n, m);
    match kind {
        RankKind::Softmax => {
            let scale = 1.0 / (q.first().map_or(1, Vec::len) as f64).sqrt();
            for (i, qi) in q.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale)
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let den: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    a.set(i, j, (l - max).exp() / den);
                }
            }
        }
        RankKind::Map(_) => {
            let Some(phi) = phi else {
                bail!(Config, "feature-map rank analysis needs a feature map");
            };
            let pq = q.iter().map(|r| phi.eval(r)).collect::<Result<Vec<_>>>()?;
            let pk = k.iter().map(|r| phi.eval(r)).collect::<Result<Vec<_>>>()?;
            for (i, fq) in pq.iter().enumerate() {
                let row: Vec<f64> = pk
                    .iter()
                    .map(|fk| fq.iter().zip(fk).map(|(x, y)| x * y).sum())
                    .collect();
                let den: f64 = row.iter().sum();
                let den = if den.abs() < EPS as f64 { den + (EPS as f64).copysign(den) } else { den };
                for (j, v) in row.iter().enumerate() {
                    a.set(i, j, v / den);
                }
            }
        }
    }
    Ok(a)
}

/// Numerical rank of the attention matrix built from Gaussian `Q, K ∈ R^{N×d}` drawn from `seed`.
pub fn attention_rank(kind: RankKind, setup: RankSetup, seed: u64) -> Result<RankReport> {
    let RankSetup { n, d, pairs, tol } = setup;
    if n == 0 || d == 0 || pairs == 0 {
        bail!(Config, "rank analysis needs n, d, pairs >= 1");
    }
    let mut rng = Rng::new(seed);
    let q = gaussian_rows(&mut rng, n, d);
    let k = gaussian_rows(&mut rng, n, d);
    let phi = match kind {
        RankKind::Map(tag) => Some(feature_map(tag, d, pairs, &mut rng.derive(1))),
        RankKind::Softmax => None,
    };
    let a = attention_matrix(&kind, &q, &k, phi.as_ref())?;
    let svd = singular_values(&a)?;
    Ok(RankReport {
        kind: kind.name().to_string(),
        n,
        d,
        pairs,
        seed,
        tol,
        rank: numerical_rank(&svd.singular_values, tol),
        sweeps: svd.sweeps,
        singular_values: svd.singular_values,
    })
}

/// Runs [`attention_rank`] for every seed in parallel; reports come back sorted by seed.
pub fn rank_sweep(kind: RankKind, setup: RankSetup, seeds: &[u64]) -> Result<Vec<RankReport>> {
    let mut out = seeds
        .par_iter()
        .map(|&s| attention_rank(kind, setup, s))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|r| r.seed);
    Ok(out)
}

pub fn mean_rank(reports: &[RankReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.rank as f64).sum::<f64>() / reports.len() as f64
}
