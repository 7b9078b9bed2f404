//! Cross-module invariants: SVD against power iteration, MAC composition, counting
//! transparency, linear/tiled attention sweeps and the statistical rank ordering.

use proptest::prelude::*;

use crate::analysis::{attention_matrix, rank_sweep, singular_values, ColMatrix, RankKind, RankSetup};
use crate::attention::{
    linear_attention_linear, linear_attention_quadratic, softmax_attention, tiled_exact_attention,
    windowed_mhsa, AttentionConfig, Engine, TileConfig, WmsaWeights,
};
use crate::conv::{conv2d, ConvSpec};
use crate::dual_fusion::{dfl_forward_shared, DflConfig, DflWeights};
use crate::feature_map::{FeatureMapKind, FeatureMapTag, HedgehogParams};
use crate::ops::{self, Linear};
use crate::profile::count_macs;
use crate::{Matrix, Rng, Tensor};

fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
    let scale = b.data().iter().fold(0f64, |m, &v| m.max(v.abs() as f64)).max(1e-30);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

fn map_for(tag: FeatureMapTag, d: usize, rng: &mut Rng) -> FeatureMapKind {
    match tag {
        FeatureMapTag::Identity => FeatureMapKind::Identity,
        FeatureMapTag::Relu => FeatureMapKind::Relu,
        FeatureMapTag::EluPlusOne => FeatureMapKind::EluPlusOne,
        FeatureMapTag::SymRelu => FeatureMapKind::SymRelu,
        FeatureMapTag::Hedgehog => FeatureMapKind::Hedgehog(HedgehogParams::init(d, 1 + d % 2, rng)),
    }
}

fn bits(m: &[f32]) -> Vec<u32> {
    m.iter().map(|v| v.to_bits()).collect()
}

/// Top `k` eigenvalues of the Gram matrix `AᵀA` by orthogonal subspace iteration.
fn top_gram_eigenvalues(a: &ColMatrix, k: usize, iters: usize) -> Vec<f64> {
    let (m, n) = (a.rows, a.cols);
    let p = (k + 5).min(n);
    let gram: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            (0..m).map(|t| a.get(t, r) * a.get(t, c)).sum()
        })
        .collect();
    let mut rng = Rng::new(99);
    let mut basis: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.normal_f64()).collect()).collect();
    let orthonormalize = |b: &mut Vec<Vec<f64>>| {
        for i in 0..b.len() {
            for j in 0..i {
                let dot: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let bj = b[j].clone();
                b[i].iter_mut().zip(&bj).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = b[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            b[i].iter_mut().for_each(|x| *x /= norm);
        }
    };
    let apply = |v: &[f64]| -> Vec<f64> { (0..n).map(|r| (0..n).map(|c| gram[r * n + c] * v[c]).sum()).collect() };
    orthonormalize(&mut basis);
    for _ in 0..iters {
        basis = basis.iter().map(|v| apply(v)).collect();
        orthonormalize(&mut basis);
    }
    let mut rq: Vec<f64> = basis
        .iter()
        .map(|v| apply(v).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect();
    rq.sort_by(|x, y| y.total_cmp(x));
    rq.truncate(k);
    rq
}

#[test]
fn svd_top_values_match_power_iteration() {
    let mut rng = Rng::new(1);
    let vals: Vec<f64> = (0..40 * 24).map(|_| rng.normal_f64()).collect();
    let gaussian = ColMatrix::from_fn(40, 24, |r, c| vals[r * 24 + c]);
    let mut rng = Rng::new(2);
    let q: Vec<Vec<f64>> = (0..48).map(|_| (0..8).map(|_| rng.normal_f64()).collect()).collect();
    let k: Vec<Vec<f64>> = (0..48).map(|_| (0..8).map(|_| rng.normal_f64()).collect()).collect();
    let softmax = attention_matrix(&RankKind::Softmax, &q, &k, None).unwrap();
    let relu = attention_matrix(&RankKind::Map(FeatureMapTag::Relu), &q, &k, Some(&FeatureMapKind::Relu)).unwrap();
    for a in [gaussian, softmax, relu] {
        let sv = singular_values(&a).unwrap().singular_values;
        let eig = top_gram_eigenvalues(&a, 3, 3000);
        for (s, e) in sv.iter().zip(&eig) {
            let want = e.sqrt();
            assert!((s - want).abs() <= 1e-6 * want, "svd {s} vs power iteration {want}");
        }
    }
}

#[test]
fn mac_counter_is_compositional() {
    let mut rng = Rng::new(3);
    let x = Tensor::randn([1, 8, 10, 12], 1.0, &mut rng);
    let w3 = Tensor::randn([8, 8, 3, 3], 0.2, &mut rng);
    let dw = Tensor::randn([8, 1, 5, 5], 0.2, &mut rng);
    let f = |t: &Tensor| conv2d(t, &w3, None, ConvSpec::default()).unwrap();
    let g = |t: &Tensor| conv2d(t, &dw, None, ConvSpec::depthwise(8)).unwrap();
    let (gx, cg) = count_macs(|| g(&x));
    let (_, cf) = count_macs(|| f(&gx));
    let (_, cfg) = count_macs(|| f(&g(&x)));
    assert_eq!(cfg.total_macs(), cf.total_macs() + cg.total_macs());
    assert_eq!(cfg.elementwise_ops, cf.elementwise_ops + cg.elementwise_ops);
    let mut absorbed = cg.clone();
    absorbed.absorb(&cf);
    assert_eq!(absorbed.total_macs(), cfg.total_macs());

    // matmul chain: (n×k)(k×m) then (n×m)(m×p)
    let a = Matrix::randn(7, 5, 1.0, &mut rng);
    let b = Matrix::randn(5, 9, 1.0, &mut rng);
    let c = Matrix::randn(9, 4, 1.0, &mut rng);
    let (_, rep) = count_macs(|| ops::matmul(&ops::matmul(&a, &b).unwrap(), &c).unwrap());
    assert_eq!(rep.matmul_macs, 7 * 5 * 9 + 7 * 9 * 4);
}

fn dfl_weights(c: usize, heads: usize, rng: &mut Rng) -> DflWeights {
    let half = c / 2;
    let lin = |i: usize, o: usize, rng: &mut Rng| Linear::new(Matrix::randn(i, o, 0.3, rng), None).unwrap();
    DflWeights {
        q: lin(c, half, rng),
        k: lin(c, half, rng),
        v: lin(c, half, rng),
        dw: Tensor::randn([half, 1, 3, 3], 0.3, rng),
        hedgehog: (0..heads).map(|_| HedgehogParams::init(half / heads, 1, rng)).collect(),
        out: lin(c, c, rng),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_paths_agree(
        n in prop::sample::select(vec![1usize, 2, 8, 64, 256]),
        tag in prop::sample::select(vec![
            FeatureMapTag::Relu,
            FeatureMapTag::EluPlusOne,
            FeatureMapTag::SymRelu,
            FeatureMapTag::Hedgehog,
        ]),
        d in 1usize..=48,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let phi = map_for(tag, d, &mut rng);
        let q = Matrix::randn(n, d, 1.0, &mut rng);
        let k = Matrix::randn(n, d, 1.0, &mut rng);
        let v = Matrix::randn(n, d, 1.0, &mut rng);
        let lin = linear_attention_linear(&q, &k, &v, &phi).unwrap();
        let quad = linear_attention_quadratic(&q, &k, &v, &phi).unwrap();
        prop_assert!(max_rel(&lin, &quad) <= 1e-5);
    }

    #[test]
    fn tiled_matches_naive(
        n in 1usize..200,
        m in 1usize..200,
        tr in 1usize..80,
        tc in 1usize..80,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let q = Matrix::randn(n, 16, 1.0, &mut rng);
        let k = Matrix::randn(m, 16, 1.0, &mut rng);
        let v = Matrix::randn(m, 12, 1.0, &mut rng);
        let naive = softmax_attention(&q, &k, &v, 0.25).unwrap();
        let tiled = tiled_exact_attention(&q, &k, &v, 0.25, TileConfig::new(tr, tc)).unwrap();
        prop_assert!(max_rel(&tiled, &naive) <= 1e-5);
    }

    #[test]
    fn counting_does_not_change_results(seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
        let mut rng = Rng::new(seed);
        let wts = dfl_weights(16, 2, &mut rng);
        let x = Tensor::randn([1, 16, h, w], 1.0, &mut rng);
        let cfg = DflConfig::new(2);
        let (plain, _) = dfl_forward_shared(&x, &wts, &cfg).unwrap();
        let ((counted, _), _) = count_macs(|| dfl_forward_shared(&x, &wts, &cfg).unwrap());
        prop_assert_eq!(bits(plain.data()), bits(counted.data()));

        let acfg = AttentionConfig::new(16, 2, Some(4)).unwrap();
        let lin = |rng: &mut Rng| Linear::new(Matrix::randn(16, 16, 0.25, rng), Some(vec![0.0; 16])).unwrap();
        let aw = WmsaWeights { q: lin(&mut rng), k: lin(&mut rng), v: lin(&mut rng), proj: lin(&mut rng) };
        let engine = Engine::Tiled(TileConfig::new(5, 3));
        let (a, _) = windowed_mhsa(&x, &acfg, &aw, engine, false).unwrap();
        let ((b, _), _) = count_macs(|| windowed_mhsa(&x, &acfg, &aw, engine, false).unwrap());
        prop_assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn weak_ordering_holds_for_most_seeds() {
    let setup = RankSetup::new(256, 48);
    let seeds: Vec<u64> = (0..100).collect();
    let ranks = |tag| -> Vec<usize> {
        rank_sweep(RankKind::Map(tag), setup, &seeds)
            .unwrap()
            .iter()
            .map(|r| r.rank)
            .collect()
    };
    let relu = ranks(FeatureMapTag::Relu);
    let sym = ranks(FeatureMapTag::SymRelu);
    let hh = ranks(FeatureMapTag::Hedgehog);
    let ordered = (0..seeds.len())
        .filter(|&i| hh[i] >= sym[i] && sym[i] >= relu[i])
        .count();
    assert!(ordered >= 95, "ordering held for {ordered} of 100 seeds");
}
