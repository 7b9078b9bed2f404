//! Dual fusion layer: half-width Q/K/V, a Hedgehog linear-attention spatial branch with a
//! depthwise 3×3 on V, and a channel-attention branch, concatenated and projected back.
//!
//! MACs inside the `dfl.branches` scope match [`dfl_mac_count`] with `C` = branch width
//! (half the layer width). Q/K/V and output projections are counted under `dfl.projections`.

use crate::attention::{linear_attention_from_features, AttentionMaps};
use crate::conv::{conv2d, ConvSpec};
use crate::error::{bail, Result};
use crate::feature_map::{apply_feature_map, FeatureMapKind, HedgehogParams};
use crate::ops::{self, Linear};
use crate::profile;
use crate::tensor::{Matrix, Tensor};

pub const SCOPE_BRANCHES: &str = "dfl.branches";
pub const SCOPE_PROJECTIONS: &str = "dfl.projections";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DflConfig {
    pub heads: usize,
    /// Divide the spatial branch by `φ(q)ᵀΣφ(k)`.
    pub normalized: bool,
    /// Add a fixed sinusoidal position code to Q and K before φ.
    pub positional: bool,
}

impl DflConfig {
    pub fn new(heads: usize) -> Self {
        Self {
            heads,
            normalized: true,
            positional: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharingMode {
    /// Receiver reuses the channel map and recomputes Q, K and φ on its own input.
    Semi,
    /// Receiver also reuses φ(Q) and φ(K); only V is projected.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DflWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Depthwise `(C/2, 1, 3, 3)`.
    pub dw: Tensor,
    /// One parameter set per head, each of dimension `C/(2D)`.
    pub hedgehog: Vec<HedgehogParams>,
    pub out: Linear,
}

impl DflWeights {
    pub fn channels(&self) -> usize {
        self.q.in_dim()
    }

    pub fn branch_width(&self) -> usize {
        self.q.out_dim()
    }

    fn validate(&self, x: &Tensor, cfg: &DflConfig) -> Result<()> {
        let c = x.c();
        if !c.is_multiple_of(2) {
            bail!(Config, "dual fusion needs an even channel count, got {c}");
        }
        let half = c / 2;
        if cfg.heads == 0 || !half.is_multiple_of(cfg.heads) {
            bail!(Config, "branch width {half} not divisible by {} heads", cfg.heads);
        }
        let hd = half / cfg.heads;
        for (name, l) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if l.in_dim() != c || l.out_dim() != half {
                bail!(
                    Dimension,
                    "projection {name} is {}x{}, expected {c}x{half}",
                    l.in_dim(),
                    l.out_dim()
                );
            }
        }
        if self.out.in_dim() != c || self.out.out_dim() != c {
            bail!(Dimension, "output projection must be {c}x{c}");
        }
        if self.dw.shape() != [half, 1, 3, 3] {
            bail!(Dimension, "depthwise kernel {:?}, expected [{half}, 1, 3, 3]", self.dw.shape());
        }
        if self.hedgehog.len() != cfg.heads || self.hedgehog.iter().any(|p| p.dim() != hd) {
            bail!(Dimension, "need {} hedgehog maps of dimension {hd}", cfg.heads);
        }
        Ok(())
    }
}

/// Query/key side products of a sharing layer, per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct QkShare {
    pub tokens: usize,
    pub branch_width: usize,
    pub heads: usize,
    /// `C/2 × C/2` channel attention map per batch item.
    pub channel_maps: Vec<Matrix>,
    /// φ(Q) per batch item and head, indexed `item * heads + head`.
    pub phi_q: Vec<Matrix>,
    pub phi_k: Vec<Matrix>,
}

impl QkShare {
    pub fn batch(&self) -> usize {
        self.channel_maps.len()
    }
}

/// Attention components handed from a sharing module to its receiving partner.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionShare {
    pub map: Option<AttentionMaps>,
    pub qk: QkShare,
}

/// `softmax_rows(QᵀK/√N)` over the channel axis; `C/2 × C/2`.
pub fn channel_map(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let mut a = ops::matmul_at_b(q, k)?;
    let s = 1.0 / (q.rows() as f32).sqrt();
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        row.iter_mut().for_each(|v| *v *= s);
        ops::softmax_in_place(row);
    }
    profile::record_elementwise(4 * a.rows() * a.cols());
    Ok(a)
}

/// Applies a channel map to token features: `V · Aᵀ`, so every output channel is a convex
/// combination of input channels.
pub fn apply_channel_map(v: &Matrix, map: &Matrix) -> Result<Matrix> {
    ops::matmul_a_bt(v, map)
}

pub fn channel_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.rows() != k.rows() || q.cols() != k.cols() || v.cols() != q.cols() {
        bail!(Dimension, "channel attention needs matching q, k, v");
    }
    apply_channel_map(v, &channel_map(q, k)?)
}

fn add_positional(m: &mut Matrix) {
    let c = m.cols();
    for p in 0..m.rows() {
        for (j, v) in m.row_mut(p).iter_mut().enumerate() {
            let freq = 10000f64.powf((j - j % 2) as f64 / c as f64);
            let arg = p as f64 / freq;
            *v += if j % 2 == 0 { arg.sin() } else { arg.cos() } as f32;
        }
    }
    profile::record_elementwise(m.rows() * c);
}

fn head_features(
    q: &Matrix,
    k: &Matrix,
    params: &[HedgehogParams],
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let hd = q.cols() / params.len();
    let mut pq = Vec::with_capacity(params.len());
    let mut pk = Vec::with_capacity(params.len());
    for (h, p) in params.iter().enumerate() {
        let kind = FeatureMapKind::Hedgehog(p.clone());
        pq.push(apply_feature_map(&kind, &q.col_slice(h * hd, hd))?);
        pk.push(apply_feature_map(&kind, &k.col_slice(h * hd, hd))?);
    }
    Ok((pq, pk))
}

/// Per-head Hedgehog linear attention plus the depthwise 3×3 of V.
fn spatial_from_features(
    phi_q: &[Matrix],
    phi_k: &[Matrix],
    v: &Matrix,
    dw: &Tensor,
    h: usize,
    w: usize,
    normalized: bool,
) -> Result<Matrix> {
    let heads = phi_q.len();
    let hd = v.cols() / heads;
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for head in 0..heads {
        let o = linear_attention_from_features(
            &phi_q[head],
            &phi_k[head],
            &v.col_slice(head * hd, hd),
            normalized,
        )?;
        out.set_col_slice(head * hd, &o);
    }
    let v_img = Tensor::from_tokens(std::slice::from_ref(v), h, w)?;
    let local = conv2d(&v_img, dw, None, ConvSpec::depthwise(v.cols()))?.to_tokens(0);
    for (o, l) in out.data_mut().iter_mut().zip(local.data()) {
        *o += l;
    }
    profile::record_elementwise(out.rows() * out.cols());
    Ok(out)
}

/// Spatial branch on explicit token matrices; `h × w` is the token grid for the depthwise conv.
pub fn spatial_branch(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &DflWeights,
    h: usize,
    w: usize,
    normalized: bool,
) -> Result<Matrix> {
    let (pq, pk) = head_features(q, k, &weights.hedgehog)?;
    spatial_from_features(&pq, &pk, v, &weights.dw, h, w, normalized)
}

fn fuse(spatial: &Matrix, channel: &Matrix, out: &Linear) -> Result<Matrix> {
    let half = spatial.cols();
    let mut cat = Matrix::zeros(spatial.rows(), 2 * half);
    cat.set_col_slice(0, spatial);
    cat.set_col_slice(half, channel);
    out.forward(&cat)
}

fn project_qk(x: &Matrix, weights: &DflWeights, cfg: &DflConfig) -> Result<(Matrix, Matrix)> {
    let mut q = weights.q.forward(x)?;
    let mut k = weights.k.forward(x)?;
    if cfg.positional {
        add_positional(&mut q);
        add_positional(&mut k);
    }
    Ok((q, k))
}

/// Full layer; also returns the Q/K-side products for a receiving partner.
pub fn dfl_forward_shared(
    x: &Tensor,
    weights: &DflWeights,
    cfg: &DflConfig,
) -> Result<(Tensor, AttentionShare)> {
    weights.validate(x, cfg)?;
    let [n, _, h, w] = x.shape();
    let mut outs = Vec::with_capacity(n);
    let mut share = QkShare {
        tokens: h * w,
        branch_width: weights.branch_width(),
        heads: cfg.heads,
        channel_maps: Vec::with_capacity(n),
        phi_q: Vec::with_capacity(n * cfg.heads),
        phi_k: Vec::with_capacity(n * cfg.heads),
    };
    for item in 0..n {
        let t = x.to_tokens(item);
        let (q, k, v) = profile::scope(SCOPE_PROJECTIONS, || -> Result<_> {
            let (q, k) = project_qk(&t, weights, cfg)?;
            Ok((q, k, weights.v.forward(&t)?))
        })?;
        let (spatial, channel) = profile::scope(SCOPE_BRANCHES, || -> Result<_> {
            let (pq, pk) = head_features(&q, &k, &weights.hedgehog)?;
            let spatial = spatial_from_features(&pq, &pk, &v, &weights.dw, h, w, cfg.normalized)?;
            let map = channel_map(&q, &k)?;
            let channel = apply_channel_map(&v, &map)?;
            share.channel_maps.push(map);
            share.phi_q.extend(pq);
            share.phi_k.extend(pk);
            Ok((spatial, channel))
        })?;
        outs.push(profile::scope(SCOPE_PROJECTIONS, || {
            fuse(&spatial, &channel, &weights.out)
        })?);
    }
    let y = Tensor::from_tokens(&outs, h, w)?;
    Ok((y, AttentionShare { map: None, qk: share }))
}

/// Layer that reuses a partner's Q/K-side products according to `mode`.
pub fn dfl_forward_receiver(
    x: &Tensor,
    weights: &DflWeights,
    cfg: &DflConfig,
    share: &QkShare,
    mode: SharingMode,
) -> Result<Tensor> {
    weights.validate(x, cfg)?;
    let [n, _, h, w] = x.shape();
    if share.batch() != n
        || share.tokens != h * w
        || share.branch_width != weights.branch_width()
        || share.heads != cfg.heads
    {
        bail!(
            Contract,
            "share recorded for {} items of {} tokens, width {}, {} heads; receiver has {n} items of {} tokens, width {}, {} heads",
            share.batch(),
            share.tokens,
            share.branch_width,
            share.heads,
            h * w,
            weights.branch_width(),
            cfg.heads
        );
    }
    let mut outs = Vec::with_capacity(n);
    for item in 0..n {
        let t = x.to_tokens(item);
        let heads = item * cfg.heads..(item + 1) * cfg.heads;
        let (spatial, channel) = match mode {
            SharingMode::Semi => {
                let (q, k, v) = profile::scope(SCOPE_PROJECTIONS, || -> Result<_> {
                    let (q, k) = project_qk(&t, weights, cfg)?;
                    Ok((q, k, weights.v.forward(&t)?))
                })?;
                profile::scope(SCOPE_BRANCHES, || -> Result<_> {
                    let spatial = spatial_branch(&q, &k, &v, weights, h, w, cfg.normalized)?;
                    let channel = apply_channel_map(&v, &share.channel_maps[item])?;
                    Ok((spatial, channel))
                })?
            }
            SharingMode::Full => {
                let v = profile::scope(SCOPE_PROJECTIONS, || weights.v.forward(&t))?;
                profile::scope(SCOPE_BRANCHES, || -> Result<_> {
                    let spatial = spatial_from_features(
                        &share.phi_q[heads.clone()],
                        &share.phi_k[heads.clone()],
                        &v,
                        &weights.dw,
                        h,
                        w,
                        cfg.normalized,
                    )?;
                    let channel = apply_channel_map(&v, &share.channel_maps[item])?;
                    Ok((spatial, channel))
                })?
            }
        };
        outs.push(profile::scope(SCOPE_PROJECTIONS, || {
            fuse(&spatial, &channel, &weights.out)
        })?);
    }
    Tensor::from_tokens(&outs, h, w)
}

/// `2C²HW + 6HW·C²/D + 9HW·C` with `C` the branch width.
pub fn dfl_mac_count(c: u64, h: u64, w: u64, d: u64) -> u64 {
    let hw = h * w;
    2 * c * c * hw + 6 * hw * c * c / d + 9 * hw * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::linear_attention_linear;
    use crate::profile::count_macs;
    use crate::rng::Rng;

    fn weights(c: usize, heads: usize, rng: &mut Rng) -> DflWeights {
        let half = c / 2;
        let lin = |i, o, bias: bool, rng: &mut Rng| {
            let std = 1.0 / (i as f32).sqrt();
            Linear::new(Matrix::randn(i, o, std, rng), bias.then(|| vec![0.05; o])).unwrap()
        };
        DflWeights {
            q: lin(c, half, false, rng),
            k: lin(c, half, false, rng),
            v: lin(c, half, false, rng),
            dw: Tensor::randn([half, 1, 3, 3], 0.3, rng),
            hedgehog: (0..heads).map(|_| HedgehogParams::init(half / heads, 1, rng)).collect(),
            out: lin(c, c, true, rng),
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(dfl_mac_count(1, 1, 1, 1), 17);
        assert_eq!(dfl_mac_count(32, 16, 16, 4), 991232);
        assert_eq!(dfl_mac_count(64, 8, 8, 8), 757760);
    }

    #[test]
    fn branch_macs_match_closed_form() {
        let mut rng = Rng::new(1);
        for (c, h, w, d) in [(32usize, 16usize, 16usize, 4usize), (64, 8, 8, 8), (16, 6, 10, 2)] {
            let wts = weights(2 * c, d, &mut rng);
            let x = Tensor::randn([1, 2 * c, h, w], 1.0, &mut rng);
            let (_, rep) = count_macs(|| dfl_forward_shared(&x, &wts, &DflConfig::new(d)).unwrap());
            assert_eq!(
                rep.scope(SCOPE_BRANCHES),
                dfl_mac_count(c as u64, h as u64, w as u64, d as u64)
            );
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = Rng::new(2);
        let wts = weights(16, 2, &mut rng);
        let x = Tensor::zeros([1, 16, 4, 4]);
        let (y, _) = dfl_forward_shared(&x, &wts, &DflConfig::new(2)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (v - 0.05).abs() < 1e-7));
    }

    #[test]
    fn spatial_branch_without_dw_is_linear_attention() {
        let mut rng = Rng::new(3);
        let mut wts = weights(16, 1, &mut rng);
        wts.dw = Tensor::zeros([8, 1, 3, 3]);
        let (q, k, v) = (
            Matrix::randn(20, 8, 1.0, &mut rng),
            Matrix::randn(20, 8, 1.0, &mut rng),
            Matrix::randn(20, 8, 1.0, &mut rng),
        );
        let got = spatial_branch(&q, &k, &v, &wts, 4, 5, true).unwrap();
        let kind = FeatureMapKind::Hedgehog(wts.hedgehog[0].clone());
        let want = linear_attention_linear(&q, &k, &v, &kind).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn channel_attention_is_convex() {
        let mut rng = Rng::new(4);
        let (q, k, v) = (
            Matrix::randn(30, 6, 1.0, &mut rng),
            Matrix::randn(30, 6, 1.0, &mut rng),
            Matrix::randn(30, 6, 1.0, &mut rng),
        );
        let out = channel_attention(&q, &k, &v).unwrap();
        for t in 0..30 {
            let row = v.row(t);
            let (lo, hi) = row.iter().fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
            for &o in out.row(t) {
                assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
            }
        }
        let zero = channel_attention(&q, &k, &Matrix::zeros(30, 6)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orthogonal_columns_give_dominant_diagonal() {
        let n = 16;
        let q = Matrix::from_fn(n, 4, |r, c| if r % 4 == c { 2.0 } else { 0.0 });
        let map = channel_map(&q, &q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(map.get(i, i) > map.get(i, j));
                }
            }
            let gram_diag = 4.0 * 4.0 / (n as f64).sqrt();
            let want = gram_diag.exp() / (gram_diag.exp() + 3.0);
            assert!((map.get(i, i) as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn receiver_reproduces_sharer_on_same_input() {
        let mut rng = Rng::new(5);
        let wts = weights(32, 4, &mut rng);
        let x = Tensor::randn([2, 32, 8, 8], 1.0, &mut rng);
        let cfg = DflConfig::new(4);
        let (y, share) = dfl_forward_shared(&x, &wts, &cfg).unwrap();
        for mode in [SharingMode::Semi, SharingMode::Full] {
            let r = dfl_forward_receiver(&x, &wts, &cfg, &share.qk, mode).unwrap();
            assert_eq!(r, y);
        }
    }

    #[test]
    fn receiver_is_cheaper_and_checks_shapes() {
        let mut rng = Rng::new(6);
        let wts = weights(32, 4, &mut rng);
        let x = Tensor::randn([1, 32, 16, 16], 1.0, &mut rng);
        let cfg = DflConfig::new(4);
        let ((_, share), shared) = count_macs(|| dfl_forward_shared(&x, &wts, &cfg).unwrap());
        let x2 = Tensor::randn([1, 32, 16, 16], 1.0, &mut rng);
        let mut last = shared.total_macs();
        for mode in [SharingMode::Semi, SharingMode::Full] {
            let (r, rep) = count_macs(|| dfl_forward_receiver(&x2, &wts, &cfg, &share.qk, mode).unwrap());
            assert!(r.is_finite());
            assert!(rep.total_macs() < last);
            last = rep.total_macs();
        }
        let small = Tensor::randn([1, 32, 8, 8], 1.0, &mut rng);
        assert!(matches!(
            dfl_forward_receiver(&small, &wts, &cfg, &share.qk, SharingMode::Semi),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = Rng::new(7);
        let wts = weights(16, 2, &mut rng);
        let x = Tensor::zeros([1, 15, 4, 4]);
        assert!(matches!(
            dfl_forward_shared(&x, &wts, &DflConfig::new(2)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn macs_linear_in_pixels() {
        let mut rng = Rng::new(8);
        let wts = weights(16, 2, &mut rng);
        let cfg = DflConfig::new(2);
        let count = |h: usize| {
            let x = Tensor::randn([1, 16, h, h], 1.0, &mut Rng::new(h as u64));
            count_macs(|| dfl_forward_shared(&x, &wts, &cfg).unwrap()).1.total_macs()
        };
        let (a, b, c) = (count(4), count(8), count(16));
        assert_eq!(b, 4 * a);
        assert_eq!(c, 16 * a);
    }

    #[test]
    fn positional_flag_changes_output() {
        let mut rng = Rng::new(9);
        let wts = weights(16, 2, &mut rng);
        let x = Tensor::randn([1, 16, 4, 4], 1.0, &mut rng);
        let mut cfg = DflConfig::new(2);
        let (a, _) = dfl_forward_shared(&x, &wts, &cfg).unwrap();
        cfg.positional = true;
        let (b, _) = dfl_forward_shared(&x, &wts, &cfg).unwrap();
        assert_ne!(a, b);
        assert!(b.is_finite());
    }
}
