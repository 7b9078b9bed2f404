//! Attention engines on token matrices and the windowed multi-head wrapper.
//!
//! * [`softmax_attention`]: reference softmax attention, materializes `N × N` scores
//! * [`linear_attention_quadratic`]: kernelized attention through the explicit `N × N` kernel matrix
//! * [`linear_attention_linear`]: the same result from the key-side sums `Σφ(k)vᵀ` and `Σφ(k)`
//! * [`tiled_exact_attention`]: softmax attention streamed over tiles with an online softmax

use crate::error::{bail, Result};
use crate::feature_map::{apply_feature_map, FeatureMapKind};
use crate::ops::{self, Linear, EPS};
use crate::profile;
use crate::tensor::{Matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub window: Option<usize>,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, window: Option<usize>) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            bail!(Config, "{channels} channels not divisible by {heads} heads");
        }
        if window == Some(0) {
            bail!(Config, "window size must be >= 1");
        }
        Ok(Self {
            heads,
            head_dim: channels / heads,
            window,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }
}

/// Query/key tile sizes for [`tiled_exact_attention`]. Only affects speed and memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileConfig {
    pub fn new(tile_rows: usize, tile_cols: usize) -> Self {
        assert!(tile_rows >= 1 && tile_cols >= 1, "tile sizes must be >= 1");
        Self {
            tile_rows,
            tile_cols,
        }
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        Self::new(64, 64)
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.rows() == 0 {
        bail!(Dimension, "attention needs at least one token");
    }
    if k.rows() != v.rows() || q.cols() != k.cols() {
        bail!(
            Dimension,
            "q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        );
    }
    Ok(())
}

/// Row-stochastic `softmax(scale·QKᵀ)`.
pub fn attention_map(q: &Matrix, k: &Matrix, scale: f32) -> Result<Matrix> {
    let mut scores = ops::matmul_a_bt(q, k)?;
    let s = scale as f64;
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * s));
        let mut denom = 0f64;
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| {
                let e = (v as f64 * s - max).exp();
                denom += e;
                e
            })
            .collect();
        for (o, e) in row.iter_mut().zip(exps) {
            *o = (e / denom) as f32;
        }
    }
    profile::record_elementwise(3 * scores.rows() * scores.cols());
    Ok(scores)
}

/// `o_i = Σ_j softmax_j(scale·q_iᵀk_j) v_j`.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f32) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let (n, m) = (q.rows(), k.rows());
    let _scores = profile::temp(n * m);
    let map = attention_map(q, k, scale)?;
    ops::matmul(&map, v)
}

fn guarded(den: f64) -> f64 {
    if den.abs() < EPS as f64 {
        profile::record_guard(1);
        den + (EPS as f64).copysign(den)
    } else {
        den
    }
}

/// Kernelized attention through the explicit `N × M` kernel matrix `φ(Q)φ(K)ᵀ`.
pub fn linear_attention_quadratic(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kind: &FeatureMapKind,
) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let pq = apply_feature_map(kind, q)?;
    let pk = apply_feature_map(kind, k)?;
    let (n, m, r, d) = (q.rows(), k.rows(), pq.cols(), v.cols());
    let _kmat = profile::temp(n * m);
    profile::record_matmul(n, r, m);
    profile::record_matmul(n, m, d);
    profile::record_elementwise(n * m);
    let mut kernel = vec![0f64; m];
    let mut acc = vec![0f64; d];
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for (j, kv) in kernel.iter_mut().enumerate() {
            *kv = ops::dot(pq.row(i), pk.row(j));
        }
        let den = guarded(kernel.iter().sum());
        acc.fill(0.0);
        for (j, &kv) in kernel.iter().enumerate() {
            for (a, &vv) in acc.iter_mut().zip(v.row(j)) {
                *a += kv * vv as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / den) as f32;
        }
    }
    Ok(out)
}

/// Kernelized attention via `S = Σ_j φ(k_j)v_jᵀ`, `z = Σ_j φ(k_j)`, computed once for all queries.
pub fn linear_attention_linear(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kind: &FeatureMapKind,
) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let _pq = profile::temp(q.rows() * kind.output_dim(q.cols()));
    let pq = apply_feature_map(kind, q)?;
    let _pk = profile::temp(k.rows() * kind.output_dim(k.cols()));
    let pk = apply_feature_map(kind, k)?;
    linear_attention_from_features(&pq, &pk, v, true)
}

/// Linear attention on precomputed features. With `normalize = false` the denominator is dropped.
pub fn linear_attention_from_features(
    phi_q: &Matrix,
    phi_k: &Matrix,
    v: &Matrix,
    normalize: bool,
) -> Result<Matrix> {
    if phi_q.cols() != phi_k.cols() || phi_k.rows() != v.rows() {
        bail!(
            Dimension,
            "φ(q) {}x{}, φ(k) {}x{}, v {}x{}",
            phi_q.rows(),
            phi_q.cols(),
            phi_k.rows(),
            phi_k.cols(),
            v.rows(),
            v.cols()
        );
    }
    let (n, m, r, d) = (phi_q.rows(), phi_k.rows(), phi_q.cols(), v.cols());
    let _state = profile::temp(r * d + r);
    // S = φ(K)ᵀV and z = φ(K)ᵀ1
    profile::record_matmul(r, m, d);
    profile::record_elementwise(m * r);
    let mut s = vec![0f64; r * d];
    let mut z = vec![0f64; r];
    for j in 0..m {
        let fk = phi_k.row(j);
        let vr = v.row(j);
        for (a, &f) in fk.iter().enumerate() {
            let f = f as f64;
            z[a] += f;
            for (sv, &vv) in s[a * d..(a + 1) * d].iter_mut().zip(vr) {
                *sv += f * vv as f64;
            }
        }
    }
    profile::record_matmul(n, r, d);
    if normalize {
        profile::record_elementwise(n * r + n * d);
    }
    let mut out = Matrix::zeros(n, d);
    let mut acc = vec![0f64; d];
    for i in 0..n {
        let fq = phi_q.row(i);
        acc.fill(0.0);
        let mut den = 0f64;
        for (a, &f) in fq.iter().enumerate() {
            let f = f as f64;
            den += f * z[a];
            for (o, &sv) in acc.iter_mut().zip(&s[a * d..(a + 1) * d]) {
                *o += f * sv;
            }
        }
        let den = if normalize { guarded(den) } else { 1.0 };
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / den) as f32;
        }
    }
    Ok(out)
}

/// Exact softmax attention streamed over `tile_rows × tile_cols` blocks with a running
/// max and running denominator per query; never holds more than one score tile.
pub fn tiled_exact_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f32,
    tiles: TileConfig,
) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let (n, m, d) = (q.rows(), k.rows(), v.cols());
    let tr = tiles.tile_rows.min(n);
    let tc = tiles.tile_cols.min(m);
    let s = scale as f64;
    let _work = profile::temp(tr * tc + tr * d + 2 * tr);
    let mut out = Matrix::zeros(n, d);
    let mut scores = vec![0f64; tr * tc];
    let mut acc = vec![0f64; tr * d];
    let mut run_max = vec![0f64; tr];
    let mut run_den = vec![0f64; tr];
    for i0 in (0..n).step_by(tr) {
        let rows = tr.min(n - i0);
        acc[..rows * d].fill(0.0);
        run_max[..rows].fill(f64::NEG_INFINITY);
        run_den[..rows].fill(0.0);
        for j0 in (0..m).step_by(tc) {
            let cols = tc.min(m - j0);
            profile::record_matmul(rows, q.cols(), cols);
            profile::record_matmul(rows, cols, d);
            profile::record_elementwise(3 * rows * cols);
            for r in 0..rows {
                let qr = q.row(i0 + r);
                let srow = &mut scores[r * tc..r * tc + cols];
                let mut tile_max = f64::NEG_INFINITY;
                for (c, sv) in srow.iter_mut().enumerate() {
                    *sv = ops::dot(qr, k.row(j0 + c)) * s;
                    tile_max = tile_max.max(*sv);
                }
                let new_max = run_max[r].max(tile_max);
                let correction = (run_max[r] - new_max).exp();
                run_den[r] *= correction;
                let arow = &mut acc[r * d..(r + 1) * d];
                if correction != 1.0 {
                    arow.iter_mut().for_each(|a| *a *= correction);
                }
                for (c, sv) in srow.iter().enumerate() {
                    let p = (sv - new_max).exp();
                    run_den[r] += p;
                    for (a, &vv) in arow.iter_mut().zip(v.row(j0 + c)) {
                        *a += p * vv as f64;
                    }
                }
                run_max[r] = new_max;
            }
        }
        for r in 0..rows {
            let den = run_den[r];
            for (o, a) in out.row_mut(i0 + r).iter_mut().zip(&acc[r * d..(r + 1) * d]) {
                *o = (a / den) as f32;
            }
        }
    }
    Ok(out)
}

/// Which softmax engine a windowed attention layer runs inside each window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Naive,
    Tiled(TileConfig),
}

/// Per-window, per-head softmax maps, laid out `(windows, heads, tokens, tokens)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub windows: usize,
    pub heads: usize,
    pub tokens: usize,
    pub data: Vec<f32>,
}

impl AttentionMaps {
    pub fn shape(&self) -> [usize; 4] {
        [self.windows, self.heads, self.tokens, self.tokens]
    }

    pub fn map(&self, window: usize, head: usize) -> Matrix {
        let t2 = self.tokens * self.tokens;
        let start = (window * self.heads + head) * t2;
        Matrix::from_parts(self.tokens, self.tokens, self.data[start..start + t2].to_vec())
    }
}

/// QKV and output projections of a windowed attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WmsaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

/// Projections needed by a layer that receives its attention maps from elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WmsaReceiverWeights {
    pub v: Linear,
    pub proj: Linear,
}

fn window_of(cfg: &AttentionConfig) -> Result<usize> {
    match cfg.window {
        Some(w) => Ok(w),
        None => bail!(Config, "windowed attention needs a window size"),
    }
}

fn check_channels(x: &Tensor, cfg: &AttentionConfig, proj: &Linear) -> Result<()> {
    if x.c() != cfg.channels() || proj.out_dim() != x.c() {
        bail!(
            Dimension,
            "attention configured for {} channels ({} heads), input has {}",
            cfg.channels(),
            cfg.heads,
            x.c()
        );
    }
    Ok(())
}

/// Zero-pad, partition, run `per_window` on each window's token matrix, merge, crop.
fn for_each_window(
    x: &Tensor,
    ws: usize,
    out_channels: usize,
    mut per_window: impl FnMut(usize, &Matrix) -> Result<Matrix>,
) -> Result<Tensor> {
    let [n, _, h, w] = x.shape();
    let padded = ops::pad_to_multiple(x, ws);
    let [_, _, ph, pw] = padded.shape();
    let windows = ops::window_partition(&padded, ws)?;
    let mut outs = Vec::with_capacity(windows.n());
    for win in 0..windows.n() {
        outs.push(per_window(win, &windows.to_tokens(win))?);
    }
    let merged_windows = Tensor::from_tokens(&outs, ws, ws)?;
    debug_assert_eq!(merged_windows.c(), out_channels);
    let merged = ops::window_merge(&merged_windows, n, ph, pw)?;
    ops::crop(&merged, h, w)
}

/// Windowed multi-head self-attention. With `Engine::Naive` and `return_maps`, the per-window
/// softmax maps are returned as well.
pub fn windowed_mhsa(
    x: &Tensor,
    cfg: &AttentionConfig,
    weights: &WmsaWeights,
    engine: Engine,
    return_maps: bool,
) -> Result<(Tensor, Option<AttentionMaps>)> {
    let ws = window_of(cfg)?;
    check_channels(x, cfg, &weights.proj)?;
    if return_maps && engine != Engine::Naive {
        bail!(Config, "attention maps are only available from the naive engine");
    }
    let (heads, hd) = (cfg.heads, cfg.head_dim);
    let tokens = ws * ws;
    let mut maps: Vec<f32> = Vec::new();
    let scale = cfg.scale();
    let y = for_each_window(x, ws, x.c(), |_, t| {
        let q = weights.q.forward(t)?;
        let k = weights.k.forward(t)?;
        let v = weights.v.forward(t)?;
        let mut heads_out = Matrix::zeros(tokens, cfg.channels());
        for h in 0..heads {
            let (qh, kh, vh) = (q.col_slice(h * hd, hd), k.col_slice(h * hd, hd), v.col_slice(h * hd, hd));
            let o = match engine {
                Engine::Naive => {
                    let _scores = profile::temp(tokens * tokens);
                    let a = attention_map(&qh, &kh, scale)?;
                    let o = ops::matmul(&a, &vh)?;
                    if return_maps {
                        maps.extend_from_slice(a.data());
                    }
                    o
                }
                Engine::Tiled(tiles) => tiled_exact_attention(&qh, &kh, &vh, scale, tiles)?,
            };
            heads_out.set_col_slice(h * hd, &o);
        }
        weights.proj.forward(&heads_out)
    })?;
    let maps = return_maps.then(|| {
        let windows = maps.len() / (heads * tokens * tokens);
        AttentionMaps {
            windows,
            heads,
            tokens,
            data: maps,
        }
    });
    Ok((y, maps))
}

/// Windowed attention that reuses maps computed by a paired layer: only `V` and the
/// output projection are evaluated.
pub fn windowed_mhsa_with_maps(
    x: &Tensor,
    cfg: &AttentionConfig,
    weights: &WmsaReceiverWeights,
    maps: &AttentionMaps,
) -> Result<Tensor> {
    let ws = window_of(cfg)?;
    check_channels(x, cfg, &weights.proj)?;
    let [n, _, h, w] = x.shape();
    let expected = [n * h.div_ceil(ws) * w.div_ceil(ws), cfg.heads, ws * ws, ws * ws];
    if maps.shape() != expected {
        bail!(
            Contract,
            "shared attention maps {:?} do not match receiver shape {:?}",
            maps.shape(),
            expected
        );
    }
    let hd = cfg.head_dim;
    for_each_window(x, ws, x.c(), |win, t| {
        let v = weights.v.forward(t)?;
        let mut heads_out = Matrix::zeros(t.rows(), cfg.channels());
        for h in 0..cfg.heads {
            let o = ops::matmul(&maps.map(win, h), &v.col_slice(h * hd, hd))?;
            heads_out.set_col_slice(h * hd, &o);
        }
        weights.proj.forward(&heads_out)
    })
}
