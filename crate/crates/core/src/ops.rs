//! Primitive numeric ops on [`Tensor`] and [`Matrix`].
//!
//! Reductions accumulate in f64 and round once on the way out.

use crate::error::{bail, Result};
use crate::profile;
use crate::tensor::{Matrix, Tensor};

/// Layer-norm and attention-denominator epsilon.
pub const EPS: f32 = 1e-6;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        bail!(
            Dimension,
            "matmul {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    profile::record_matmul(n, k, m);
    let mut out = Matrix::zeros(n, m);
    let mut acc = vec![0f64; m];
    for i in 0..n {
        acc.fill(0.0);
        for (kk, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (s, &bv) in acc.iter_mut().zip(b.row(kk)) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        bail!(
            Dimension,
            "matmul {}x{} · ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
    }
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    profile::record_matmul(n, k, m);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.set(i, j, dot(ar, b.row(j)) as f32);
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        bail!(
            Dimension,
            "matmul ({}x{})ᵀ · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
    }
    let (n, k, m) = (a.cols(), a.rows(), b.cols());
    profile::record_matmul(n, k, m);
    let mut acc = vec![0f64; n * m];
    for r in 0..k {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let dst = &mut acc[i * m..(i + 1) * m];
            for (s, &bv) in dst.iter_mut().zip(br) {
                *s += av * bv as f64;
            }
        }
    }
    Ok(Matrix::from_parts(n, m, acc.into_iter().map(|v| v as f32).collect()))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_lastdim(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        softmax_in_place(out.row_mut(r));
    }
    profile::record_elementwise(3 * x.rows() * x.cols());
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut exps = Vec::with_capacity(row.len());
    let mut denom = 0f64;
    for &v in row.iter() {
        let e = ((v - max) as f64).exp();
        denom += e;
        exps.push(e);
    }
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / denom) as f32;
    }
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

pub fn gelu(x: &Tensor) -> Tensor {
    profile::record_elementwise(x.len());
    x.map(gelu_scalar)
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, |x, y| x * y)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        bail!(
            Dimension,
            "elementwise shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    profile::record_elementwise(a.len());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    profile::record_elementwise(a.len());
    a.map(|v| v * s)
}

/// Layer norm over the channel axis for every pixel, with per-channel affine.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c {
        bail!(
            Dimension,
            "layer_norm affine length {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        );
    }
    profile::record_elementwise(4 * x.len());
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mean = 0f64;
            for ch in 0..c {
                mean += src[base + ch * hw + p] as f64;
            }
            mean /= c as f64;
            let mut var = 0f64;
            for ch in 0..c {
                let d = src[base + ch * hw + p] as f64 - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + EPS as f64).sqrt();
            for ch in 0..c {
                let i = base + ch * hw + p;
                let z = (src[i] as f64 - mean) * inv;
                dst[i] = (z * gamma[ch] as f64 + beta[ch] as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Depth-to-space: `(n, c·r², h, w) → (n, c, h·r, w·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        bail!(Config, "pixel_shuffle: {c} channels not divisible by {r}²");
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros([n, oc, h * r, w * r]);
    for b in 0..n {
        for co in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            out.set(b, co, y * r + i, xx * r + j, x.at(b, ci, y, xx));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        bail!(Dimension, "pixel_unshuffle: {h}x{w} not divisible by {r}");
    }
    let mut out = Tensor::zeros([n, c * r * r, h / r, w / r]);
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h / r {
                        for xx in 0..w / r {
                            out.set(b, ci, y, xx, x.at(b, co, y * r + i, xx * r + j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Splits `(n, c, h, w)` into `(n·(h/ws)·(w/ws), c, ws, ws)` windows, row-major over windows.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        bail!(Dimension, "window {ws} does not divide {h}x{w}");
    }
    let (nh, nw) = (h / ws, w / ws);
    let mut out = Tensor::zeros([n * nh * nw, c, ws, ws]);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                let win = (b * nh + wy) * nw + wx;
                for ch in 0..c {
                    for y in 0..ws {
                        let src = x.index(b, ch, wy * ws + y, wx * ws);
                        let dst = out.index(win, ch, y, 0);
                        let row = x.data()[src..src + ws].to_vec();
                        out.data_mut()[dst..dst + ws].copy_from_slice(&row);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let [nwin, c, ws, ws2] = windows.shape();
    if ws != ws2 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) || nwin != n * (h / ws) * (w / ws) {
        bail!(
            Dimension,
            "cannot merge {:?} into ({n}, {c}, {h}, {w})",
            windows.shape()
        );
    }
    let (nh, nw) = (h / ws, w / ws);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                let win = (b * nh + wy) * nw + wx;
                for ch in 0..c {
                    for y in 0..ws {
                        let src = windows.index(win, ch, y, 0);
                        let dst = out.index(b, ch, wy * ws + y, wx * ws);
                        out.data_mut()[dst..dst + ws]
                            .copy_from_slice(&windows.data()[src..src + ws]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Zero-pads bottom/right so both spatial sizes are multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = x.index(b, ch, y, 0);
                let dst = out.index(b, ch, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

/// Keeps the top-left `h × w` region.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, xh, xw] = x.shape();
    if h > xh || w > xw {
        bail!(Dimension, "crop {h}x{w} larger than {xh}x{xw}");
    }
    if h == xh && w == xw {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = x.index(b, ch, y, 0);
                let dst = out.index(b, ch, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Splits channels into `[0, at)` and `[at, c)`. The second part is `None` when empty.
pub fn split_channels(x: &Tensor, at: usize) -> Result<(Tensor, Option<Tensor>)> {
    let [n, c, h, w] = x.shape();
    if at == 0 || at > c {
        bail!(Dimension, "channel split at {at} of {c}");
    }
    let hw = h * w;
    let mut first = Vec::with_capacity(n * at * hw);
    let mut second = Vec::with_capacity(n * (c - at) * hw);
    for b in 0..n {
        let base = b * c * hw;
        first.extend_from_slice(&x.data()[base..base + at * hw]);
        second.extend_from_slice(&x.data()[base + at * hw..base + c * hw]);
    }
    let first = Tensor::from_parts([n, at, h, w], first);
    let second = (at < c).then(|| Tensor::from_parts([n, c - at, h, w], second));
    Ok((first, second))
}

/// Concatenates along channels; an absent second part is the identity.
pub fn concat_channels(a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let Some(b) = b else {
        return Ok(a.clone());
    };
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        bail!(
            Dimension,
            "concat {:?} with {:?}",
            a.shape(),
            b.shape()
        );
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Ok(Tensor::from_parts([n, ca + cb, h, w], data))
}

/// Fully connected layer on token rows: `x · W + b` with `W` stored `(in × out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Option<Vec<f32>>) -> Result<Self> {
        let bias = match bias {
            Some(b) => {
                if b.len() != weight.cols() {
                    bail!(
                        Dimension,
                        "bias length {} for {} outputs",
                        b.len(),
                        weight.cols()
                    );
                }
                Some(Matrix::from_parts(1, b.len(), b))
            }
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.weight)?;
        if let Some(b) = &self.bias {
            profile::record_elementwise(y.rows() * y.cols());
            for r in 0..y.rows() {
                for (o, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        Ok(y)
    }

    /// Applies the layer to every pixel of an image tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.in_dim() {
            bail!(
                Dimension,
                "linear expects {} channels, got {}",
                self.in_dim(),
                x.c()
            );
        }
        let toks = (0..x.n())
            .map(|b| self.forward(&x.to_tokens(b)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_tokens(&toks, x.h(), x.w())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) as f64 * b.get(k, j) as f64).sum::<f64>() as f32
        })
    }

    #[test]
    fn matmul_variants_match_naive() {
        let mut rng = Rng::new(1);
        let a = Matrix::randn(7, 5, 1.0, &mut rng);
        let b = Matrix::randn(5, 3, 1.0, &mut rng);
        let want = naive_matmul(&a, &b);
        assert_eq!(matmul(&a, &b).unwrap(), want);
        let abt = matmul_a_bt(&a, &b.transpose()).unwrap();
        let atb = matmul_at_b(&a.transpose(), &b).unwrap();
        for i in 0..want.data().len() {
            assert!((abt.data()[i] - want.data()[i]).abs() < 1e-6);
            assert!((atb.data()[i] - want.data()[i]).abs() < 1e-6);
        }
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::new(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap();
        let s = softmax_lastdim(&m);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert_eq!(s.get(1, 0), 1.0);
        assert!(s.get(1, 1) >= 0.0 && s.get(1, 1) < 1e-30);
        let mut rng = Rng::new(2);
        let r = softmax_lastdim(&Matrix::randn(8, 8, 3.0, &mut rng));
        for sum in r.row_sums() {
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_shuffle_contract() {
        let x = Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            pixel_shuffle(&Tensor::zeros([1, 12, 4, 4]), 2).unwrap().shape(),
            [1, 3, 8, 8]
        );
        assert!(pixel_shuffle(&Tensor::zeros([1, 6, 4, 4]), 2).is_err());
        let mut rng = Rng::new(3);
        let t = Tensor::randn([2, 18, 3, 5], 1.0, &mut rng);
        let s = pixel_shuffle(&t, 3).unwrap();
        // element law: out(n, c', h·r+i, w·r+j) == in(n, c'·r² + i·r + j, h, w)
        assert_eq!(s.at(1, 1, 2 * 3 + 2, 4 * 3 + 1), t.at(1, 9 + 2 * 3 + 1, 2, 4));
        assert_eq!(pixel_unshuffle(&s, 3).unwrap(), t);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::full([1, 4, 2, 2], 3.5);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(4);
        let r = Tensor::randn([2, 6, 3, 3], 2.0, &mut rng);
        let y = layer_norm(&r, &[0.0; 6], &[5.0; 6]).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        let y = layer_norm(&r, &[1.0; 6], &[0.0; 6]).unwrap();
        for b in 0..2 {
            let toks = y.to_tokens(b);
            for p in 0..9 {
                let row = toks.row(p);
                let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
                let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 6.0;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn windows() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut rng);
        let w = window_partition(&x, 16).unwrap();
        assert_eq!(w.shape(), [8, 3, 16, 16]);
        assert_eq!(w.at(1, 2, 3, 4), x.at(0, 2, 3, 20));
        assert_eq!(window_merge(&w, 2, 32, 32).unwrap(), x);
        assert_eq!(window_partition(&x, 32).unwrap(), x);
        assert!(window_partition(&x, 5).is_err());
        let one = Tensor::zeros([1, 1, 32, 32]);
        assert_eq!(window_partition(&one, 16).unwrap().n(), 4);
    }

    #[test]
    fn pad_crop_split_concat() {
        let mut rng = Rng::new(6);
        let x = Tensor::randn([1, 5, 10, 13], 1.0, &mut rng);
        let p = pad_to_multiple(&x, 8);
        assert_eq!(p.shape(), [1, 5, 16, 16]);
        assert_eq!(p.at(0, 4, 15, 15), 0.0);
        assert_eq!(crop(&p, 10, 13).unwrap(), x);
        let (a, b) = split_channels(&x, 2).unwrap();
        assert_eq!(a.c(), 2);
        assert_eq!(b.as_ref().unwrap().c(), 3);
        assert_eq!(concat_channels(&a, b.as_ref()).unwrap(), x);
        let (all, none) = split_channels(&x, 5).unwrap();
        assert!(none.is_none());
        assert_eq!(concat_channels(&all, None).unwrap(), x);
    }

    #[test]
    fn gelu_and_elementwise() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((gelu_scalar(-1.0) + 0.158_655_3).abs() < 1e-6);
        let a = Tensor::full([1, 2, 2, 2], 2.0);
        let b = Tensor::full([1, 2, 2, 2], 3.0);
        assert!(add(&a, &b).unwrap().data().iter().all(|&v| v == 5.0));
        assert!(mul(&a, &b).unwrap().data().iter().all(|&v| v == 6.0));
        assert!(add(&a, &Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn linear_layer() {
        let w = Matrix::new(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        let lin = Linear::new(w, Some(vec![0.5, 0.0, 0.0])).unwrap();
        let x = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(lin.forward(&x).unwrap().data(), &[3.5, 4.0, 2.0]);
        assert!(Linear::new(Matrix::zeros(2, 3), Some(vec![0.0; 2])).is_err());
    }
}
