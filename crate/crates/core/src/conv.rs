//! 2D convolution with zero "same" padding, plus pooling and resampling used by ESA.

use crate::error::{bail, Result};
use crate::profile;
use crate::tensor::Tensor;

/// Static convolution parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn depthwise(channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::default()
        }
    }

    pub fn dilated(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

/// Convolution with weights `(c_out, c_in/groups, kh, kw)` and zero padding `((k−1)·d)/2` per axis.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: Option<&[f32]>, spec: ConvSpec) -> Result<Tensor> {
    let [n, c_in, h, w] = x.shape();
    let [c_out, cpg, kh, kw] = weights.shape();
    let ConvSpec {
        stride,
        dilation: (dh, dw),
        groups,
    } = spec;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        bail!(
            Config,
            "groups {groups} must divide c_in {c_in} and c_out {c_out}"
        );
    }
    if cpg != c_in / groups {
        bail!(
            Dimension,
            "weights {:?} expect {} input channels per group, input has {c_in}/{groups}",
            weights.shape(),
            cpg
        );
    }
    if stride == 0 || dh == 0 || dw == 0 {
        bail!(Config, "stride and dilation must be >= 1");
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            bail!(Dimension, "bias length {} for {c_out} outputs", b.len());
        }
    }
    let ph = ((kh - 1) * dh) / 2;
    let pw = ((kw - 1) * dw) / 2;
    let ext_h = (kh - 1) * dh + 1;
    let ext_w = (kw - 1) * dw + 1;
    if h + 2 * ph < ext_h || w + 2 * pw < ext_w {
        bail!(Dimension, "kernel extent larger than padded input");
    }
    let ho = (h + 2 * ph - ext_h) / stride + 1;
    let wo = (w + 2 * pw - ext_w) / stride + 1;
    let opg = c_out / groups;
    profile::record_conv((n * c_out * cpg * kh * kw * ho * wo) as u64);

    let mut out = Tensor::zeros([n, c_out, ho, wo]);
    let mut acc = vec![0f64; ho * wo];
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / opg;
            acc.fill(bias.map_or(0.0, |bb| bb[oc] as f64));
            for icg in 0..cpg {
                let ic = g * cpg + icg;
                let plane = x.plane(b, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weights.at(oc, icg, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let wv = wv as f64;
                        let off_y = (ky * dh) as isize - ph as isize;
                        let off_x = (kx * dw) as isize - pw as isize;
                        // output columns whose input column stays in bounds
                        let ox_lo = if off_x < 0 {
                            ((-off_x) as usize).div_ceil(stride)
                        } else {
                            0
                        };
                        let ox_hi = {
                            let lim = w as isize - off_x;
                            if lim <= 0 {
                                0
                            } else {
                                ((lim as usize - 1) / stride + 1).min(wo)
                            }
                        };
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride) as isize + off_y;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let arow = &mut acc[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let start = (ox_lo as isize + off_x) as usize;
                                let src = &row[start..start + (ox_hi - ox_lo)];
                                for (a, &v) in arow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *a += wv * v as f64;
                                }
                            } else {
                                for (ox, a) in arow.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                                    let ix = (ox * stride) as isize + off_x;
                                    *a += wv * row[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (o, &a) in out.plane_mut(b, oc).iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Ok(out)
}

/// A convolution layer: weights, optional bias and its static parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>, spec: ConvSpec) -> Result<Self> {
        let bias = match bias {
            Some(b) => Some(Tensor::new([1, 1, 1, b.len()], b)?),
            None => None,
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref().map(|b| b.data()), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.n()
    }
}

/// Max pooling without padding. A kernel larger than the input is clamped to the input size.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if kernel == 0 || stride == 0 {
        bail!(Config, "max_pool2d kernel and stride must be >= 1");
    }
    let kh = kernel.min(h);
    let kw = kernel.min(w);
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    profile::record_elementwise(n * c * ho * wo * kh * kw);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    out.set(b, ch, oy, ox, m);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    profile::record_elementwise(n * c * out_h * out_w * 4);
    let taps = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let scale = inp as f64 / out as f64;
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = taps(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = taps(ox, out_w, w);
                    let v = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                    out.set(b, ch, oy, ox, (top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::count_macs;
    use crate::rng::Rng;

    /// Literal sliding-window convolution used as the reference.
    fn naive_conv(x: &Tensor, wt: &Tensor, bias: Option<&[f32]>, spec: ConvSpec) -> Tensor {
        let [n, c_in, h, w] = x.shape();
        let [c_out, cpg, kh, kw] = wt.shape();
        let (dh, dw) = spec.dilation;
        let s = spec.stride;
        let ph = ((kh - 1) * dh / 2) as isize;
        let pw = ((kw - 1) * dw / 2) as isize;
        let ho = (h + 2 * ph as usize - (kh - 1) * dh - 1) / s + 1;
        let wo = (w + 2 * pw as usize - (kw - 1) * dw - 1) / s + 1;
        let opg = c_out / spec.groups;
        let mut out = Tensor::zeros([n, c_out, ho, wo]);
        for b in 0..n {
            for oc in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc] as f64);
                        for icg in 0..cpg {
                            let ic = (oc / opg) * cpg + icg;
                            assert!(ic < c_in);
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s) as isize + (ky * dh) as isize - ph;
                                    let ix = (ox * s) as isize + (kx * dw) as isize - pw;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt.at(oc, icg, ky, kx) as f64
                                            * x.at(b, ic, iy as usize, ix as usize) as f64;
                                    }
                                }
                            }
                        }
                        out.set(b, oc, oy, ox, acc as f32);
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(0);
        let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut rng);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.set(0, 0, 1, 1, 1.0);
        assert_eq!(conv2d(&x, &k, None, ConvSpec::default()).unwrap(), x);
    }

    #[test]
    fn dilated_impulse_footprint() {
        let mut x = Tensor::zeros([1, 1, 7, 7]);
        x.set(0, 0, 3, 3, 1.0);
        let k = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, ConvSpec::default().dilated(2, 2)).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let on = [1, 3, 5].contains(&r) && [1, 3, 5].contains(&c);
                assert_eq!(y.at(0, 0, r, c), if on { 1.0 } else { 0.0 }, "({r},{c})");
            }
        }
        // support spans 5 pixels per axis
        let rows: Vec<_> = (0..7).filter(|&r| (0..7).any(|c| y.at(0, 0, r, c) != 0.0)).collect();
        assert_eq!(rows.last().unwrap() - rows[0] + 1, 5);
    }

    #[test]
    fn depthwise_matches_sliding_window() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn([1, 8, 16, 16], 1.0, &mut rng);
        let k = Tensor::randn([8, 1, 3, 3], 1.0, &mut rng);
        let b: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
        let spec = ConvSpec::depthwise(8);
        let got = conv2d(&x, &k, Some(&b), spec).unwrap();
        assert!(max_abs_diff(&got, &naive_conv(&x, &k, Some(&b), spec)) < 1e-6);
    }

    #[test]
    fn general_configs_match_naive() {
        let mut rng = Rng::new(2);
        let cases = [
            ([2, 6, 9, 11], [4, 3, 3, 3], ConvSpec { stride: 1, dilation: (1, 1), groups: 2 }),
            ([1, 4, 10, 10], [4, 1, 1, 5], ConvSpec::depthwise(4).dilated(1, 3)),
            ([1, 4, 10, 10], [4, 1, 5, 1], ConvSpec::depthwise(4).dilated(2, 1)),
            ([1, 3, 13, 9], [5, 3, 3, 3], ConvSpec::default().strided(2)),
            ([1, 2, 8, 8], [3, 2, 1, 1], ConvSpec::default()),
            ([1, 2, 6, 6], [2, 1, 7, 7], ConvSpec::depthwise(2)),
        ];
        for (xs, ks, spec) in cases {
            let x = Tensor::randn(xs, 1.0, &mut rng);
            let k = Tensor::randn(ks, 1.0, &mut rng);
            let got = conv2d(&x, &k, None, spec).unwrap();
            let want = naive_conv(&x, &k, None, spec);
            assert!(max_abs_diff(&got, &want) < 1e-5, "{xs:?} {ks:?} {spec:?}");
            if spec.stride == 1 {
                assert_eq!(got.h(), xs[2]);
                assert_eq!(got.w(), xs[3]);
            }
        }
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros([1, 4, 5, 5]);
        let k = Tensor::zeros([4, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, None, ConvSpec { groups: 3, ..Default::default() }),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            conv2d(&x, &k, None, ConvSpec::default()),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn no_implicit_factorization() {
        // A dense 3×3 conv is not depthwise-then-pointwise unless the weights factor.
        let mut rng = Rng::new(3);
        let x = Tensor::randn([1, 3, 6, 6], 1.0, &mut rng);
        let dense = Tensor::randn([3, 3, 3, 3], 1.0, &mut rng);
        let dw = Tensor::randn([3, 1, 3, 3], 1.0, &mut rng);
        let pw = Tensor::randn([3, 3, 1, 1], 1.0, &mut rng);
        let full = conv2d(&x, &dense, None, ConvSpec::default()).unwrap();
        let fact = conv2d(
            &conv2d(&x, &dw, None, ConvSpec::depthwise(3)).unwrap(),
            &pw,
            None,
            ConvSpec::default(),
        )
        .unwrap();
        assert!(max_abs_diff(&full, &fact) > 1e-2);
        // with factorized weights W[o,i] = pw[o,i]·dw[i] they agree
        let mut factored = Tensor::zeros([3, 3, 3, 3]);
        for o in 0..3 {
            for i in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        factored.set(o, i, ky, kx, pw.at(o, i, 0, 0) * dw.at(i, 0, ky, kx));
                    }
                }
            }
        }
        let full = conv2d(&x, &factored, None, ConvSpec::default()).unwrap();
        assert!(max_abs_diff(&full, &fact) < 1e-5);
    }

    #[test]
    fn mac_accounting() {
        let x = Tensor::zeros([2, 4, 8, 8]);
        let k = Tensor::zeros([6, 2, 3, 3]);
        let (_, rep) = count_macs(|| {
            conv2d(&x, &k, None, ConvSpec { groups: 2, ..Default::default() }).unwrap()
        });
        assert_eq!(rep.conv_macs, 2 * 6 * 2 * 9 * 64);
    }

    #[test]
    fn pooling_and_resize() {
        let x = Tensor::new([1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let p = max_pool2d(&x, 2, 1).unwrap();
        assert_eq!(p.data(), &[4.0, 5.0, 7.0, 8.0]);
        let big = max_pool2d(&x, 7, 3).unwrap();
        assert_eq!(big.data(), &[8.0]);
        let c = Tensor::full([1, 2, 3, 3], 1.5);
        let u = upsample_bilinear(&c, 7, 5);
        assert!(u.data().iter().all(|&v| (v - 1.5).abs() < 1e-7));
        let one = Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let u = upsample_bilinear(&one, 1, 4);
        assert_eq!(u.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
