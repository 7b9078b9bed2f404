use super::config::ModelConfig;
use super::params::{params_struct, Params, Visitor, VisitorMut};
use crate::attention::{WmsaReceiverWeights, WmsaWeights};
use crate::conv::{Conv2d, ConvSpec};
use crate::dual_fusion::DflWeights;
use crate::error::{bail, Result};
use crate::feature_map::HedgehogParams;
use crate::large_kernel::{LkdWeights, LocalWeights, SeparableStage};
use crate::ops::Linear;
use crate::rng::Rng;
use crate::tensor::{Matrix, Tensor};

/// Per-channel affine of a layer norm, each `1 × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// 1×1 expand, depthwise 7×7, GELU, 1×1 project.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMlpWeights {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HpaWeights {
    pub norm_mlp: Norm,
    pub mlp: ConvMlpWeights,
    pub norm_attn: Norm,
    pub attn: WmsaWeights,
}

/// Depthwise 3×3, pointwise, GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    pub dw: Conv2d,
    pub pw: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShaWeights {
    pub norm_wmsa: Norm,
    pub wmsa: WmsaWeights,
    pub norm_dfl: Norm,
    pub dfl: DflWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhaWeights {
    pub norm_wmsa: Norm,
    pub wmsa: WmsaReceiverWeights,
    pub norm_dfl: Norm,
    pub dfl: DflWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsaWeights {
    pub reduce: Conv2d,
    pub skip: Conv2d,
    pub stride: Conv2d,
    pub conv_max: Conv2d,
    pub conv3: Conv2d,
    pub conv3b: Conv2d,
    pub restore: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharingBlockWeights {
    pub hpa: HpaWeights,
    pub lm: LmWeights,
    pub sha: Vec<ShaWeights>,
    pub lkd: Vec<LkdWeights>,
    pub esa: EsaWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceivingBlockWeights {
    pub hpa: HpaWeights,
    pub lm: LmWeights,
    pub rha: Vec<RhaWeights>,
    pub lkd: Vec<LkdWeights>,
    pub esa: EsaWeights,
}

/// One broad-receptive-field group: a sharing block and its receiving partner.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights {
    pub sb: SharingBlockWeights,
    pub rb: ReceivingBlockWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UcanWeights {
    pub config: ModelConfig,
    pub shallow: Conv2d,
    pub groups: Vec<GroupWeights>,
    pub fusion: Conv2d,
    pub recon: Conv2d,
}

params_struct!(Norm { gamma, beta });
params_struct!(ConvMlpWeights { expand, dw, project });
params_struct!(HpaWeights { norm_mlp, mlp, norm_attn, attn });
params_struct!(LmWeights { dw, pw });
params_struct!(ShaWeights { norm_wmsa, wmsa, norm_dfl, dfl });
params_struct!(RhaWeights { norm_wmsa, wmsa, norm_dfl, dfl });
params_struct!(EsaWeights { reduce, skip, stride, conv_max, conv3, conv3b, restore });
params_struct!(SharingBlockWeights { hpa, lm, sha, lkd, esa });
params_struct!(ReceivingBlockWeights { hpa, lm, rha, lkd, esa });
params_struct!(GroupWeights { sb, rb });

impl Params for UcanWeights {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        use super::params::join;
        self.shallow.visit(&join(name, "shallow"), f);
        self.groups.visit(&join(name, "groups"), f);
        self.fusion.visit(&join(name, "fusion"), f);
        self.recon.visit(&join(name, "recon"), f);
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        use super::params::join;
        self.shallow.visit_mut(&join(name, "shallow"), f);
        self.groups.visit_mut(&join(name, "groups"), f);
        self.fusion.visit_mut(&join(name, "fusion"), f);
        self.recon.visit_mut(&join(name, "recon"), f);
    }
}

fn conv(c_out: usize, c_in: usize, kh: usize, kw: usize, spec: ConvSpec) -> Conv2d {
    let cpg = c_in / spec.groups;
    Conv2d {
        weight: Tensor::zeros([c_out, cpg, kh, kw]),
        bias: Some(Tensor::zeros([1, 1, 1, c_out])),
        spec,
    }
}

fn linear(i: usize, o: usize, bias: bool) -> Linear {
    Linear {
        weight: Matrix::zeros(i, o),
        bias: bias.then(|| Matrix::zeros(1, o)),
    }
}

fn norm(c: usize) -> Norm {
    Norm {
        gamma: Matrix::zeros(1, c),
        beta: Matrix::zeros(1, c),
    }
}

fn wmsa(c: usize) -> WmsaWeights {
    WmsaWeights {
        q: linear(c, c, true),
        k: linear(c, c, true),
        v: linear(c, c, true),
        proj: linear(c, c, true),
    }
}

fn dfl(cfg: &ModelConfig) -> DflWeights {
    let c = cfg.channels;
    let half = c / 2;
    let hd = half / cfg.dfl_heads;
    DflWeights {
        q: linear(c, half, false),
        k: linear(c, half, false),
        v: linear(c, half, false),
        dw: Tensor::zeros([half, 1, 3, 3]),
        hedgehog: (0..cfg.dfl_heads)
            .map(|_| HedgehogParams {
                weight: Matrix::zeros(hd, hd),
                biases: Matrix::zeros(1, hd),
                normalize: false,
            })
            .collect(),
        out: linear(c, c, true),
    }
}

fn lkd(cfg: &ModelConfig) -> LkdWeights {
    let l = cfg.lkd();
    let cf = l.fine_channels();
    let r = cf / l.reduction;
    LkdWeights {
        hlk: l
            .stages()
            .into_iter()
            .map(|(k, _)| SeparableStage::constant(cf, k, 0.0))
            .collect(),
        local: LocalWeights {
            reduce: conv(r, cf, 1, 1, ConvSpec::default()),
            mid: conv(r, r, 3, 3, ConvSpec::default()),
            expand: conv(cf, r, 1, 1, ConvSpec::default()),
        },
        channel: linear(cf, cf, true),
    }
}

fn hpa(cfg: &ModelConfig) -> HpaWeights {
    let c = cfg.channels;
    let e = c * cfg.mlp_ratio;
    HpaWeights {
        norm_mlp: norm(c),
        mlp: ConvMlpWeights {
            expand: conv(e, c, 1, 1, ConvSpec::default()),
            dw: conv(e, e, 7, 7, ConvSpec::depthwise(e)),
            project: conv(c, e, 1, 1, ConvSpec::default()),
        },
        norm_attn: norm(c),
        attn: wmsa(c),
    }
}

fn lm(c: usize) -> LmWeights {
    LmWeights {
        dw: conv(c, c, 3, 3, ConvSpec::depthwise(c)),
        pw: conv(c, c, 1, 1, ConvSpec::default()),
    }
}

fn esa(cfg: &ModelConfig) -> EsaWeights {
    let c = cfg.channels;
    let f = cfg.esa_channels();
    let d = ConvSpec::default;
    EsaWeights {
        reduce: conv(f, c, 1, 1, d()),
        skip: conv(f, f, 1, 1, d()),
        stride: conv(f, f, 3, 3, d().strided(2)),
        conv_max: conv(f, f, 3, 3, d()),
        conv3: conv(f, f, 3, 3, d()),
        conv3b: conv(f, f, 3, 3, d()),
        restore: conv(c, f, 1, 1, d()),
    }
}

/// Fan-in of a parameter array: everything but the leading output axis for conv kernels,
/// the row count for `in × out` matrices.
fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [_, rest @ ..] if shape.len() == 4 => rest.iter().product(),
        [rows, _] => *rows,
        _ => 1,
    }
    .max(1)
}

enum Role {
    Zero,
    One,
    NearIdentity,
    FanIn,
}

fn role(name: &str) -> Role {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "bias" if name.ends_with(".channel.bias") => Role::One,
        "weight" if name.ends_with(".channel.weight") => Role::Zero,
        "bias" | "beta" | "biases" => Role::Zero,
        "gamma" => Role::One,
        "weight" if name.contains(".hedgehog.") => Role::NearIdentity,
        _ => Role::FanIn,
    }
}

impl UcanWeights {
    /// All arrays zero, shapes derived from `config`. Used as the skeleton for loading.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let s = config.scale;
        let group = || GroupWeights {
            sb: SharingBlockWeights {
                hpa: hpa(config),
                lm: lm(c),
                sha: (0..config.ha_depth)
                    .map(|_| ShaWeights {
                        norm_wmsa: norm(c),
                        wmsa: wmsa(c),
                        norm_dfl: norm(c),
                        dfl: dfl(config),
                    })
                    .collect(),
                lkd: (0..config.lkd_depth).map(|_| lkd(config)).collect(),
                esa: esa(config),
            },
            rb: ReceivingBlockWeights {
                hpa: hpa(config),
                lm: lm(c),
                rha: (0..config.ha_depth)
                    .map(|_| RhaWeights {
                        norm_wmsa: norm(c),
                        wmsa: WmsaReceiverWeights {
                            v: linear(c, c, true),
                            proj: linear(c, c, true),
                        },
                        norm_dfl: norm(c),
                        dfl: dfl(config),
                    })
                    .collect(),
                lkd: (0..config.lkd_depth).map(|_| lkd(config)).collect(),
                esa: esa(config),
            },
        };
        Ok(Self {
            config: config.clone(),
            shallow: conv(c, 3, 3, 3, ConvSpec::default()),
            groups: (0..config.groups).map(|_| group()).collect(),
            fusion: conv(c, c, 3, 3, ConvSpec::default()),
            recon: conv(3 * s * s, c, 3, 3, ConvSpec::default()),
        })
    }

    /// Seeded init: weights `N(0, 1/fan_in)`, biases zero, norm gains one, Hedgehog
    /// projections `I + N(0, 0.02²)`. The large-kernel channel projection starts at weight
    /// zero and bias one, so its multiplicative gate is the identity at init.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = Rng::new(config.seed);
        w.visit_mut("", &mut |name, shape, data| match role(name) {
            Role::Zero => data.fill(0.0),
            Role::One => data.fill(1.0),
            Role::NearIdentity => {
                let d = shape[0];
                for (i, v) in data.iter_mut().enumerate() {
                    *v = 0.02 * rng.normal() + if i / d == i % d { 1.0 } else { 0.0 };
                }
            }
            Role::FanIn => {
                let std = 1.0 / (fan_in(shape) as f32).sqrt();
                data.iter_mut().for_each(|v| *v = std * rng.normal());
            }
        });
        Ok(w)
    }

    /// Names and shapes in traversal order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    /// Copies every array of `other` into `self`, requiring identical names and shapes.
    pub fn copy_from(&mut self, other: &UcanWeights) -> Result<()> {
        let mut src = Vec::new();
        other.visit("", &mut |n, s, d| src.push((n.to_string(), s.to_vec(), d.to_vec())));
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |n, s, d| {
            match src.get(i) {
                Some((sn, ss, sd)) if sn == n && ss == s => d.copy_from_slice(sd),
                _ if err.is_none() => err = Some(n.to_string()),
                _ => {}
            }
            i += 1;
        });
        if let Some(n) = err {
            bail!(Contract, "parameter {n} differs between weight sets");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            groups: 1,
            ..ModelConfig::default()
        };
        let a = UcanWeights::init(&cfg).unwrap();
        let b = UcanWeights::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = UcanWeights::init(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.param_count(), c.param_count());
    }

    #[test]
    fn manifest_names_are_unique() {
        let w = UcanWeights::zeros(&ModelConfig::default()).unwrap();
        let names = w.manifest();
        let set: std::collections::BTreeSet<_> = names.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(set.len(), names.len());
        assert!(set.contains("groups.0.sb.sha.2.dfl.hedgehog.1.weight"));
        assert!(set.contains("recon.weight"));
    }

    #[test]
    fn init_roles() {
        let w = UcanWeights::init(&ModelConfig::default()).unwrap();
        let g = &w.groups[0].sb.sha[0];
        assert!(g.norm_wmsa.gamma.data().iter().all(|&v| v == 1.0));
        assert!(g.wmsa.q.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        let hh = &g.dfl.hedgehog[0].weight;
        assert!((hh.get(0, 0) - 1.0).abs() < 0.2 && hh.get(0, 1).abs() < 0.2);
    }
}
