//! Kernel feature maps φ for linear attention.
//!
//! | kind        | φ(x)                                             | output dim |
//! |-------------|--------------------------------------------------|------------|
//! | Identity    | x                                                | d          |
//! | Relu        | max(0, x)                                        | d          |
//! | EluPlusOne  | ELU(x) + 1                                       | d          |
//! | SymRelu     | [ReLU(x), ReLU(−x)]                              | 2d         |
//! | Hedgehog    | [exp(Wᵀx + b₁) … exp(Wᵀx + bₘ), exp(−Wᵀx − b₁) …] | 2mC        |
//!
//! All evaluation happens in f64; matrix entry points round the result to f32 once.

use crate::error::{bail, Result};
use crate::profile;
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Exponent arguments are clamped to ±30 so untrained weights cannot overflow.
pub const EXP_CLAMP: f64 = 30.0;

/// Parameters of the Hedgehog map: one shared `C × C` projection and `m` bias vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgehogParams {
    pub weight: Matrix,
    /// `m × C`, one bias vector per row.
    pub biases: Matrix,
    /// Divide φ(x) by its sum. Off by default; the plain concatenation is the reference form.
    pub normalize: bool,
}

impl HedgehogParams {
    pub fn new(weight: Matrix, biases: Matrix) -> Result<Self> {
        let c = weight.rows();
        if weight.cols() != c {
            bail!(Config, "hedgehog projection must be square, got {}x{}", c, weight.cols());
        }
        if biases.rows() == 0 || biases.cols() != c {
            bail!(
                Config,
                "hedgehog biases must be m x {c} with m >= 1, got {}x{}",
                biases.rows(),
                biases.cols()
            );
        }
        Ok(Self {
            weight,
            biases,
            normalize: false,
        })
    }

    /// Identity projection plus N(0, 0.02²) noise; biases evenly spaced in [−0.5, 0.5].
    pub fn init(dim: usize, pairs: usize, rng: &mut Rng) -> Self {
        assert!(dim > 0 && pairs > 0);
        let mut weight = Matrix::randn(dim, dim, 0.02, rng);
        for i in 0..dim {
            let v = weight.get(i, i) + 1.0;
            weight.set(i, i, v);
        }
        let biases = Matrix::from_fn(pairs, dim, |i, _| {
            if pairs == 1 {
                0.0
            } else {
                -0.5 + i as f32 / (pairs - 1) as f32
            }
        });
        Self {
            weight,
            biases,
            normalize: false,
        }
    }

    /// `W = I`, all biases zero.
    pub fn identity(dim: usize, pairs: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            biases: Matrix::zeros(pairs, dim),
            normalize: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn pairs(&self) -> usize {
        self.biases.rows()
    }

    /// `Wᵀx`
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let c = self.dim();
        let mut u = vec![0f64; c];
        for (i, &xi) in x.iter().enumerate() {
            let wr = self.weight.row(i);
            for (uj, &w) in u.iter_mut().zip(wr) {
                *uj += w as f64 * xi;
            }
        }
        u
    }
}

/// Serialization tag for [`FeatureMapKind`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FeatureMapTag {
    Identity = 0,
    Relu = 1,
    EluPlusOne = 2,
    SymRelu = 3,
    Hedgehog = 4,
}

impl FeatureMapTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Identity,
            1 => Self::Relu,
            2 => Self::EluPlusOne,
            3 => Self::SymRelu,
            4 => Self::Hedgehog,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
            Self::EluPlusOne => "elu1",
            Self::SymRelu => "symrelu",
            Self::Hedgehog => "hedgehog",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => Self::Identity,
            "relu" => Self::Relu,
            "elu1" | "elu" => Self::EluPlusOne,
            "symrelu" => Self::SymRelu,
            "hedgehog" => Self::Hedgehog,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMapKind {
    Identity,
    Relu,
    EluPlusOne,
    SymRelu,
    Hedgehog(HedgehogParams),
}

impl FeatureMapKind {
    pub fn tag(&self) -> FeatureMapTag {
        match self {
            Self::Identity => FeatureMapTag::Identity,
            Self::Relu => FeatureMapTag::Relu,
            Self::EluPlusOne => FeatureMapTag::EluPlusOne,
            Self::SymRelu => FeatureMapTag::SymRelu,
            Self::Hedgehog(_) => FeatureMapTag::Hedgehog,
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            Self::Identity | Self::Relu | Self::EluPlusOne => d,
            Self::SymRelu => 2 * d,
            Self::Hedgehog(p) => 2 * p.pairs() * p.dim(),
        }
    }

    /// True when every output is strictly positive for every input.
    pub fn strictly_positive(&self) -> bool {
        matches!(self, Self::EluPlusOne | Self::Hedgehog(_))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if let Self::Hedgehog(p) = self {
            if p.dim() != d {
                bail!(Config, "hedgehog map is {}-dimensional, input has {d}", p.dim());
            }
        }
        Ok(())
    }

    /// φ(x) for a single vector, in f64.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(match self {
            Self::Identity => x.to_vec(),
            Self::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Self::EluPlusOne => x.iter().map(|&v| elu(v) + 1.0).collect(),
            Self::SymRelu => x
                .iter()
                .map(|&v| v.max(0.0))
                .chain(x.iter().map(|&v| (-v).max(0.0)))
                .collect(),
            Self::Hedgehog(p) => {
                let u = p.project(x);
                let mut out = Vec::with_capacity(self.output_dim(x.len()));
                for sign in [1.0, -1.0] {
                    for i in 0..p.pairs() {
                        let b = p.biases.row(i);
                        out.extend(
                            u.iter()
                                .zip(b)
                                .map(|(&uj, &bj)| (sign * (uj + bj as f64)).clamp(-EXP_CLAMP, EXP_CLAMP).exp()),
                        );
                    }
                }
                if p.normalize {
                    let s: f64 = out.iter().sum();
                    out.iter_mut().for_each(|v| *v /= s);
                }
                out
            }
        })
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Applies φ to every row of an `N × d` token matrix.
pub fn apply_feature_map(kind: &FeatureMapKind, x: &Matrix) -> Result<Matrix> {
    kind.check_dim(x.cols())?;
    let (n, d) = (x.rows(), x.cols());
    let r = kind.output_dim(d);
    if let FeatureMapKind::Hedgehog(_) = kind {
        profile::record_matmul(n, d, d);
    }
    profile::record_elementwise(n * r);
    let mut out = Matrix::zeros(n, r);
    let mut row = vec![0f64; d];
    for i in 0..n {
        for (dst, &v) in row.iter_mut().zip(x.row(i)) {
            *dst = v as f64;
        }
        let phi = kind.eval(&row)?;
        for (o, v) in out.row_mut(i).iter_mut().zip(phi) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// φ(q)ᵀφ(k).
pub fn kernel_value(kind: &FeatureMapKind, q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        bail!(Dimension, "kernel_value: {} vs {}", q.len(), k.len());
    }
    let pq = kind.eval(q)?;
    let pk = kind.eval(k)?;
    Ok(pq.iter().zip(&pk).map(|(a, b)| a * b).sum())
}

/// The four parts of the ELU+1 kernel: `⟨σ(q),σ(k)⟩ + 1ᵀσ(q) + 1ᵀσ(k) + d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EluDecomposition {
    pub similarity: f64,
    pub q_bias: f64,
    pub k_bias: f64,
    pub d: f64,
}

impl EluDecomposition {
    pub fn total(&self) -> f64 {
        self.similarity + self.q_bias + self.k_bias + self.d
    }

    /// The query/key bias terms and the constant offset outweigh the pairwise similarity.
    pub fn bias_dominates(&self) -> bool {
        (self.q_bias + self.k_bias + self.d).abs() > self.similarity.abs()
    }
}

pub fn elu_kernel_decomposition(q: &[f64], k: &[f64]) -> Result<EluDecomposition> {
    if q.len() != k.len() {
        bail!(Dimension, "elu decomposition: {} vs {}", q.len(), k.len());
    }
    let sq: Vec<f64> = q.iter().map(|&v| elu(v)).collect();
    let sk: Vec<f64> = k.iter().map(|&v| elu(v)).collect();
    Ok(EluDecomposition {
        similarity: sq.iter().zip(&sk).map(|(a, b)| a * b).sum(),
        q_bias: sq.iter().sum(),
        k_bias: sk.iter().sum(),
        d: q.len() as f64,
    })
}

/// Dense row-major Jacobian `∂φ_i/∂x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Analytic Jacobian of φ at `x`. ReLU kinks take the right-hand derivative at 0.
pub fn feature_map_jacobian(kind: &FeatureMapKind, x: &[f64]) -> Result<Jacobian> {
    kind.check_dim(x.len())?;
    let d = x.len();
    let mut j = Jacobian::zeros(kind.output_dim(d), d);
    match kind {
        FeatureMapKind::Identity => (0..d).for_each(|i| j.set(i, i, 1.0)),
        FeatureMapKind::Relu => (0..d).for_each(|i| j.set(i, i, if x[i] > 0.0 { 1.0 } else { 0.0 })),
        FeatureMapKind::EluPlusOne => {
            (0..d).for_each(|i| j.set(i, i, if x[i] > 0.0 { 1.0 } else { x[i].exp() }))
        }
        FeatureMapKind::SymRelu => {
            for i in 0..d {
                j.set(i, i, if x[i] > 0.0 { 1.0 } else { 0.0 });
                j.set(d + i, i, if x[i] < 0.0 { -1.0 } else { 0.0 });
            }
        }
        FeatureMapKind::Hedgehog(p) => {
            let c = p.dim();
            let u = p.project(x);
            // raw φ (before optional normalization)
            let mut raw = Vec::with_capacity(2 * p.pairs() * c);
            for sign in [1.0, -1.0] {
                for i in 0..p.pairs() {
                    let b = p.biases.row(i);
                    for a in 0..c {
                        let arg = sign * (u[a] + b[a] as f64);
                        let clamped = arg.abs() > EXP_CLAMP;
                        let e = arg.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
                        raw.push((e, if clamped { 0.0 } else { sign }));
                    }
                }
            }
            // ∂φ_row/∂x_col = sign · e · W[col, a], where a = row mod C
            for (row, &(e, s)) in raw.iter().enumerate() {
                let a = row % c;
                for col in 0..d {
                    j.set(row, col, s * e * p.weight.get(col, a) as f64);
                }
            }
            if p.normalize {
                let total: f64 = raw.iter().map(|(e, _)| e).sum();
                let col_sums: Vec<f64> = (0..d)
                    .map(|col| (0..j.rows).map(|r| j.get(r, col)).sum())
                    .collect();
                for (row, &(e, _)) in raw.iter().enumerate() {
                    for (col, &cs) in col_sums.iter().enumerate() {
                        let v = j.get(row, col) / total - e * cs / (total * total);
                        j.set(row, col, v);
                    }
                }
            }
        }
    }
    Ok(j)
}
