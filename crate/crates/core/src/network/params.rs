//! Named traversal of every learnable array, used for init, serialization and counting.

use crate::attention::{WmsaReceiverWeights, WmsaWeights};
use crate::conv::Conv2d;
use crate::dual_fusion::DflWeights;
use crate::feature_map::HedgehogParams;
use crate::large_kernel::{LkdWeights, LocalWeights, SeparableStage};
use crate::ops::Linear;
use crate::tensor::{Matrix, Tensor};

pub type Visitor<'a> = dyn FnMut(&str, &[usize], &[f32]) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f32]) + 'a;

pub trait Params {
    fn visit(&self, name: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>);

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Params for Tensor {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        f(name, &self.shape(), self.data());
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        let shape = self.shape();
        f(name, &shape, self.data_mut());
    }
}

impl Params for Matrix {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        f(name, &[self.rows(), self.cols()], self.data());
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        let shape = [self.rows(), self.cols()];
        f(name, &shape, self.data_mut());
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        if let Some(t) = self {
            t.visit(name, f);
        }
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        if let Some(t) = self {
            t.visit_mut(name, f);
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(name, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(name, &i.to_string()), f);
        }
    }
}

macro_rules! params_struct {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Params for $ty {
            fn visit(&self, name: &str, f: &mut Visitor<'_>) {
                $( self.$field.visit(&$crate::network::params::join(name, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
                $( self.$field.visit_mut(&$crate::network::params::join(name, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use params_struct;

params_struct!(Linear { weight, bias });
params_struct!(Conv2d { weight, bias });
params_struct!(WmsaWeights { q, k, v, proj });
params_struct!(WmsaReceiverWeights { v, proj });
params_struct!(DflWeights { q, k, v, dw, hedgehog, out });
params_struct!(SeparableStage { horizontal, vertical });
params_struct!(LocalWeights { reduce, mid, expand });
params_struct!(LkdWeights { hlk, local, channel });

impl Params for HedgehogParams {
    fn visit(&self, name: &str, f: &mut Visitor<'_>) {
        self.weight.visit(&join(name, "weight"), f);
        self.biases.visit(&join(name, "biases"), f);
    }
    fn visit_mut(&mut self, name: &str, f: &mut VisitorMut<'_>) {
        self.weight.visit_mut(&join(name, "weight"), f);
        self.biases.visit_mut(&join(name, "biases"), f);
    }
}
