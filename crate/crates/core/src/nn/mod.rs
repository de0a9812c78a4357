//! Differentiable primitives, their parameter containers, and the
//! reverse-mode tape.

pub mod gradcheck;
pub mod graph;
pub mod ops;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal init used for dense weights.
pub const INIT_STD: f64 = 0.02;

/// A tree of named parameter tensors visited in a fixed order.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

impl<T: Scalar> Params<T> for Tensor<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(path, self)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(path, self)
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(p) = self {
            p.visit(path, f)
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(p) = self {
            p.visit_mut(path, f)
        }
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(path, &i.to_string()), f)
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(path, &i.to_string()), f)
        }
    }
}

impl<T: Scalar, A: Params<T>, B: Params<T>> Params<T> for (A, B) {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.0.visit(&join(path, "0"), f);
        self.1.visit(&join(path, "1"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.0.visit_mut(&join(path, "0"), f);
        self.1.visit_mut(&join(path, "1"), f);
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Params<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                path: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit(&$crate::nn::join(path, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                path: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_mut(&$crate::nn::join(path, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Dense layer `y = x·W + b`, `W` is in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(LinearParams { w, b });

impl<T: Scalar> LinearParams<T> {
    pub fn init(rng: &mut RngState, in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            w: rng.trunc_normal_tensor(&[in_dim, out_dim], INIT_STD),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(&[in_dim, out_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> LinearParams<U> {
        LinearParams { w: self.w.cast(), b: self.b.cast() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_params!(LayerNormParams { gamma, beta });

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        LayerNormParams { gamma: self.gamma.cast(), beta: self.beta.cast() }
    }
}

/// One 3×3 filter per channel (`C×3×3`) plus a per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConvParams<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_params!(DwConvParams { kernels, bias });

impl<T: Scalar> DwConvParams<T> {
    pub fn init(rng: &mut RngState, channels: usize) -> Self {
        DwConvParams {
            kernels: rng.trunc_normal_tensor(&[channels, 3, 3], INIT_STD),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DwConvParams<U> {
        DwConvParams { kernels: self.kernels.cast(), bias: self.bias.cast() }
    }
}
