//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every op applied to its variables. Leaves either
//! borrow a caller-owned tensor ([`Graph::param`]) or own a constant
//! ([`Graph::constant`]); borrowed leaves are keyed by address so gradients
//! can be looked up from the original parameter tensors after
//! [`Graph::backward`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::ops::{self, AttnLayout, LayerNormCache};
use super::{DwConvParams, LayerNormParams, LinearParams, Params};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache<T> },
    Gelu(Var),
    DwConv { x: Var, k: Var, b: Var },
    AvgPool { x: Var, s: usize },
    Partition { x: Var, s: usize },
    Reverse { x: Var, s: usize },
    SpaceToDepth { x: Var, p: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, scale: T, probs: Vec<T> },
    MeanTokens(Var),
    CrossEntropy { logits: Var, probs: Vec<T>, label: usize },
    WeightedSum { x: Var, weights: Tensor<T> },
    Sum(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

fn key<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<usize, Var>,
    tape: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            tape: true,
        }
    }

    /// Forward-only graph: attention keeps no probabilities and
    /// [`Graph::backward`] fails.
    pub fn inference() -> Self {
        Graph { tape: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// Trainable leaf borrowing `t`. Binding the same tensor twice returns
    /// the same variable.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key(t)) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.params.insert(key(t), v);
        v
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf borrowing `t` that receives no gradient.
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.record(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn dense(&mut self, x: Var, p: &'a LinearParams<T>) -> Result<Var> {
        let (w, b) = (self.param(&p.w), self.param(&p.b));
        self.linear(x, w, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.record(y, Op::Add(a, b), &[a, b]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = ops::softmax_rows(self.value(x));
        self.record(y, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = ops::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            ops::LAYER_NORM_EPS,
        )?;
        Ok(self.record(y, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    pub fn norm(&mut self, x: Var, p: &'a LayerNormParams<T>) -> Result<Var> {
        let (g, b) = (self.param(&p.gamma), self.param(&p.beta));
        self.layer_norm(x, g, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.record(y, Op::Gelu(x), &[x])
    }

    pub fn dwconv3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let y = ops::dwconv3x3(self.value(x), self.value(k), self.value(b))?;
        Ok(self.record(y, Op::DwConv { x, k, b }, &[x, k, b]))
    }

    pub fn dwconv(&mut self, x: Var, p: &'a DwConvParams<T>) -> Result<Var> {
        let (k, b) = (self.param(&p.kernels), self.param(&p.bias));
        self.dwconv3x3(x, k, b)
    }

    pub fn avgpool_window(&mut self, x: Var, s: usize) -> Result<Var> {
        let y = ops::avgpool_window(self.value(x), s)?;
        Ok(self.record(y, Op::AvgPool { x, s }, &[x]))
    }

    pub fn window_partition(&mut self, x: Var, s: usize) -> Result<Var> {
        let y = ops::window_partition(self.value(x), s)?;
        Ok(self.record(y, Op::Partition { x, s }, &[x]))
    }

    pub fn window_reverse(&mut self, x: Var, h: usize, w: usize, s: usize) -> Result<Var> {
        let y = ops::window_reverse(self.value(x), h, w, s)?;
        Ok(self.record(y, Op::Reverse { x, s }, &[x]))
    }

    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Result<Var> {
        let y = ops::space_to_depth(self.value(x), p)?;
        Ok(self.record(y, Op::SpaceToDepth { x, p }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.record(y, Op::Reshape(x), &[x]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_last(&tensors)?;
        Ok(self.record(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout, scale: T) -> Result<Var> {
        if !self.tape {
            let y = ops::attention_values(self.value(q), self.value(k), self.value(v), layout, scale)?;
            return Ok(self.record(y, Op::Attention { q, k, v, layout, scale, probs: Vec::new() }, &[q, k, v]));
        }
        let (y, probs) = ops::attention(self.value(q), self.value(k), self.value(v), layout, scale)?;
        Ok(self.record(y, Op::Attention { q, k, v, layout, scale, probs }, &[q, k, v]))
    }

    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let y = ops::mean_tokens(self.value(x));
        self.record(y, Op::MeanTokens(x), &[x])
    }

    /// Scalar (shape `[1]`) softmax cross-entropy loss.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), label)?;
        let y = Tensor::from_parts(vec![1], vec![loss]);
        Ok(self.record(y, Op::CrossEntropy { logits, probs, label }, &[logits]))
    }

    /// Scalar `Σ x ⊙ weights`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let dot = self
            .value(x)
            .zip_map(&weights, |a, b| a * b)
            .map_err(|_| Error::dim("weighted_sum", self.value(x).shape(), weights.shape()))?
            .sum();
        let y = Tensor::from_parts(vec![1], vec![dot]);
        Ok(self.record(y, Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::from_parts(vec![1], vec![self.value(x).sum()]);
        self.record(y, Op::Sum(x), &[x])
    }

    /// Gradients of the single-element `loss` with respect to every
    /// variable that depends on a trainable leaf. Nodes are visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.tape {
            return Err(Error::config("backward on an inference graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (var, contrib) in self.local_grads(node, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.accumulate(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn local_grads(&self, node: &Node<'a, T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(val(*b)).expect("matmul grad");
                let db = val(*a).matmul_tn(g).expect("matmul grad");
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), g);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Softmax(x) => vec![(*x, ops::softmax_rows_backward(&node.value, g))],
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Gelu(x) => vec![(*x, ops::gelu_backward(val(*x), g))],
            Op::DwConv { x, k, b } => {
                let (dx, dk, db) = ops::dwconv3x3_backward(val(*x), val(*k), g);
                vec![(*x, dx), (*k, dk), (*b, db)]
            }
            Op::AvgPool { x, s } => {
                let shape = val(*x).shape();
                vec![(*x, ops::avgpool_window_backward(g, shape[0], shape[1], *s))]
            }
            Op::Partition { x, s } => {
                let shape = val(*x).shape();
                let dx = ops::window_reverse(g, shape[0], shape[1], *s).expect("partition grad");
                vec![(*x, dx)]
            }
            Op::Reverse { x, s } => {
                let windows = val(*x).shape().to_vec();
                let dx = ops::window_partition(g, *s)
                    .and_then(|t| t.into_reshaped(&windows))
                    .expect("reverse grad");
                vec![(*x, dx)]
            }
            Op::SpaceToDepth { x, p } => vec![(*x, ops::depth_to_space(g, *p))],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).expect("reshape grad"))],
            Op::Concat(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let d = val(p).last_dim();
                        let piece = ops::slice_last(g, start, d);
                        start += d;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Attention { q, k, v, layout, scale, probs } => {
                let (dq, dk, dv) =
                    ops::attention_backward(val(*q), val(*k), val(*v), probs, *layout, *scale, g);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::MeanTokens(x) => {
                let src = val(*x);
                let inv = T::c(1.0 / src.lead_len() as f64);
                let c = src.last_dim();
                let dx = Tensor::from_fn(src.shape(), |i| g.data()[i % c] * inv);
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, probs, label } => {
                let scale = g.data()[0];
                let dx = Tensor::from_fn(val(*logits).shape(), |i| {
                    let onehot = if i == *label { T::one() } else { T::zero() };
                    (probs[i] - onehot) * scale
                });
                vec![(*logits, dx)]
            }
            Op::WeightedSum { x, weights } => vec![(*x, weights.scale(g.data()[0]))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a tensor that was bound with [`Graph::param`].
    pub fn of(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.params.get(&key(t)).and_then(|&v| self.get(v))
    }

    /// Gradients for every tensor of `p` in visit order; tensors that did
    /// not take part in the graph get zeros.
    pub fn collect<P: Params<T> + ?Sized>(&self, p: &P) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        p.visit("", &mut |_, t| {
            out.push(self.of(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn linear_sum_gradients() {
        let mut rng = RngState::new(0);
        let x = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let p = LinearParams::<f64>::init(&mut rng, 4, 2);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.dense(xv, &p).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d(sum)/db = number of rows, d/dW[i][j] = column sum of x.
        assert_eq!(grads.of(&p.b).unwrap().data(), &[3.0, 3.0]);
        let colsum: Vec<f64> = (0..4).map(|c| (0..3).map(|r| x.data()[r * 4 + c]).sum()).collect();
        for (i, c) in colsum.iter().enumerate() {
            for j in 0..2 {
                assert!((grads.of(&p.w).unwrap().data()[i * 2 + j] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates() {
        let x = Tensor::<f64>::full(&[2], 3.0);
        let mut g = Graph::new();
        let a = g.param(&x);
        let b = g.param(&x);
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let w = Tensor::<f64>::ones(&[2, 2]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2]));
        let wv = g.param(&w);
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.of(&w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn inference_graph_matches_and_refuses_backward() {
        let mut rng = RngState::new(4);
        let q = rng.normal_tensor::<f64>(&[2, 3, 4], 1.0);
        let k = rng.normal_tensor::<f64>(&[2, 5, 4], 1.0);
        let v = rng.normal_tensor::<f64>(&[2, 5, 4], 1.0);
        let layout = AttnLayout { groups: 2, heads: 2, queries: 3, keys: 5, head_dim: 2 };
        fn run<'a>(mut g: Graph<'a, f64>, t: [&'a Tensor<f64>; 3], layout: AttnLayout) -> (Tensor<f64>, bool) {
            let (qv, kv, vv) = (g.param(t[0]), g.param(t[1]), g.param(t[2]));
            let y = g.attention(qv, kv, vv, layout, 0.5).unwrap();
            let loss = g.sum(y);
            (g.value(y).clone(), g.backward(loss).is_ok())
        }
        let (a, ok_a) = run(Graph::new(), [&q, &k, &v], layout);
        let (b, ok_b) = run(Graph::inference(), [&q, &k, &v], layout);
        assert_eq!(a, b);
        assert!(ok_a && !ok_b);
    }
}
