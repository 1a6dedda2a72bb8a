//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application as a node holding its
//! forward value. [`Graph::backward`] walks the tape in reverse and returns
//! exact gradients for every node that depends on a gradient-requiring leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnDims};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined operator with a hand-written backward.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradient w.r.t. each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Gate(Var),
    Conv {
        x: Var,
        w: Var,
        offsets: Vec<isize>,
    },
    Reverse(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    MeanTime(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    AbsDiffMean(Var, Var),
    SqDiffMean(Var, Var),
    SmoothL1 {
        a: Var,
        b: Var,
        weights: Vec<T>,
        beta: T,
    },
    NegCos {
        a: Var,
        b: Var,
        degenerate: Vec<bool>,
    },
    StopGrad,
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Norm threshold below which cosine similarity is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    replay: Option<Vec<Tensor<T>>>,
    stops: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            replay: None,
            stops: 0,
        }
    }

    /// A graph whose `k`-th [`Graph::stop_gradient`] call yields `values[k]`
    /// instead of its argument. Finite differences taken on such a graph see
    /// stopped branches as constants, matching the analytic gradient.
    pub fn with_stop_replay(values: Vec<Tensor<T>>) -> Self {
        Graph {
            replay: Some(values),
            ..Self::new()
        }
    }

    /// Forward values of every stop-gradient node, in creation order.
    pub fn stop_values(&self) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// Gated activation `tanh(x) * sigmoid(x)`.
    pub fn gate(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gate, Op::Gate(x))
    }

    /// Identity forward; contributes nothing backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stops;
        self.stops += 1;
        let t = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(r) if r.shape() == self.value(x).shape() => r.clone(),
            _ => self.value(x).clone(),
        };
        self.push(t, Op::StopGrad, false)
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(Error::Shape(format!(
                "bias of length {} for last dim {}",
                bv.len(),
                d
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// `x[..., K] @ w[K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, n) = match wv.shape() {
            [k, n] => (*k, *n),
            s => return Err(Error::Shape(format!("matmul weight must be rank 2, got {s:?}"))),
        };
        if xv.last_dim() != k || xv.shape().is_empty() {
            return Err(Error::Shape(format!(
                "matmul: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let data = kernels::matmul(xv.data(), wv.data(), k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Matmul(x, w), ng))
    }

    /// Temporal convolution over `[B, T, Din]` with weight `[K, Din, Dout]`.
    /// Tap `k` reads time `t + offsets[k]`; out-of-range taps read zeros.
    pub fn conv(&mut self, x: Var, w: Var, offsets: Vec<isize>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, t, din) = xv.btd()?;
        let (kk, wi, dout) = match wv.shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::Shape(format!("conv weight must be [K,Din,Dout], got {s:?}"))),
        };
        if kk != offsets.len() || wi != din {
            return Err(Error::Shape(format!(
                "conv: input {:?}, weight {:?}, {} offsets",
                xv.shape(),
                wv.shape(),
                offsets.len()
            )));
        }
        let data = kernels::conv_forward(xv.data(), wv.data(), &offsets, (b, t, din), dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::Conv { x, w, offsets }, ng))
    }

    /// Flips the time axis of a `[B, T, D]` tensor.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, d) = xv.btd()?;
        let data = reverse_time_data(xv.data(), b, t, d);
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reverse(x), ng))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: width {d}, gamma {}, beta {}",
                gv.len(),
                bv.len()
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(xv.data(), gv.data(), bv.data(), d);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, tq, d) = qv.btd()?;
        let (bk, tk, dk) = kv.btd()?;
        if vv.shape() != kv.shape() || bk != b || dk != d {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("width {d} not divisible by {heads} heads")));
        }
        let dims = AttnDims {
            batch: b,
            tq,
            tk,
            d,
            heads,
        };
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), dims);
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            ng,
        ))
    }

    /// Attention weights `[B, H, Tq, Tk]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_vars(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    /// Mean over the time axis: `[B, T, D] -> [B, D]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, d) = xv.btd()?;
        let mut data = vec![T::zero(); b * d];
        let inv = T::one() / T::lit(t as f64);
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in data[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::new(vec![b, d], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanTime(x), ng))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let lead: usize = first[..first.len() - 1].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len() || s[..s.len() - 1] != first[..first.len() - 1] {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(lead * total);
        for r in 0..lead {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(shape, data)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(out, Op::Concat(xs.to_vec()), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Mean absolute difference (element-mean L1 distance).
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "l1_mean")?;
        let n = T::lit(av.len() as f64);
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::AbsDiffMean(a, b), ng))
    }

    /// Mean squared difference (element-mean squared L2 distance).
    pub fn l2_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "l2_mean")?;
        let n = T::lit(av.len() as f64);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::SqDiffMean(a, b), ng))
    }

    /// `sum_i weights[i] * smooth_l1(a[i] - b[i])`, a scalar.
    pub fn smooth_l1_weighted(&mut self, a: Var, b: Var, weights: Vec<T>, beta: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "smooth_l1")?;
        if weights.len() != av.len() {
            return Err(Error::Shape(format!(
                "smooth_l1: {} weights for {} elements",
                weights.len(),
                av.len()
            )));
        }
        let mut s = T::zero();
        for ((&x, &y), &w) in av.data().iter().zip(bv.data()).zip(&weights) {
            if w != T::zero() {
                s += w * kernels::smooth_l1(x - y, beta);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::SmoothL1 { a, b, weights, beta }, ng))
    }

    /// Row-wise negative cosine similarity over the last dimension.
    ///
    /// Rows where either norm falls below [`DEGENERATE_NORM`] yield 0 and are
    /// flagged; see [`Graph::degenerate_rows`].
    pub fn neg_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "neg_cosine")?;
        let d = av.last_dim();
        let rows = av.len() / d;
        let mut out = Vec::with_capacity(rows);
        let mut degenerate = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av.data()[r * d..(r + 1) * d];
            let y = &bv.data()[r * d..(r + 1) * d];
            let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nx.as_f64() < DEGENERATE_NORM || ny.as_f64() < DEGENERATE_NORM {
                out.push(T::zero());
                degenerate.push(true);
            } else {
                let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
                out.push(-(dot / (nx * ny)));
                degenerate.push(false);
            }
        }
        let shape = av.shape()[..av.shape().len() - 1].to_vec();
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::NegCos { a, b, degenerate }, ng))
    }

    pub fn degenerate_rows(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::NegCos { degenerate, .. } => Some(degenerate),
            _ => None,
        }
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp<T>>) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        ))
    }

    /// Reverse pass seeded with ones at `output` (a scalar in typical use).
    pub fn backward(&self, output: Var) -> Grads<T> {
        let seed = vec![T::one(); self.value(output).len()];
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Grads<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(output) {
            return Grads { grads };
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(d) = self.acc(grads, *b) {
                    let n = d.len();
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Matmul(x, w) => {
                let wv = self.value(*w);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                if let Some(d) = self.acc(grads, *x) {
                    kernels::matmul_grad_x(g, wv.data(), k, n, d);
                }
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *w) {
                    kernels::matmul_grad_w(xv, g, k, n, d);
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gy), &y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gy * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gy), &y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gy * y * (T::one() - y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gy * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Gate(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gy * kernels::gate_grad(xi);
                    }
                }
            }
            Op::Conv { x, w, offsets } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let dims = xv.btd().expect("checked at forward");
                let dout = wv.shape()[2];
                // Split borrows: x and w are distinct nodes.
                let mut dx = if self.ng(*x) { grads[x.0].take() } else { None };
                let mut dw = if self.ng(*w) { grads[w.0].take() } else { None };
                if self.ng(*x) && dx.is_none() {
                    dx = Some(vec![T::zero(); xv.len()]);
                }
                if self.ng(*w) && dw.is_none() {
                    dw = Some(vec![T::zero(); wv.len()]);
                }
                kernels::conv_backward(
                    xv.data(),
                    wv.data(),
                    g,
                    offsets,
                    dims,
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if dx.is_some() {
                    grads[x.0] = dx;
                }
                if dw.is_some() {
                    grads[w.0] = dw;
                }
            }
            Op::Reverse(x) => {
                let (b, t, d) = node.value.btd().expect("checked at forward");
                if let Some(dx) = self.acc(grads, *x) {
                    let r = reverse_time_data(g, b, t, d);
                    dx.iter_mut().zip(r).for_each(|(o, v)| *o += v);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dx = self.take_or_zero(grads, *x);
                let mut dg = self.take_or_zero(grads, *gamma);
                let mut db = self.take_or_zero(grads, *beta);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    gv,
                    d,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore(grads, *x, dx);
                self.restore(grads, *gamma, dg);
                self.restore(grads, *beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                // q, k and v may alias (self-attention); accumulate into
                // scratch buffers then add.
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = self.ng(*q).then(|| vec![T::zero(); qv.len()]);
                let mut dk = self.ng(*k).then(|| vec![T::zero(); kv.len()]);
                let mut dv = self.ng(*v).then(|| vec![T::zero(); vv.len()]);
                kernels::attention_backward(
                    qv,
                    kv,
                    vv,
                    probs,
                    g,
                    *dims,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(buf), Some(d)) = (buf, self.acc(grads, var)) {
                        d.iter_mut().zip(buf).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::MeanTime(x) => {
                let (b, t, d) = self.value(*x).btd().expect("checked at forward");
                let inv = T::one() / T::lit(t as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        let gr = &g[bi * d..(bi + 1) * d];
                        for ti in 0..t {
                            let row = &mut dx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            row.iter_mut().zip(gr).for_each(|(o, &v)| *o += v * inv);
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let lead = node.value.len() / total;
                let mut col = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    if let Some(dx) = self.acc(grads, x) {
                        for r in 0..lead {
                            let src = &g[r * total + col..r * total + col + w];
                            dx[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, &v)| *o += v);
                        }
                    }
                    col += w;
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let s = g[0] / T::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::AbsDiffMean(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0] / T::lit(av.len() as f64);
                let sign = |x: T, y: T| {
                    let d = x - y;
                    if d > T::zero() {
                        s
                    } else if d < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                };
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += sign(x, y);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o -= sign(x, y);
                    }
                }
            }
            Op::SqDiffMean(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += s * (x - y);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::SmoothL1 {
                a,
                b,
                weights,
                beta,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let gd = |i: usize| weights[i] * g[0] * kernels::smooth_l1_grad(av[i] - bv[i], *beta);
                if let Some(d) = self.acc(grads, *a) {
                    for (i, o) in d.iter_mut().enumerate() {
                        if weights[i] != T::zero() {
                            *o += gd(i);
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (i, o) in d.iter_mut().enumerate() {
                        if weights[i] != T::zero() {
                            *o -= gd(i);
                        }
                    }
                }
            }
            Op::NegCos { a, b, degenerate } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let d = self.value(*a).last_dim();
                let rows = av.len() / d;
                let mut da = self.ng(*a).then(|| vec![T::zero(); av.len()]);
                let mut db = self.ng(*b).then(|| vec![T::zero(); bv.len()]);
                for r in 0..rows {
                    if degenerate[r] {
                        continue;
                    }
                    let x = &av[r * d..(r + 1) * d];
                    let y = &bv[r * d..(r + 1) * d];
                    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let cos = -node.value.data()[r];
                    let gr = -g[r];
                    if let Some(da) = da.as_deref_mut() {
                        for i in 0..d {
                            da[r * d + i] += gr * (y[i] / (nx * ny) - cos * x[i] / (nx * nx));
                        }
                    }
                    if let Some(db) = db.as_deref_mut() {
                        for i in 0..d {
                            db[r * d + i] += gr * (x[i] / (nx * ny) - cos * y[i] / (ny * ny));
                        }
                    }
                }
                for (var, buf) in [(*a, da), (*b, db)] {
                    if let (Some(buf), Some(dst)) = (buf, self.acc(grads, var)) {
                        dst.iter_mut().zip(buf).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (&var, gi) in inputs.iter().zip(gs) {
                    if let Some(d) = self.acc(grads, var) {
                        d.iter_mut().zip(gi).for_each(|(o, x)| *o += x);
                    }
                }
            }
        }
    }

    fn take_or_zero(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.value(v).len()]),
        )
    }

    fn restore(&self, grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
        if buf.is_some() {
            grads[v.0] = buf;
        }
    }
}

pub(crate) fn reverse_time_data<T: Copy>(x: &[T], b: usize, t: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for ti in (0..t).rev() {
            out.extend_from_slice(&x[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient w.r.t. `v`, or `None` when `v` does not influence the output
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zeros when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}
