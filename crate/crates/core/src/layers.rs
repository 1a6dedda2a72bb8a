//! Parameterized building blocks: linear maps, MLPs, normalization,
//! attention and temporal convolutions.
//!
//! Each layer holds only parameter names; values live in a [`ParamStore`]
//! and are bound into a graph through a [`Ctx`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, Init, ParamStore};
use crate::tensor::{Real, Tensor};

/// A graph under construction together with its parameter binding.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    pub bind: Binding<'s, T>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Ctx {
            g: Graph::new(),
            bind: Binding::new(store),
        }
    }

    pub fn with_graph(store: &'s ParamStore<T>, g: Graph<T>) -> Self {
        Ctx {
            g,
            bind: Binding::new(store),
        }
    }

    /// All parameters of `store` enter as constants.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Ctx {
            g: Graph::new(),
            bind: Binding::frozen(store),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.bind.get(&mut self.g, name)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(prefix: &str, din: usize, dout: usize) -> Self {
        Linear {
            w: join(prefix, "w"),
            b: join(prefix, "b"),
            din,
            dout,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.add(&self.w, &[self.din, self.dout], Init::FanInUniform { fan_in: self.din }, seed)?;
        store.add(&self.b, &[self.dout], Init::Zeros, seed)
    }

    /// Zero weight and bias: the layer outputs zeros until trained.
    pub fn register_zero<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.add(&self.w, &[self.din, self.dout], Init::Zeros, seed)?;
        store.add(&self.b, &[self.dout], Init::Zeros, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.w)?;
        let b = cx.param(&self.b)?;
        let y = cx.g.matmul(x, w)?;
        cx.g.add_bias(y, b)
    }
}

/// Two fully connected layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            l1: Linear::new(&join(prefix, "l1"), din, hidden),
            l2: Linear::new(&join(prefix, "l2"), hidden, dout),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.l1.register(store, seed)?;
        self.l2.register(store, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(cx, x)?;
        let h = cx.g.gelu(h);
        self.l2.forward(cx, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: join(prefix, "gamma"),
            beta: join(prefix, "beta"),
            d,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.add(&self.gamma, &[self.d], Init::Ones, seed)?;
        store.add(&self.beta, &[self.d], Init::Zeros, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma)?;
        let b = cx.param(&self.beta)?;
        cx.g.layer_norm(x, g, b)
    }
}

/// Multi-head attention with query/key/value/output projections.
/// Self-attention passes the same var as query and key/value input.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Self {
        AttentionBlock {
            q: Linear::new(&join(prefix, "q"), d, d),
            k: Linear::new(&join(prefix, "k"), d, d),
            v: Linear::new(&join(prefix, "v"), d, d),
            o: Linear::new(&join(prefix, "o"), d, d),
            heads,
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.register(store, seed)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, query: Var, kv: Var) -> Result<Var> {
        let (dq, dk) = (cx.value(query).last_dim(), cx.value(kv).last_dim());
        if dq != dk {
            return Err(Error::Shape(format!(
                "attention channel mismatch: query {dq}, key/value {dk}"
            )));
        }
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, kv)?;
        let v = self.v.forward(cx, kv)?;
        let a = cx.g.attention(q, k, v, self.heads)?;
        self.o.forward(cx, a)
    }
}

/// Temporal convolution over `[B, T, Din]` with tap offsets fixed at
/// construction.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub w: String,
    pub b: String,
    pub din: usize,
    pub dout: usize,
    pub offsets: Vec<isize>,
}

impl TemporalConv {
    /// Causal dilated convolution: left padding of `(kernel_size - 1) * dilation`,
    /// tap `k` reads `t - (kernel_size - 1 - k) * dilation`.
    pub fn causal(prefix: &str, d: usize, kernel_size: usize, dilation: usize) -> Result<Self> {
        if kernel_size == 0 || dilation == 0 {
            return Err(Error::Parameter(format!(
                "kernel_size ({kernel_size}) and dilation ({dilation}) must be positive"
            )));
        }
        let offsets = (0..kernel_size)
            .map(|k| -(((kernel_size - 1 - k) * dilation) as isize))
            .collect();
        Ok(Self::with_offsets(prefix, d, d, offsets))
    }

    /// Length-preserving centered convolution (odd kernel sizes).
    pub fn same(prefix: &str, d: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "same-padding conv needs an odd kernel size, got {kernel_size}"
            )));
        }
        let half = (kernel_size / 2) as isize;
        Ok(Self::with_offsets(prefix, d, d, (-half..=half).collect()))
    }

    pub fn with_offsets(prefix: &str, din: usize, dout: usize, offsets: Vec<isize>) -> Self {
        TemporalConv {
            w: join(prefix, "w"),
            b: join(prefix, "b"),
            din,
            dout,
            offsets,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.offsets.len()
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let k = self.kernel_size();
        store.add(
            &self.w,
            &[k, self.din, self.dout],
            Init::FanInUniform { fan_in: k * self.din },
            seed,
        )?;
        store.add(&self.b, &[self.dout], Init::Zeros, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.w)?;
        let b = cx.param(&self.b)?;
        let y = cx.g.conv(x, w, self.offsets.clone())?;
        cx.g.add_bias(y, b)
    }
}
