//! Text-anchored transformer fusion.
//!
//! Two pair streams self-attend over `Z_t + Z_v` and `Z_t + Z_a`. In the
//! `v<->t<->a` branch the text/vision stream queries the text/audio stream;
//! the `a<->t<->v` branch mirrors it. Each branch output is
//! `post(Y_pair) + MLP(CA(...)) + post(Y_pair)` and the fused output is the
//! sum of both branches.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{AttentionBlock, Ctx, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Self-attention over the sum of the text stream and one auxiliary stream.
#[derive(Clone, Debug)]
pub struct PairStream {
    pub sa: AttentionBlock,
    pub mlp: Mlp,
}

impl PairStream {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Self {
        PairStream {
            sa: AttentionBlock::new(&format!("{prefix}.sa"), d, heads),
            mlp: Mlp::new(&format!("{prefix}.mlp"), d, d, d),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.sa.register(store, seed)?;
        self.mlp.register(store, seed)
    }

    /// Returns `(SA(X_t + X_o) + (X_t + X_o), MLP of that)`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, z_t: Var, z_other: Var) -> Result<(Var, Var)> {
        if cx.value(z_t).shape() != cx.value(z_other).shape() {
            return Err(Error::Shape(format!(
                "pair stream inputs {:?} vs {:?}",
                cx.value(z_t).shape(),
                cx.value(z_other).shape()
            )));
        }
        let s = cx.g.add(z_t, z_other)?;
        let a = self.sa.forward(cx, s, s)?;
        let sa_out = cx.g.add(a, s)?;
        let y = self.mlp.forward(cx, sa_out)?;
        Ok((sa_out, y))
    }
}

/// One auxiliary direction: its query pair stream, the cross-attention and
/// its two MLPs.
#[derive(Clone, Debug)]
pub struct Branch {
    pub pair: PairStream,
    pub ca: AttentionBlock,
    pub mlp_ca: Mlp,
    pub mlp_post: Mlp,
}

impl Branch {
    pub fn new(prefix: &str, pair_prefix: &str, d: usize, heads: usize) -> Self {
        Branch {
            pair: PairStream::new(pair_prefix, d, heads),
            ca: AttentionBlock::new(&format!("{prefix}.ca"), d, heads),
            mlp_ca: Mlp::new(&format!("{prefix}.mlp_ca"), d, d, d),
            mlp_post: Mlp::new(&format!("{prefix}.mlp_post"), d, d, d),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.pair.register(store, seed)?;
        self.ca.register(store, seed)?;
        self.mlp_ca.register(store, seed)?;
        self.mlp_post.register(store, seed)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    /// `v<->t<->a`: queries from the text/vision stream.
    pub vta: Branch,
    /// `a<->t<->v`: queries from the text/audio stream.
    pub atv: Branch,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub sa: Var,
    pub y_pair: Var,
    pub cross: Var,
    /// `MLP(CA(Q, K, V))`.
    pub y_cross: Var,
    /// `post(Y_pair)`, which enters the branch output twice.
    pub post: Var,
    pub y_prime: Var,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub y: Var,
    pub vta: BranchOutput,
    pub atv: BranchOutput,
}

impl Fusion {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Self {
        Fusion {
            vta: Branch::new(&format!("{prefix}.vta"), &format!("{prefix}.tv"), d, heads),
            atv: Branch::new(&format!("{prefix}.atv"), &format!("{prefix}.ta"), d, heads),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.vta.register(store, seed)?;
        self.atv.register(store, seed)
    }

    /// The same parameters with the two branches exchanged.
    pub fn swapped(&self) -> Self {
        Fusion {
            vta: self.atv.clone(),
            atv: self.vta.clone(),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, z_t: Var, z_a: Var, z_v: Var) -> Result<FusionOutput> {
        let shape = cx.value(z_t).shape().to_vec();
        if cx.value(z_a).shape() != shape.as_slice() || cx.value(z_v).shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "fusion inputs t {:?}, a {:?}, v {:?}",
                shape,
                cx.value(z_a).shape(),
                cx.value(z_v).shape()
            )));
        }
        let (sa_tv, y_tv) = self.vta.pair.forward(cx, z_t, z_v)?;
        let (sa_ta, y_ta) = self.atv.pair.forward(cx, z_t, z_a)?;
        let vta = Self::branch(cx, &self.vta, sa_tv, y_tv, sa_ta)?;
        let atv = Self::branch(cx, &self.atv, sa_ta, y_ta, sa_tv)?;
        let y = cx.g.add(vta.y_prime, atv.y_prime)?;
        Ok(FusionOutput { y, vta, atv })
    }

    fn branch<T: Real>(cx: &mut Ctx<'_, T>, b: &Branch, query: Var, y_pair: Var, kv: Var) -> Result<BranchOutput> {
        let cross = b.ca.forward(cx, query, kv)?;
        let y_cross = b.mlp_ca.forward(cx, cross)?;
        let post = b.mlp_post.forward(cx, y_pair)?;
        let s = cx.g.add(post, y_cross)?;
        let y_prime = cx.g.add(s, post)?;
        Ok(BranchOutput {
            sa: query,
            y_pair,
            cross,
            y_cross,
            post,
            y_prime,
        })
    }
}

/// Regression head: temporal mean then an MLP to one value per sample.
#[derive(Clone, Debug)]
pub struct PredictHead {
    pub mlp: Mlp,
}

impl PredictHead {
    pub fn new(prefix: &str, d: usize) -> Self {
        PredictHead {
            mlp: Mlp::new(prefix, d, d, 1),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.mlp.register(store, seed)
    }

    /// `pooled: [B, d] -> [B]`.
    pub fn forward_pooled<T: Real>(&self, cx: &mut Ctx<'_, T>, pooled: Var) -> Result<Var> {
        let out = self.mlp.forward(cx, pooled)?;
        let b = cx.value(out).shape()[0];
        flatten_unit(cx, out, b)
    }

    /// `y: [B, T, d] -> [B]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<Var> {
        let pooled = cx.g.mean_time(y)?;
        self.forward_pooled(cx, pooled)
    }
}

/// Replacement used when the transformer fusion is ablated: temporal means of
/// the three streams, concatenated and mapped linearly.
#[derive(Clone, Debug)]
pub struct MeanConcatFusion {
    pub proj: Linear,
    pub head: Linear,
}

impl MeanConcatFusion {
    pub fn new(prefix: &str, d: usize) -> Self {
        MeanConcatFusion {
            proj: Linear::new(&format!("{prefix}.proj"), 3 * d, d),
            head: Linear::new(&format!("{prefix}.head"), d, 1),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.proj.register(store, seed)?;
        self.head.register(store, seed)
    }

    /// Returns `(pooled fused vector [B, d], prediction [B])`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, z_t: Var, z_a: Var, z_v: Var) -> Result<(Var, Var)> {
        let pools = [z_a, z_t, z_v]
            .into_iter()
            .map(|z| cx.g.mean_time(z))
            .collect::<Result<Vec<_>>>()?;
        let cat = cx.g.concat(&pools)?;
        let fused = self.proj.forward(cx, cat)?;
        let out = self.head.forward(cx, fused)?;
        let b = cx.value(out).shape()[0];
        Ok((fused, flatten_unit(cx, out, b)?))
    }
}

fn flatten_unit<T: Real>(cx: &mut Ctx<'_, T>, v: Var, b: usize) -> Result<Var> {
    let shape = cx.value(v).shape().to_vec();
    if shape != [b, 1] {
        return Err(Error::Shape(format!("expected [{b}, 1], got {shape:?}")));
    }
    cx.g.reshape(v, vec![b])
}
