//! Bidirectional temporal representation block.
//!
//! Two same-padding entry convolutions feed a forward chain and a backward
//! chain of gated dilated-causal generation blocks. Block `i` (1-based) uses
//! dilation `2^(i-1)`. The backward chain runs on the time-reversed stream and
//! its outputs are reversed back, so it is anti-causal in natural time. The
//! depth-`i` outputs of both chains are added into `Z^i` and `Z = sum_i Z^i`.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Ctx, Linear, TemporalConv};
use crate::params::ParamStore;
use crate::tensor::Real;

/// One time-aware generation block: `y' = Conv1x1(tanh(c) * sigmoid(c)) + y`
/// with `c = DConv(y, dilation)`.
#[derive(Clone, Debug)]
pub struct GenBlock {
    pub dconv: TemporalConv,
    pub proj: Linear,
    pub dilation: usize,
}

impl GenBlock {
    pub fn new(prefix: &str, d: usize, kernel_size: usize, dilation: usize) -> Result<Self> {
        Ok(GenBlock {
            dconv: TemporalConv::causal(&format!("{prefix}.dconv"), d, kernel_size, dilation)?,
            proj: Linear::new(&format!("{prefix}.proj"), d, d),
            dilation,
        })
    }

    /// The 1x1 projection starts at zero so the block is the identity at init.
    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.dconv.register(store, seed)?;
        self.proj.register_zero(store, seed)
    }

    /// Returns `(y_next, skip)`; the integrated output is the residual output
    /// itself, so both are the same var.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, y: Var) -> Result<(Var, Var)> {
        let c = self.dconv.forward(cx, y)?;
        let xi = cx.g.gate(c);
        let eta = self.proj.forward(cx, xi)?;
        let out = cx.g.add(eta, y)?;
        Ok((out, out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MibtrlConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub entry_kernel: usize,
}

#[derive(Clone, Debug)]
pub struct Mibtrl {
    pub entry: [TemporalConv; 2],
    pub forward_chain: Vec<GenBlock>,
    pub backward_chain: Vec<GenBlock>,
}

/// Intermediate values exposed for inspection and tests.
#[derive(Clone, Debug)]
pub struct MibtrlOutput {
    pub entry: Var,
    pub forward_outs: Vec<Var>,
    /// Backward-chain outputs already restored to natural time order.
    pub backward_outs: Vec<Var>,
    pub z_levels: Vec<Var>,
    pub z: Var,
}

pub fn dilation_schedule(n: usize) -> Vec<usize> {
    (0..n).map(|i| 1usize << i).collect()
}

impl Mibtrl {
    pub fn new(prefix: &str, cfg: MibtrlConfig) -> Result<Self> {
        if cfg.n_blocks == 0 {
            return Err(Error::Parameter("MIB-TRL needs at least one block per chain".into()));
        }
        let chain = |dir: &str| -> Result<Vec<GenBlock>> {
            dilation_schedule(cfg.n_blocks)
                .into_iter()
                .enumerate()
                .map(|(i, dil)| GenBlock::new(&format!("{prefix}.{dir}.{i}"), cfg.d, cfg.kernel_size, dil))
                .collect()
        };
        Ok(Mibtrl {
            entry: [
                TemporalConv::same(&format!("{prefix}.entry0"), cfg.d, cfg.entry_kernel)?,
                TemporalConv::same(&format!("{prefix}.entry1"), cfg.d, cfg.entry_kernel)?,
            ],
            forward_chain: chain("fwd")?,
            backward_chain: chain("bwd")?,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.forward_chain.len()
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for e in &self.entry {
            e.register(store, seed)?;
        }
        for b in self.forward_chain.iter().chain(&self.backward_chain) {
            b.register(store, seed)?;
        }
        Ok(())
    }

    /// Same blocks with the two chains exchanged.
    pub fn swapped(&self) -> Self {
        Mibtrl {
            entry: self.entry.clone(),
            forward_chain: self.backward_chain.clone(),
            backward_chain: self.forward_chain.clone(),
        }
    }

    /// `E_m: [B, T, d] -> Z_m: [B, T, d]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, e: Var) -> Result<MibtrlOutput> {
        let u = self.entry[0].forward(cx, e)?;
        let u = self.entry[1].forward(cx, u)?;
        self.chains(cx, u)
    }

    /// Runs both chains on an entry-convolution output.
    pub fn chains<T: Real>(&self, cx: &mut Ctx<'_, T>, u: Var) -> Result<MibtrlOutput> {
        let mut forward_outs = Vec::with_capacity(self.n_blocks());
        let mut y = u;
        for b in &self.forward_chain {
            let (next, skip) = b.forward(cx, y)?;
            forward_outs.push(skip);
            y = next;
        }
        let mut backward_outs = Vec::with_capacity(self.n_blocks());
        let mut y = cx.g.reverse_time(u)?;
        for b in &self.backward_chain {
            let (next, skip) = b.forward(cx, y)?;
            backward_outs.push(cx.g.reverse_time(skip)?);
            y = next;
        }
        let mut z_levels = Vec::with_capacity(self.n_blocks());
        for (&f, &b) in forward_outs.iter().zip(&backward_outs) {
            z_levels.push(cx.g.add(f, b)?);
        }
        let mut z = z_levels[0];
        for &zi in &z_levels[1..] {
            z = cx.g.add(z, zi)?;
        }
        Ok(MibtrlOutput {
            entry: u,
            forward_outs,
            backward_outs,
            z_levels,
            z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cfg(n: usize) -> MibtrlConfig {
        MibtrlConfig {
            d: 4,
            n_blocks: n,
            kernel_size: 2,
            entry_kernel: 3,
        }
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = seeded(seed);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
        }
    }

    #[test]
    fn schedule_doubles() {
        assert_eq!(dilation_schedule(4), vec![1, 2, 4, 8]);
        let m = Mibtrl::new("m", cfg(4)).unwrap();
        let dil: Vec<usize> = m.forward_chain.iter().map(|b| b.dilation).collect();
        assert_eq!(dil, vec![1, 2, 4, 8]);
        let dil: Vec<usize> = m.backward_chain.iter().map(|b| b.dilation).collect();
        assert_eq!(dil, vec![1, 2, 4, 8]);
        assert!(matches!(Mibtrl::new("m", cfg(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_projection_block_is_identity() {
        let b = GenBlock::new("g", 4, 2, 2).unwrap();
        let mut s = ParamStore::<f64>::new();
        b.register(&mut s, 3).unwrap();
        let mut cx = Ctx::new(&s);
        let mut rng = seeded(1);
        let y = cx.g.input(Tensor::from_fn(&[1, 6, 4], |_| rng.random_range(-1.0..1.0)));
        let (out, _) = b.forward(&mut cx, y).unwrap();
        assert!(cx.value(out).bit_eq(cx.value(y)));
    }

    #[test]
    fn single_block_z_is_its_only_level() {
        let m = Mibtrl::new("m", cfg(1)).unwrap();
        let mut s = ParamStore::<f64>::new();
        m.register(&mut s, 1).unwrap();
        randomize(&mut s, 2);
        let mut cx = Ctx::new(&s);
        let x = cx.g.input(Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.37).sin()));
        let out = m.forward(&mut cx, x).unwrap();
        assert!(cx.value(out.z).bit_eq(cx.value(out.z_levels[0])));
    }

    #[test]
    fn init_equals_two_n_times_entry() {
        let n = 3;
        let m = Mibtrl::new("m", cfg(n)).unwrap();
        let mut s = ParamStore::<f64>::new();
        m.register(&mut s, 9).unwrap();
        let mut cx = Ctx::new(&s);
        let x = cx.g.input(Tensor::from_fn(&[1, 7, 4], |i| (i as f64 * 0.61).cos()));
        let out = m.forward(&mut cx, x).unwrap();
        let u = cx.value(out.entry).data().to_vec();
        for (z, e) in cx.value(out.z).data().iter().zip(&u) {
            assert!((z - 2.0 * n as f64 * e).abs() < 1e-12);
        }
    }
}
