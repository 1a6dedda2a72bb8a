//! Unimodal self-attentive encoder producing contextual features `E_m`.

use crate::data::ModalitySequence;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{AttentionBlock, Ctx, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Input projection, optional sinusoidal positions, then one post-norm
/// transformer block (attention and feed-forward, each with a residual).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub proj: Linear,
    pub attn: AttentionBlock,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
    pub positional: bool,
    pub d: usize,
}

impl Encoder {
    pub fn new(prefix: &str, input_width: usize, d: usize, heads: usize, positional: bool) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Parameter(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Encoder {
            proj: Linear::new(&format!("{prefix}.proj"), input_width, d),
            attn: AttentionBlock::new(&format!("{prefix}.attn"), d, heads),
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            ff: Mlp::new(&format!("{prefix}.ff"), d, 2 * d, d),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
            positional,
            d,
        })
    }

    pub fn input_width(&self) -> usize {
        self.proj.din
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.proj.register(store, seed)?;
        self.attn.register(store, seed)?;
        self.ln1.register(store, seed)?;
        self.ff.register(store, seed)?;
        self.ln2.register(store, seed)
    }

    /// `x: [B, T, f] -> [B, T, d]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (b, t, f) = cx.value(x).btd()?;
        if f != self.input_width() {
            return Err(Error::Shape(format!(
                "encoder expects width {}, got {f}",
                self.input_width()
            )));
        }
        let mut h = self.proj.forward(cx, x)?;
        if self.positional {
            let pe = sinusoidal::<T>(t, self.d);
            let tiled = Tensor::from_fn(&[b, t, self.d], |i| pe.data()[i % (t * self.d)]);
            let pe = cx.g.constant(tiled);
            h = cx.g.add(h, pe)?;
        }
        let a = self.attn.forward(cx, h, h)?;
        let r = cx.g.add(h, a)?;
        let h1 = self.ln1.forward(cx, r)?;
        let f = self.ff.forward(cx, h1)?;
        let r = cx.g.add(h1, f)?;
        self.ln2.forward(cx, r)
    }
}

/// Standard sinusoidal position table `[T, d]`.
pub fn sinusoidal<T: Real>(t: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[t, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Encodes one sequence with frozen parameters, returning `[T, d]`.
pub fn encode(x: &ModalitySequence, encoder: &Encoder, store: &ParamStore<f32>) -> Result<Tensor<f32>> {
    let mut cx = Ctx::frozen(store);
    let input = cx.g.constant(x.features.clone().reshape(vec![1, x.time_steps(), x.width()])?);
    let out = encoder.forward(&mut cx, input)?;
    let (_, t, d) = cx.value(out).btd()?;
    cx.value(out).clone().reshape(vec![t, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::rng::seeded;
    use rand::Rng;

    fn setup(positional: bool) -> (Encoder, ParamStore<f32>) {
        let enc = Encoder::new("enc", 3, 8, 4, positional).unwrap();
        let mut s = ParamStore::new();
        enc.register(&mut s, 5).unwrap();
        (enc, s)
    }

    fn random_seq(t: usize, seed: u64) -> ModalitySequence {
        let mut rng = seeded(seed);
        ModalitySequence::new(
            Modality::A,
            Tensor::from_fn(&[t, 3], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_and_width_check() {
        let (enc, s) = setup(true);
        let out = encode(&random_seq(6, 1), &enc, &s).unwrap();
        assert_eq!(out.shape(), &[6, 8]);
        let bad = ModalitySequence::new(Modality::A, Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(encode(&bad, &enc, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn single_step_ignores_query_and_key_projections() {
        let (enc, mut s) = setup(true);
        let x = random_seq(1, 2);
        let before = encode(&x, &enc, &s).unwrap();
        for name in [&enc.attn.q.w, &enc.attn.k.w] {
            let p = s.get_mut(name).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = *v * -3.0 + 0.5);
        }
        let after = encode(&x, &enc, &s).unwrap();
        assert!(before.bit_eq(&after));
    }

    #[test]
    fn positional_encoding_breaks_permutation_equivariance() {
        let x = random_seq(5, 3);
        let perm = [2usize, 0, 4, 1, 3];
        let permuted = {
            let mut p = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                let row = x.row(src).to_vec();
                p.features.data_mut()[dst * 3..(dst + 1) * 3].copy_from_slice(&row);
            }
            p
        };
        for positional in [false, true] {
            let (enc, s) = setup(positional);
            let a = encode(&x, &enc, &s).unwrap();
            let b = encode(&permuted, &enc, &s).unwrap();
            // Output rows of the permuted input, un-permuted.
            let mut max_diff = 0.0f64;
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..8 {
                    let d = (a.data()[src * 8 + j] - b.data()[dst * 8 + j]).abs() as f64;
                    max_diff = max_diff.max(d);
                }
            }
            if positional {
                assert!(max_diff > 1e-3, "positions should matter: {max_diff}");
            } else {
                assert!(max_diff < 1e-5, "should commute with permutation: {max_diff}");
            }
        }
    }

    #[test]
    fn zeroed_rows_identical_inputs_identical_outputs() {
        let (enc, s) = setup(true);
        let mut x = random_seq(4, 4);
        let mut y = random_seq(4, 5);
        // Make them agree everywhere except row 1, then zero row 1 in both.
        for t in [0, 2, 3] {
            let r = x.row(t).to_vec();
            y.features.data_mut()[t * 3..(t + 1) * 3].copy_from_slice(&r);
        }
        x.features.data_mut()[3..6].iter_mut().for_each(|v| *v = 0.0);
        y.features.data_mut()[3..6].iter_mut().for_each(|v| *v = 0.0);
        assert!(encode(&x, &enc, &s).unwrap().bit_eq(&encode(&y, &enc, &s).unwrap()));
    }
}
