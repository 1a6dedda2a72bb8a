mod common;

use common::{randomize, rng, rows};
use mitr_core::layers::{Ctx, TemporalConv};
use mitr_core::mibtrl::{Mibtrl, MibtrlConfig};
use mitr_core::params::ParamStore;
use mitr_core::Tensor;
use rand::Rng;

const T: usize = 16;
const D: usize = 3;

fn conv_out(conv: &TemporalConv, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut cx = Ctx::frozen(store);
    let v = cx.g.input(x.clone());
    let y = conv.forward(&mut cx, v).unwrap();
    cx.value(y).clone()
}

#[test]
fn dilated_causal_conv_ignores_the_future() {
    for dilation in [1usize, 2, 4, 8] {
        let mut r = rng(100 + dilation as u64);
        let conv = TemporalConv::causal("c", D, 2, dilation).unwrap();
        let mut store = ParamStore::new();
        conv.register(&mut store, 1).unwrap();
        randomize(&mut store, &mut r, 1.0);
        for _ in 0..100 {
            let x: Tensor<f32> = common::random_tensor(&mut r, &[1, T, D], 1.0);
            let t0 = r.random_range(0..T - 1);
            let mut xp = x.clone();
            for v in &mut xp.data_mut()[(t0 + 1) * D..] {
                *v += r.random_range(-3.0..3.0);
            }
            let (a, b) = (conv_out(&conv, &store, &x), conv_out(&conv, &store, &xp));
            assert_eq!(common::bits(&rows(&a, 0, t0 + 1)), common::bits(&rows(&b, 0, t0 + 1)), "d={dilation} t0={t0}");
            assert_ne!(rows(&a, t0 + 1, T), rows(&b, t0 + 1, T));
        }
    }
}

fn mibtrl(n: usize, seed: u64) -> (Mibtrl, ParamStore<f32>) {
    let m = Mibtrl::new(
        "m",
        MibtrlConfig {
            d: D,
            n_blocks: n,
            kernel_size: 2,
            entry_kernel: 3,
        },
    )
    .unwrap();
    let mut store = ParamStore::new();
    m.register(&mut store, seed).unwrap();
    randomize(&mut store, &mut rng(seed), 0.7);
    (m, store)
}

/// Chain outputs on a given entry stream: (forward outs, backward outs, z).
fn chains(m: &Mibtrl, store: &ParamStore<f32>, u: &Tensor<f32>) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>, Tensor<f32>) {
    let mut cx = Ctx::frozen(store);
    let v = cx.g.input(u.clone());
    let out = m.chains(&mut cx, v).unwrap();
    (
        out.forward_outs.iter().map(|&v| cx.value(v).clone()).collect(),
        out.backward_outs.iter().map(|&v| cx.value(v).clone()).collect(),
        cx.value(out.z).clone(),
    )
}

#[test]
fn forward_chain_is_causal_backward_chain_anti_causal() {
    let (m, store) = mibtrl(4, 5);
    let mut r = rng(9);
    for _ in 0..50 {
        let u: Tensor<f32> = common::random_tensor(&mut r, &[1, T, D], 1.0);
        let t0 = r.random_range(1..T - 1);
        let mut after = u.clone();
        after.data_mut()[(t0 + 1) * D] += 1.5;
        let mut before = u.clone();
        before.data_mut()[(t0 - 1) * D + 1] -= 1.5;
        let (f0, b0, _) = chains(&m, &store, &u);
        let (f1, _, _) = chains(&m, &store, &after);
        let (_, b2, _) = chains(&m, &store, &before);
        for i in 0..4 {
            assert_eq!(common::bits(&rows(&f0[i], 0, t0 + 1)), common::bits(&rows(&f1[i], 0, t0 + 1)));
            assert_eq!(common::bits(&rows(&b0[i], t0, T)), common::bits(&rows(&b2[i], t0, T)));
        }
    }
}

#[test]
fn every_step_reaches_z_at_that_step() {
    let (m, store) = mibtrl(1, 11);
    let mut r = rng(12);
    let u: Tensor<f32> = common::random_tensor(&mut r, &[1, T, D], 1.0);
    let (_, _, z) = chains(&m, &store, &u);
    for t in 0..T {
        let mut up = u.clone();
        for c in 0..D {
            up.data_mut()[t * D + c] += 0.5;
        }
        let (_, _, zp) = chains(&m, &store, &up);
        assert_ne!(rows(&z, t, t + 1), rows(&zp, t, t + 1), "dead position {t}");
    }
}

#[test]
fn z_is_the_exact_sum_of_levels() {
    let (m, store) = mibtrl(3, 21);
    let mut r = rng(22);
    let u: Tensor<f32> = common::random_tensor(&mut r, &[2, T, D], 1.0);
    let mut cx = Ctx::frozen(&store);
    let v = cx.g.input(u);
    let out = m.chains(&mut cx, v).unwrap();
    let mut acc = cx.value(out.z_levels[0]).clone();
    for (i, lvl) in out.z_levels.iter().enumerate() {
        let f = cx.value(out.forward_outs[i]).data();
        let b = cx.value(out.backward_outs[i]).data();
        let expect: Vec<f32> = f.iter().zip(b).map(|(x, y)| x + y).collect();
        assert_eq!(cx.value(*lvl).data(), expect.as_slice());
        if i > 0 {
            acc.data_mut().iter_mut().zip(cx.value(*lvl).data()).for_each(|(a, b)| *a += b);
        }
    }
    assert!(acc.bit_eq(cx.value(out.z)));
}
