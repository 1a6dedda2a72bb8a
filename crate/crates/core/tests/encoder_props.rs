mod common;

use common::{random_tensor, randomize, rng};
use mitr_core::encoder::Encoder;
use mitr_core::layers::Ctx;
use mitr_core::params::ParamStore;
use mitr_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn encode(enc: &Encoder, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut cx = Ctx::frozen(store);
    let v = cx.g.input(x.clone());
    let y = enc.forward(&mut cx, v).unwrap();
    cx.value(y).clone()
}

fn permute_rows(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let d = x.last_dim();
    let mut out = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_contract(seed in any::<u64>(), t in 1usize..10, f in 1usize..7) {
        let enc = Encoder::new("e", f, 8, 2, true).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, seed).unwrap();
        let x = random_tensor(&mut rng(seed), &[1, t, f], 1.0);
        let y = encode(&enc, &store, &x);
        prop_assert_eq!(y.shape(), &[1, t, 8]);
    }

    #[test]
    fn without_positions_encoding_commutes_with_permutation(seed in any::<u64>(), t in 2usize..8) {
        let mut r = rng(seed);
        let enc = Encoder::new("e", 4, 8, 2, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, seed).unwrap();
        randomize(&mut store, &mut r, 0.5);
        let x = random_tensor(&mut r, &[1, t, 4], 1.0);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let a = permute_rows(&encode(&enc, &store, &x), &perm);
        let b = encode(&enc, &store, &permute_rows(&x, &perm));
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn with_positions_permutation_changes_the_output(seed in any::<u64>(), t in 3usize..8) {
        let mut r = rng(seed);
        let enc = Encoder::new("e", 4, 8, 2, true).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, seed).unwrap();
        randomize(&mut store, &mut r, 0.5);
        let x = random_tensor(&mut r, &[1, t, 4], 1.0);
        let perm: Vec<usize> = (0..t).rev().collect();
        let a = permute_rows(&encode(&enc, &store, &x), &perm);
        let b = encode(&enc, &store, &permute_rows(&x, &perm));
        prop_assert!(a.max_abs_diff(&b) > 1e-4);
    }
}
