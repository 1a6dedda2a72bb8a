#![allow(dead_code)]

use mitr_core::params::ParamStore;
use mitr_core::rng::{seeded, Rng};
use mitr_core::{Real, Tensor};
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

pub fn random_tensor<T: Real>(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..scale)))
}

/// Overwrites every parameter, including zero-initialized projections.
pub fn randomize<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, scale: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::lit(rng.random_range(-scale..scale));
        }
    }
}

/// Rows `[lo, hi)` of a `[1, T, d]` tensor.
pub fn rows<T: Real>(x: &Tensor<T>, lo: usize, hi: usize) -> Vec<T> {
    let d = x.last_dim();
    x.data()[lo * d..hi * d].to_vec()
}

pub fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|v| v.to_bits()).collect()
}
