//! Named parameter sets and their binding into a [`Graph`].

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::{derive_seed, name_hash, seeded};
use crate::tensor::{Real, Tensor};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub init: Init,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    /// Adds a parameter initialized from `seed` and the parameter name, so the
    /// same name always gets the same values for a given seed.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = seeded(derive_seed(seed, &[name_hash(name)]));
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
        };
        self.insert(name, value, init)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                init,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn at(&self, i: usize) -> (&str, &Param<T>) {
        let (k, v) = self.params.get_index(i).expect("index in range");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            init: p.init,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bit_eq(&b.value))
    }

    /// Names and shapes, the architecture signature of the set.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

/// Lazily binds store parameters into a graph as leaves.
///
/// Trainable parameters become gradient-requiring leaves, frozen ones become
/// constants and therefore never receive a gradient.
pub struct Binding<'s, T: Real> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    force_constant: bool,
}

impl<'s, T: Real> Binding<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Binding {
            store,
            vars: vec![None; store.len()],
            force_constant: false,
        }
    }

    /// Binds every parameter as a constant regardless of its trainable flag.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Binding {
            force_constant: true,
            ..Binding::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not in store")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let p = &self.store.at(i).1;
        let v = g.leaf(p.value.clone(), p.trainable && !self.force_constant);
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Var bound for parameter index `i`, if it was used.
    pub fn var_at(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    /// Adds this graph's parameter gradients into `acc` (store order; entries
    /// for unused or frozen parameters are left untouched).
    pub fn accumulate(&self, grads: &Grads<T>, acc: &mut GradBuffer<T>) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                for (o, &x) in acc.bufs[i].iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }
}

/// Per-parameter gradient accumulator aligned with a store's order.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradBuffer {
            bufs: store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &GradBuffer<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().flatten().all(|&v| v == T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[2, 2], Init::Zeros, 0).unwrap();
        assert!(matches!(s.add("w", &[1], Init::Ones, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let mut a = ParamStore::<f32>::new();
        a.add("x", &[4], Init::FanInUniform { fan_in: 4 }, 7).unwrap();
        a.add("y", &[4], Init::FanInUniform { fan_in: 4 }, 7).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("y", &[4], Init::FanInUniform { fan_in: 4 }, 7).unwrap();
        assert!(a.get("y").unwrap().value.bit_eq(&b.get("y").unwrap().value));
        assert!(!a.get("x").unwrap().value.bit_eq(&a.get("y").unwrap().value));
        assert!(a.get("x").unwrap().value.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", &[2, 2], Init::Ones, 0).unwrap();
        s.set_trainable(false);
        let mut g = Graph::new();
        let mut bind = Binding::new(&s);
        let w = bind.get(&mut g, "w").unwrap();
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l);
        let mut acc = GradBuffer::zeros_like(&s);
        bind.accumulate(&grads, &mut acc);
        assert!(acc.is_zero());
        assert!(grads.get(x).is_some());
    }
}
