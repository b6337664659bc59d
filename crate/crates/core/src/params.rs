//! Named parameter storage and the per-pass graph that binds parameters to
//! tape leaves.
//!
//! Model structs hold only [`ParamId`]s, so one model description serves
//! both `f32` and `f64` stores. A [`Graph`] is created per forward pass; it
//! lazily turns each parameter it touches into a leaf and collects the
//! batch-norm statistic updates the pass produces.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Batch-norm running statistics are stored here too, as non-trainable
    /// entries.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: shape {:?}, expected {:?}", slot.name, value.shape(), slot.value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Creates parameters under dotted scopes, drawing initial values from a
/// seeded generator.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Runs `f` with `name` appended to the current scope.
    pub fn scope<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.as_ref().to_owned());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_owned());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value, true)
    }

    /// A non-trainable entry, e.g. a running statistic.
    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value, false)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::InvalidArgument(format!("uniform bound {bound}: {e}")))?;
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)));
        self.tensor(name, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("normal std {std}: {e}")))?;
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)));
        self.tensor(name, value)
    }

    pub fn from_fn(&mut self, name: &str, shape: &[usize], mut f: impl FnMut(&mut ChaCha8Rng, usize) -> f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |i| T::lit(f(rng, i)));
        self.tensor(name, value)
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// One forward (and optional backward) pass over a [`ParamStore`].
pub struct Graph<'s, T> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    param_grads: bool,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A training pass: batch statistics, gradients for trainable params.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::new(), true, true)
    }

    /// An inference pass: running statistics, no gradient bookkeeping.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::with_tape(store, Tape::inference(), false, false)
    }

    /// Full control over mode. `param_grads = false` freezes parameters
    /// while still allowing gradients w.r.t. explicit input leaves.
    pub fn with_tape(store: &'s ParamStore<T>, tape: Tape<T>, training: bool, param_grads: bool) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
            training,
            param_grads,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self.tape.leaf(entry.value.clone(), entry.trainable && self.param_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Batch norm whose running statistics live in the store under
    /// `mean`/`var`. Training passes queue the updated statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId) -> Result<Var> {
        let stats = RunningStats {
            mean: self.store.value(mean).clone(),
            var: self.store.value(var).clone(),
        };
        let (g, b) = (self.param(gamma), self.param(beta));
        let (y, update) = self.tape.batch_norm2d(x, g, b, &stats, self.training)?;
        if let Some(u) = update {
            self.stat_updates.push((mean, u.mean));
            self.stat_updates.push((var, u.var));
        }
        Ok(y)
    }

    /// Running-statistic updates produced so far, to be written back with
    /// [`apply_updates`].
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients for every bound trainable parameter, in id order.
    pub fn param_gradients(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.entry(ParamId(i)).trainable {
                    return None;
                }
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.entry(ParamId(i)).value.shape().to_vec()));
                Some((ParamId(i), g))
            })
            .collect()
    }
}

pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, v) in updates {
        store.set(id, v)?;
    }
    Ok(())
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_names_are_unique() {
        let mut b = ParamBuilder::<f64>::new(0);
        let a = b.scope("enc", |b| b.scope("conv", |b| b.zeros("weight", &[2, 2]))).unwrap();
        assert!(b.scope("enc", |b| b.scope("conv", |b| b.zeros("weight", &[1]))).is_err());
        let store = b.finish();
        assert_eq!(store.name(a), "enc.conv.weight");
        assert_eq!(store.find("enc.conv.weight"), Some(a));
    }

    #[test]
    fn builder_is_seeded() {
        let draw = |seed| {
            let mut b = ParamBuilder::<f32>::new(seed);
            b.normal("w", &[8], 1.0).unwrap();
            b.finish()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn params_bind_once_and_frozen_ones_get_no_grad() {
        let mut b = ParamBuilder::<f64>::new(0);
        let w = b.ones("w", &[3]).unwrap();
        let s = b.buffer("s", Tensor::ones(vec![3])).unwrap();
        let store = b.finish();
        let mut g = Graph::train(&store);
        let (v1, v2, sv) = (g.param(w), g.param(w), g.param(s));
        assert_eq!(v1, v2);
        let p = g.mul(v1, sv).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        let pg = g.param_gradients(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, w);
        assert!(grads.get(sv).is_none());
    }
}
