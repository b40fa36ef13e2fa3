//! Parameterized layers and the forward-pass context they run in.

mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use dropout::Dropout;
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS};
pub use pool::MaxPool2d;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::{Distribution, Uniform};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Train mode enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Context<'a> {
    pub graph: &'a mut Graph,
    params: &'a ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Context<'a> {
    /// `seed` drives dropout masks; equal seeds give equal masks.
    pub fn new(graph: &'a mut Graph, params: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            graph,
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Queues a new value for a state buffer (e.g. a running mean).
    pub fn record_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }
}

/// A layer with one input and one output.
pub trait Module {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var>;
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded generator in construction order.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.qualify(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(self.rng)).expect("positive extents");
        self.store.insert(self.qualify(name), t, true)
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(self.rng)).expect("positive extents");
        self.store.insert(self.qualify(name), t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        let t = Tensor::full(shape.to_vec(), value).expect("positive extents");
        self.store.insert(self.qualify(name), t, trainable)
    }
}

/// Standard initialization bound `sqrt(1 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Token and position embeddings use `N(0, 0.02²)`.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn store_with(build: impl FnOnce(&mut ParamBuilder)) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        build(&mut ParamBuilder::new(&mut store, &mut rng));
        store
    }
}
