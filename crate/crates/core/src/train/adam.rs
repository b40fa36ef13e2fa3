//! Adam with bias correction and optional L2 weight decay.

use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every trainable entry of one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients held in `store`. Every trainable
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
        if let Some(&id) = ids.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(TensorError::Config(format!("missing gradient for parameter {}", store.get(id).name)));
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for id in ids {
            let (w, g) = store.value_and_grad(id);
            let g = g.expect("checked above");
            let n = w.numel();
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::from_parts(w.shape().to_vec(), vec![0.0; n]));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::from_parts(w.shape().to_vec(), vec![0.0; n]));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (wi, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi + weight_decay * *wi;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                *wi -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_parts(vec![1], vec![w]), true);
        s.insert("running", Tensor::from_parts(vec![1], vec![7.0]), false);
        set_grad(&mut s, id, g);
        s
    }

    fn set_grad(s: &mut ParamStore, id: crate::ParamId, g: f64) {
        let mut graph = crate::Graph::new();
        let x = graph.param(s, id);
        let y = graph.scale(x, g).unwrap();
        let loss = graph.sum(y).unwrap();
        let grads = graph.backward(loss).unwrap();
        s.zero_grad();
        s.accumulate(&grads).unwrap();
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -2.0, 1e3] {
            let mut s = store(1.0, g);
            let mut adam = Adam::new(AdamConfig::default());
            adam.step(&mut s, 0.01).unwrap();
            let w = s.value(s.id("w").unwrap()).data()[0];
            assert!((w - (1.0 - 0.01 * g.signum())).abs() < 1e-6, "{w}");
            assert_eq!(s.value(s.id("running").unwrap()).data()[0], 7.0);
        }
    }

    #[test]
    fn later_steps_see_gradient_magnitude() {
        let run = |scale: f64| {
            let mut s = store(0.0, 1.0);
            let id = s.id("w").unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            adam.step(&mut s, 0.1).unwrap();
            set_grad(&mut s, id, scale);
            adam.step(&mut s, 0.1).unwrap();
            s.value(id).data()[0]
        };
        assert_ne!(run(1.0), run(2.0));
    }

    #[test]
    fn weight_decay_acts_without_gradient_signal() {
        let mut s = store(2.0, 0.0);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut s, 0.01).unwrap();
        assert!(s.value(s.id("w").unwrap()).data()[0] < 2.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut s = store(0.25, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.value(s.id("w").unwrap()).data()[0], 0.25);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn identical_parameters_move_identically() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::from_parts(vec![2], vec![0.5, -0.5]), true);
        let b = s.insert("b", Tensor::from_parts(vec![2], vec![0.5, -0.5]), true);
        let mut graph = crate::Graph::new();
        let (x, y) = (graph.param(&s, a), graph.param(&s, b));
        let sum = graph.add(x, y).unwrap();
        let sq = graph.mul(sum, sum).unwrap();
        let loss = graph.sum(sq).unwrap();
        let grads = graph.backward(loss).unwrap();
        s.accumulate(&grads).unwrap();
        Adam::new(AdamConfig::default()).step(&mut s, 0.05).unwrap();
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store(1.0, 1.0);
        s.zero_grad();
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut s, 0.01).unwrap_err();
        assert!(err.to_string().contains("parameter w"), "{err}");
        assert_eq!(adam.steps(), 0);
    }
}
