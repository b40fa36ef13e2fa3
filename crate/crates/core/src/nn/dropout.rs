use rand::Rng;

use super::{Context, Mode, Module};
use crate::autodiff::Var;
use crate::tensor::{Result, Tensor, TensorError};

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` in train mode.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidShape {
                op: "dropout",
                shape: vec![],
                reason: format!("rate {p} outside [0, 1)"),
            });
        }
        Ok(Self { p })
    }
}

impl Module for Dropout {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        if cx.mode() == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = cx.graph.shape(x).to_vec();
        let rng = cx.rng();
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })?;
        let m = cx.graph.constant(mask);
        cx.graph.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::ParamStore;

    #[test]
    fn eval_mode_is_exact_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 1);
        let x = cx.graph.constant(Tensor::from_fn([3, 7], |i| i as f64 * 0.1).unwrap());
        let y = Dropout::new(0.5).unwrap().forward(&mut cx, x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_rate_is_identity_in_train_mode() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Train, 1);
        let x = cx.graph.constant(Tensor::ones([10]).unwrap());
        let y = Dropout::new(0.0).unwrap().forward(&mut cx, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn half_rate_keeps_half_and_doubles_survivors() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Train, 42);
        let x = cx.graph.constant(Tensor::ones([10_000]).unwrap());
        let y = Dropout::new(0.5).unwrap().forward(&mut cx, x).unwrap();
        let d = g.value(y).data();
        let survivors = d.iter().filter(|&&v| v != 0.0).count() as f64 / d.len() as f64;
        assert!((survivors - 0.5).abs() < 0.02, "{survivors}");
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn equal_seeds_give_equal_masks() {
        let store = ParamStore::new();
        let run = |seed| {
            let mut g = Graph::new();
            let mut cx = Context::new(&mut g, &store, Mode::Train, seed);
            let x = cx.graph.constant(Tensor::ones([64]).unwrap());
            let y = Dropout::new(0.3).unwrap().forward(&mut cx, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn rejects_rate_of_one() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }
}
