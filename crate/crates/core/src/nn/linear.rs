use super::{fan_in_bound, Context, Module, ParamBuilder};
use crate::autodiff::Var;
use crate::params::ParamId;
use crate::tensor::Result;

/// Affine map `x · Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_features: usize, out_features: usize, bias: bool) -> Self {
        let bound = fan_in_bound(in_features);
        let weight = pb.uniform("weight", &[out_features, in_features], bound);
        let bias = bias.then(|| pb.uniform("bias", &[out_features], bound));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.out_features * self.in_features + if self.bias.is_some() { self.out_features } else { 0 }
    }
}

impl Module for Linear {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::test_util::store_with;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut layer = None;
        let mut store = store_with(|pb| layer = Some(Linear::new(pb, 3, 3, true)));
        let layer = layer.unwrap();
        store
            .set(layer.weight, Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap())
            .unwrap();
        store.set(layer.bias.unwrap(), Tensor::zeros([3]).unwrap()).unwrap();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let x = cx.graph.constant(Tensor::new([2, 3], vec![1., -2., 3., 0.5, 0.25, -1.]).unwrap());
        let y = layer.forward(&mut cx, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn hand_computed_output() {
        let mut layer = None;
        let mut store = store_with(|pb| layer = Some(Linear::new(pb, 2, 1, true)));
        let layer = layer.unwrap();
        store.set(layer.weight, Tensor::new([1, 2], vec![1., 1.]).unwrap()).unwrap();
        store.set(layer.bias.unwrap(), Tensor::new([1], vec![0.5]).unwrap()).unwrap();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let x = cx.graph.constant(Tensor::new([2], vec![1., 2.]).unwrap());
        let y = layer.forward(&mut cx, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
    }

    #[test]
    fn parameter_count_closed_form() {
        let mut layer = None;
        let store = store_with(|pb| layer = Some(Linear::new(pb, 1568, 32, true)));
        assert_eq!(layer.unwrap().parameter_count(), 50_208);
        assert_eq!(store.parameter_count(), 50_208);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut layer = None;
        let store = store_with(|pb| layer = Some(Linear::new(pb, 4, 2, true)));
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let x = cx.graph.constant(Tensor::zeros([2, 3]).unwrap());
        assert!(layer.unwrap().forward(&mut cx, x).is_err());
    }
}
