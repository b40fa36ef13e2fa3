use super::{fan_in_bound, Context, Module, ParamBuilder};
use crate::autodiff::Var;
use crate::params::ParamId;
use crate::tensor::Result;

/// 2-D cross-correlation (no kernel flip) over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound);
        let bias = bias.then(|| pb.uniform("bias", &[out_channels], bound));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` if the
    /// kernel does not fit.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        conv_output_size(size, self.kernel, self.stride, self.padding)
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

pub(crate) fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (kernel <= padded && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl Module for Conv2d {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::test_util::store_with;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn run(layer: &Conv2d, store: &crate::ParamStore, x: Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, store, Mode::Eval, 0);
        let xv = cx.graph.constant(x);
        let y = layer.forward(&mut cx, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut layer = None;
        let mut store = store_with(|pb| layer = Some(Conv2d::new(pb, 1, 1, 1, 1, 0, false)));
        let layer = layer.unwrap();
        store.set(layer.weight, Tensor::ones([1, 1, 1, 1]).unwrap()).unwrap();
        let x = Tensor::from_fn([1, 1, 4, 5], |i| i as f64 * 0.3 - 1.0).unwrap();
        assert_eq!(run(&layer, &store, x.clone()), x);
    }

    #[test]
    fn averaging_kernel_preserves_constant_interior() {
        let mut layer = None;
        let mut store = store_with(|pb| layer = Some(Conv2d::new(pb, 1, 1, 3, 1, 1, false)));
        let layer = layer.unwrap();
        store.set(layer.weight, Tensor::full([1, 1, 3, 3], 1.0 / 9.0).unwrap()).unwrap();
        let y = run(&layer, &store, Tensor::full([1, 1, 6, 6], 2.5).unwrap());
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.at(&[0, 0, i, j]) - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_sliding_window_oracle() {
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let mut layer = None;
            let store = store_with(|pb| layer = Some(Conv2d::new(pb, 2, 3, 3, stride, padding, true)));
            let layer = layer.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(stride as u64 * 10 + padding as u64);
            let x = Tensor::from_fn([2, 2, 5, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
            let y = run(&layer, &store, x.clone());
            let (w, b) = (store.value(layer.weight), store.value(layer.bias.unwrap()));
            let out = layer.output_size(5).unwrap();
            assert_eq!(y.shape(), &[2, 3, out, out]);
            for n in 0..2 {
                for o in 0..3 {
                    for i in 0..out {
                        for j in 0..out {
                            let mut acc = b.data()[o];
                            for c in 0..2 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let yy = (i * stride + ki) as isize - padding as isize;
                                        let xx = (j * stride + kj) as isize - padding as isize;
                                        if (0..5).contains(&yy) && (0..5).contains(&xx) {
                                            acc += w.at(&[o, c, ki, kj]) * x.at(&[n, c, yy as usize, xx as usize]);
                                        }
                                    }
                                }
                            }
                            assert!((y.at(&[n, o, i, j]) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(224, 7, 2, 3), Some(112));
        assert_eq!(conv_output_size(56, 3, 2, 1), Some(28));
        assert_eq!(conv_output_size(56, 1, 2, 0), Some(28));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let mut layer = None;
        let store = store_with(|pb| layer = Some(Conv2d::new(pb, 1, 1, 5, 1, 0, false)));
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let x = cx.graph.constant(Tensor::zeros([1, 1, 3, 3]).unwrap());
        assert!(layer.unwrap().forward(&mut cx, x).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        let mut layer = None;
        store_with(|pb| layer = Some(Conv2d::new(pb, 3, 64, 7, 2, 3, false)));
        assert_eq!(layer.unwrap().parameter_count(), 9_408);
    }
}
