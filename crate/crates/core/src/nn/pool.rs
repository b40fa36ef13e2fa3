use super::{Context, Module};
use crate::autodiff::Var;
use crate::tensor::Result;

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn output_size(&self, size: usize) -> Option<usize> {
        super::conv::conv_output_size(size, self.kernel, self.stride, self.padding)
    }
}

impl Module for MaxPool2d {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        cx.graph.max_pool2d(x, self.kernel, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use crate::ParamStore;

    fn pool(p: MaxPool2d, x: Tensor) -> Tensor {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let xv = cx.graph.constant(x);
        let y = p.forward(&mut cx, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn two_by_two_picks_maximum() {
        let y = pool(MaxPool2d::new(2, 2, 0), Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let y = pool(MaxPool2d::new(3, 2, 1), Tensor::full([1, 2, 8, 8], -3.0).unwrap());
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn matches_naive_window_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn([2, 3, 7, 7], |_| rng.random_range(-1.0..1.0)).unwrap();
        let p = MaxPool2d::new(3, 2, 1);
        let y = pool(p, x.clone());
        let out = p.output_size(7).unwrap();
        assert_eq!(y.shape(), &[2, 3, out, out]);
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..out {
                    for j in 0..out {
                        let mut best = f64::NEG_INFINITY;
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yy, xx) = ((i * 2 + ki) as isize - 1, (j * 2 + kj) as isize - 1);
                                if (0..7).contains(&yy) && (0..7).contains(&xx) {
                                    best = best.max(x.at(&[n, c, yy as usize, xx as usize]));
                                }
                            }
                        }
                        assert_eq!(y.at(&[n, c, i, j]), best);
                    }
                }
            }
        }
    }

    #[test]
    fn stem_pool_halves_resolution() {
        assert_eq!(MaxPool2d::new(3, 2, 1).output_size(112), Some(56));
    }
}
