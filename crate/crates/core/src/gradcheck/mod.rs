//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values: a non-scalar output
//! is reduced to a scalar by a fixed random projection computed outside the
//! graph, then each checked element is nudged by `±step`. The analytic side
//! runs the same projection through the graph and calls `backward`.

mod suite;

pub use suite::{run_suite, suite_names, SuiteOptions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Magnitude below which differences are judged absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Cap on checked elements per tensor; `None` checks all of them.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Test hook: scales analytic gradients by 1.1 so a healthy check fails.
    pub corrupt: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Which elements of a tensor with `n` entries get perturbed.
fn pick(n: usize, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|_| rng.random_range(0..n)).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `f` against finite differences with respect to every input tensor
/// and every trainable entry of `store`. Returns the worst relative error.
pub fn check<F>(store: &mut ParamStore, inputs: &[Tensor], opts: &CheckOptions, mut f: F) -> Result<(f64, usize)>
where
    F: FnMut(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let projection = Tensor::from_fn(g.shape(out).to_vec(), |_| rng.random_range(-1.0..1.0))?;
    let r = g.constant(projection.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let mut param_grads = store.clone();
    param_grads.zero_grad();
    param_grads.accumulate(&grads)?;
    let fudge = if opts.corrupt { 1.1 } else { 1.0 };

    let mut eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        Ok(g.value(out).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut count = 0;
    let h = opts.step;
    let mut perturbed = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs are requires_grad leaves").clone();
        for idx in pick(inputs[k].numel(), opts.max_elements, &mut rng) {
            let orig = inputs[k].data()[idx];
            perturbed[k].data_mut()[idx] = orig + h;
            let up = eval(store, &perturbed)?;
            perturbed[k].data_mut()[idx] = orig - h;
            let down = eval(store, &perturbed)?;
            perturbed[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[idx] * fudge, numeric));
            count += 1;
        }
    }

    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let Some(analytic) = param_grads.grad(id).cloned() else {
            continue;
        };
        for idx in pick(analytic.numel(), opts.max_elements, &mut rng) {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + h;
            let up = eval(store, inputs)?;
            store.value_mut(id).data_mut()[idx] = orig - h;
            let down = eval(store, inputs)?;
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[idx] * fudge, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Random tensor with entries in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).expect("positive extents")
}
