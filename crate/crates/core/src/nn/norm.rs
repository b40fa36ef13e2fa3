use super::{Context, Mode, Module, ParamBuilder};
use crate::autodiff::Var;
use crate::params::ParamId;
use crate::tensor::{Result, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", &[dim], 1.0, true),
            beta: pb.constant("beta", &[dim], 0.0, true),
            dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.dim
    }
}

impl Module for LayerNorm {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        cx.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Per-channel batch normalization over `[N, C, H, W]`. Train mode uses
/// batch statistics and queues a running-stat update; eval mode uses the
/// running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", &[channels], 1.0, true),
            beta: pb.constant("beta", &[channels], 0.0, true),
            running_mean: pb.constant("running_mean", &[channels], 0.0, false),
            running_var: pb.constant("running_var", &[channels], 1.0, false),
            channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.channels
    }
}

impl Module for BatchNorm2d {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        match cx.mode() {
            Mode::Train => {
                let (y, stats) = cx.graph.batch_norm_train(x, g, b, BATCH_NORM_EPS)?;
                let m = BATCH_NORM_MOMENTUM;
                let blend = |old: &Tensor, new: &[f64]| {
                    let data = old.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect();
                    Tensor::new(old.shape().to_vec(), data)
                };
                let params = cx.params();
                let mean = blend(params.value(self.running_mean), &stats.mean)?;
                let var = blend(params.value(self.running_var), &stats.var)?;
                cx.record_update(self.running_mean, mean);
                cx.record_update(self.running_var, var);
                Ok(y)
            }
            Mode::Eval => {
                let params = cx.params();
                let mean = params.value(self.running_mean).data().to_vec();
                let var = params.value(self.running_var).data().to_vec();
                cx.graph.batch_norm_eval(x, g, b, &mean, &var, BATCH_NORM_EPS)
            }
        }
    }
}
