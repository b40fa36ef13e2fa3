//! The named checks behind the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check, random_tensor, CheckOptions, CheckReport};
use crate::autodiff::{Graph, Var};
use crate::models::{build_variant, BasicBlock, Head, ModelVariant, PatchEmbedding, VariantTag};
use crate::nn::{BatchNorm2d, Context, Conv2d, Dropout, LayerNorm, Linear, MaxPool2d, Mode, Module, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor};
use crate::transformer::{attention, AttentionMode, EncoderBlock, MsaLayer, TransformerConfig};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Runs only checks whose name equals this, starts with `scope.`, or ends with `.scope`.
    pub scope: Option<String>,
    pub seed: u64,
    pub corrupt: bool,
}

type Body = fn(&CheckOptions) -> Result<(f64, usize)>;

struct Case {
    name: &'static str,
    tolerance: f64,
    body: Body,
}

fn matches(name: &str, scope: &str) -> bool {
    name == scope || name.strip_prefix(scope).is_some_and(|r| r.starts_with('.')) || name.rsplit('.').next() == Some(scope)
}

pub fn suite_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs the selected checks in order, one report each. An unknown scope is an error.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let selected: Vec<Case> = cases()
        .into_iter()
        .filter(|c| opts.scope.as_deref().is_none_or(|s| matches(c.name, s)))
        .collect();
    if selected.is_empty() {
        return Err(crate::tensor::TensorError::Config(format!(
            "no gradient check matches scope {:?}",
            opts.scope.as_deref().unwrap_or("")
        )));
    }
    let mut out = Vec::with_capacity(selected.len());
    for c in selected {
        let check_opts = CheckOptions {
            seed: opts.seed,
            corrupt: opts.corrupt,
            ..CheckOptions::default()
        };
        let (max_rel_error, elements) = (c.body)(&check_opts)?;
        out.push(CheckReport {
            name: c.name.to_string(),
            max_rel_error,
            tolerance: c.tolerance,
            elements,
        });
    }
    Ok(out)
}

fn inputs(opts: &CheckOptions, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
}

/// A graph-level op with every operand perturbed.
fn op(opts: &CheckOptions, shapes: &[&[usize]], f: fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<(f64, usize)> {
    check(&mut ParamStore::new(), &inputs(opts, shapes), opts, |g, _, v| f(g, v))
}

fn store(seed: u64, build: impl FnOnce(&mut ParamBuilder)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut ParamBuilder::new(&mut store, &mut rng));
    store
}

/// A layer checked with respect to its input and all of its parameters.
fn layer<M: Module>(opts: &CheckOptions, mode: Mode, shape: &[usize], build: impl FnOnce(&mut ParamBuilder) -> M) -> Result<(f64, usize)> {
    let mut module = None;
    let mut params = store(opts.seed, |pb| module = Some(build(pb)));
    let module = module.expect("builder ran");
    check(&mut params, &inputs(opts, &[shape]), opts, |g, p, v| {
        // fixed context seed: dropout masks are identical on every evaluation
        let mut cx = Context::new(g, p, mode, 11);
        module.forward(&mut cx, v[0])
    })
}

fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        layers: 1,
        heads: 2,
        width: 8,
        mlp_hidden: 16,
        dropout: 0.0,
        attention_mode: AttentionMode::Learned,
    }
}

fn model(opts: &CheckOptions, tag: VariantTag) -> Result<(f64, usize)> {
    let mut variant = ModelVariant::toy(tag, 32);
    if let Some(t) = variant.transformer_mut() {
        t.dropout = 0.0;
    }
    let mut m = build_variant(&variant, opts.seed)?;
    let opts = CheckOptions {
        step: 1e-6,
        max_elements: Some(16),
        ..opts.clone()
    };
    let network = m.clone();
    check(&mut m.params, &inputs(&opts, &[&[2, 3, 32, 32]]), &opts, |g, p, v| {
        let mut cx = Context::new(g, p, Mode::Train, 0);
        network.forward(&mut cx, v[0])
    })
}

fn cases() -> Vec<Case> {
    let l = |name, body: Body| Case {
        name,
        tolerance: LAYER_TOLERANCE,
        body,
    };
    let m = |name, body: Body| Case {
        name,
        tolerance: MODEL_TOLERANCE,
        body,
    };
    vec![
        l("op.add", |o| op(o, &[&[2, 3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]))),
        l("op.sub", |o| op(o, &[&[2, 1, 4], &[3, 1]], |g, v| g.sub(v[0], v[1]))),
        l("op.mul", |o| op(o, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]))),
        l("op.scale", |o| op(o, &[&[5]], |g, v| g.scale(v[0], -2.5))),
        l("op.relu", |o| op(o, &[&[4, 5]], |g, v| g.relu(v[0]))),
        l("op.gelu", |o| op(o, &[&[4, 5]], |g, v| g.gelu(v[0]))),
        l("op.abs", |o| op(o, &[&[4, 5]], |g, v| g.abs(v[0]))),
        l("op.sum", |o| op(o, &[&[3, 4]], |g, v| g.sum(v[0]))),
        l("op.mean", |o| op(o, &[&[3, 4]], |g, v| g.mean(v[0]))),
        l("op.mean_last", |o| op(o, &[&[2, 3, 4]], |g, v| g.mean_last(v[0]))),
        l("op.matmul", |o| op(o, &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]))),
        l("op.batched_matmul", |o| op(o, &[&[2, 2, 3, 4], &[2, 2, 4, 3]], |g, v| g.matmul(v[0], v[1]))),
        l("op.linear", |o| op(o, &[&[2, 3, 4], &[5, 4], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])))),
        l("op.transpose", |o| op(o, &[&[2, 3, 4]], |g, v| g.transpose_last2(v[0]))),
        l("op.reshape", |o| op(o, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]))),
        l("op.permute", |o| op(o, &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]))),
        l("op.expand", |o| op(o, &[&[1, 3, 1]], |g, v| g.expand(v[0], &[2, 3, 4]))),
        l("op.concat", |o| op(o, &[&[2, 1, 3], &[2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1))),
        l("op.concat_rows", |o| op(o, &[&[2, 1, 3], &[2, 4, 3]], |g, v| g.concat_rows(&[v[0], v[1]]))),
        l("op.narrow", |o| op(o, &[&[2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3))),
        l("op.select", |o| op(o, &[&[2, 5, 3]], |g, v| g.select(v[0], 1, 0))),
        l("op.slice_row", |o| op(o, &[&[2, 5, 3]], |g, v| g.slice_row(v[0], 0))),
        l("op.softmax", |o| op(o, &[&[2, 3, 5]], |g, v| g.softmax_rows(v[0]))),
        l("op.layer_norm", |o| op(o, &[&[2, 3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6))),
        l("op.conv2d", |o| op(o, &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))),
        l("op.batch_norm_train", |o| {
            op(o, &[&[3, 2, 3, 3], &[2], &[2]], |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
        }),
        l("op.batch_norm_eval", |o| {
            op(o, &[&[2, 2, 3, 3], &[2], &[2]], |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0], 1e-5))
        }),
        l("op.max_pool2d", |o| op(o, &[&[2, 2, 6, 6]], |g, v| g.max_pool2d(v[0], 3, 2, 1))),
        l("op.attention", |o| {
            op(o, &[&[2, 4, 3], &[2, 4, 3], &[2, 4, 3]], |g, v| Ok(attention(g, v[0], v[1], v[2], AttentionMode::Learned)?.0))
        }),
        l("op.attention_uniform", |o| {
            op(o, &[&[2, 4, 3], &[2, 4, 3], &[2, 4, 3]], |g, v| {
                Ok(attention(g, v[0], v[1], v[2], AttentionMode::UniformAverage)?.0)
            })
        }),
        l("nn.linear", |o| layer(o, Mode::Eval, &[2, 5, 4], |pb| Linear::new(pb, 4, 3, true))),
        l("nn.conv2d", |o| layer(o, Mode::Eval, &[2, 2, 5, 5], |pb| Conv2d::new(pb, 2, 3, 3, 2, 1, true))),
        l("nn.layer_norm", |o| layer(o, Mode::Eval, &[3, 4, 6], |pb| LayerNorm::new(pb, 6))),
        l("nn.batch_norm", |o| layer(o, Mode::Train, &[3, 2, 4, 4], |pb| BatchNorm2d::new(pb, 2))),
        l("nn.batch_norm_eval", |o| layer(o, Mode::Eval, &[3, 2, 4, 4], |pb| BatchNorm2d::new(pb, 2))),
        l("nn.max_pool2d", |o| layer(o, Mode::Eval, &[2, 2, 7, 7], |_| MaxPool2d::new(3, 2, 1))),
        l("nn.dropout", |o| layer(o, Mode::Train, &[4, 6], |_| Dropout::new(0.3).expect("valid rate"))),
        l("nn.msa", |o| layer(o, Mode::Eval, &[2, 5, 8], |pb| MsaLayer::new(pb, &tiny_transformer()))),
        l("nn.msa_uniform", |o| {
            layer(o, Mode::Eval, &[2, 5, 8], |pb| {
                MsaLayer::new(
                    pb,
                    &TransformerConfig {
                        attention_mode: AttentionMode::UniformAverage,
                        ..tiny_transformer()
                    },
                )
            })
        }),
        l("nn.patch_embedding", |o| layer(o, Mode::Eval, &[2, 3, 4, 4], |pb| PatchEmbedding::new(pb, 2, 12, 6))),
        l("nn.head", |o| layer(o, Mode::Eval, &[3, 6], |pb| Head::new(pb, 6, 5))),
        l("nn.basic_block", |o| layer(o, Mode::Train, &[2, 2, 6, 6], |pb| BasicBlock::new(pb, 2, 3, 2))),
        l("encoder_block", |o| {
            layer(o, Mode::Train, &[2, 5, 8], |pb| EncoderBlock::new(pb, &tiny_transformer()).expect("valid config"))
        }),
        m("model.pure", |o| model(o, VariantTag::Pure)),
        m("model.hybrid", |o| model(o, VariantTag::Hybrid)),
        m("model.conv-baseline", |o| model(o, VariantTag::ConvBaseline)),
        m("model.shallow-hybrid", |o| model(o, VariantTag::ShallowHybrid)),
    ]
}
