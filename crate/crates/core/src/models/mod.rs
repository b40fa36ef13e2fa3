//! The four gaze regression networks and their configurations.

mod embed;
mod resnet;

pub use embed::{flatten_cells, patchify, PatchEmbedding, TokenSequence};
pub use resnet::{BasicBlock, ResNetBody, ResNetConfig, ShallowStem, ShallowStemConfig, StageConfig};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::gaze::GazeDirection;
use crate::nn::{Context, Conv2d, Linear, Mode, Module, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};
use crate::transformer::{AttentionMode, Encoder, TransformerConfig};

/// Regression head: `width → hidden → ReLU → 2`.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Head {
    pub fn new(pb: &mut ParamBuilder, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut pb.scope("fc1"), width, hidden, true),
            fc2: Linear::new(&mut pb.scope("fc2"), hidden, 2, true),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.fc1.parameter_count() + self.fc2.parameter_count()
    }
}

impl Module for Head {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.relu(h)?;
        self.fc2.forward(cx, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PureConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Patches per side.
    pub grid: usize,
    pub transformer: TransformerConfig,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub image_size: usize,
    pub stem: ResNetConfig,
    /// Output channels of the 1×1 conv after the stem; also the model width.
    pub channel_scale: usize,
    pub transformer: TransformerConfig,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBaselineConfig {
    pub image_size: usize,
    pub stem: ResNetConfig,
    /// Optional 1×1 conv applied before global average pooling.
    pub channel_scale: Option<usize>,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowHybridConfig {
    pub image_size: usize,
    pub stem: ShallowStemConfig,
    pub grid: usize,
    pub transformer: TransformerConfig,
    pub head_hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantTag {
    Pure,
    Hybrid,
    ConvBaseline,
    ShallowHybrid,
}

impl VariantTag {
    pub const ALL: [VariantTag; 4] = [Self::Pure, Self::Hybrid, Self::ConvBaseline, Self::ShallowHybrid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pure => "pure",
            Self::Hybrid => "hybrid",
            Self::ConvBaseline => "conv-baseline",
            Self::ShallowHybrid => "shallow-hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for VariantTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ModelVariant {
    Pure(PureConfig),
    Hybrid(HybridConfig),
    ConvBaseline(ConvBaselineConfig),
    ShallowHybrid(ShallowHybridConfig),
}

fn full_transformer(layers: usize, heads: usize, width: usize, mlp_hidden: usize) -> TransformerConfig {
    TransformerConfig {
        layers,
        heads,
        width,
        mlp_hidden,
        dropout: 0.1,
        attention_mode: AttentionMode::Learned,
    }
}

const HEAD_HIDDEN: usize = 256;

/// Reduced ResNet body used at toy scale: 8 then 16 channels, overall stride 8.
fn toy_stem() -> ResNetConfig {
    ResNetConfig {
        in_channels: 3,
        stem_channels: 8,
        stem_kernel: 3,
        stem_stride: 2,
        stem_padding: 1,
        max_pool: true,
        stages: vec![
            StageConfig {
                channels: 8,
                blocks: 1,
                stride: 1,
            },
            StageConfig {
                channels: 16,
                blocks: 1,
                stride: 2,
            },
        ],
    }
}

impl ModelVariant {
    /// Full-size configuration for 224×224 images.
    pub fn full(tag: VariantTag) -> Self {
        match tag {
            VariantTag::Pure => Self::Pure(PureConfig {
                image_size: 224,
                in_channels: 3,
                grid: 14,
                transformer: full_transformer(12, 64, 768, 4096),
                head_hidden: HEAD_HIDDEN,
            }),
            VariantTag::Hybrid => Self::Hybrid(HybridConfig {
                image_size: 224,
                stem: ResNetConfig::resnet18(),
                channel_scale: 32,
                transformer: full_transformer(6, 8, 32, 512),
                head_hidden: HEAD_HIDDEN,
            }),
            VariantTag::ConvBaseline => Self::ConvBaseline(ConvBaselineConfig {
                image_size: 224,
                stem: ResNetConfig::resnet18(),
                channel_scale: Some(32),
                head_hidden: HEAD_HIDDEN,
            }),
            VariantTag::ShallowHybrid => Self::ShallowHybrid(ShallowHybridConfig {
                image_size: 224,
                stem: ShallowStemConfig::resnet18(),
                grid: 7,
                transformer: full_transformer(6, 8, 32, 512),
                head_hidden: HEAD_HIDDEN,
            }),
        }
    }

    /// Small configuration for `image_size`-pixel images (a multiple of 16):
    /// two encoder layers of width 16.
    pub fn toy(tag: VariantTag, image_size: usize) -> Self {
        let transformer = TransformerConfig {
            layers: 2,
            heads: 2,
            width: 16,
            mlp_hidden: 32,
            dropout: 0.1,
            attention_mode: AttentionMode::Learned,
        };
        let head_hidden = 32;
        match tag {
            VariantTag::Pure => Self::Pure(PureConfig {
                image_size,
                in_channels: 3,
                grid: 4,
                transformer,
                head_hidden,
            }),
            VariantTag::Hybrid => Self::Hybrid(HybridConfig {
                image_size,
                stem: toy_stem(),
                channel_scale: 16,
                transformer,
                head_hidden,
            }),
            VariantTag::ConvBaseline => Self::ConvBaseline(ConvBaselineConfig {
                image_size,
                stem: toy_stem(),
                channel_scale: Some(16),
                head_hidden,
            }),
            VariantTag::ShallowHybrid => Self::ShallowHybrid(ShallowHybridConfig {
                image_size,
                stem: ShallowStemConfig {
                    in_channels: 3,
                    channels: 8,
                    stem_kernel: 3,
                    stem_stride: 2,
                    stem_padding: 1,
                    max_pool: true,
                },
                grid: (image_size / 16).max(1),
                transformer,
                head_hidden,
            }),
        }
    }

    pub fn tag(&self) -> VariantTag {
        match self {
            Self::Pure(_) => VariantTag::Pure,
            Self::Hybrid(_) => VariantTag::Hybrid,
            Self::ConvBaseline(_) => VariantTag::ConvBaseline,
            Self::ShallowHybrid(_) => VariantTag::ShallowHybrid,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Self::Pure(c) => c.image_size,
            Self::Hybrid(c) => c.image_size,
            Self::ConvBaseline(c) => c.image_size,
            Self::ShallowHybrid(c) => c.image_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Self::Pure(c) => c.in_channels,
            Self::Hybrid(c) => c.stem.in_channels,
            Self::ConvBaseline(c) => c.stem.in_channels,
            Self::ShallowHybrid(c) => c.stem.in_channels,
        }
    }

    pub fn transformer(&self) -> Option<&TransformerConfig> {
        match self {
            Self::Pure(c) => Some(&c.transformer),
            Self::Hybrid(c) => Some(&c.transformer),
            Self::ConvBaseline(_) => None,
            Self::ShallowHybrid(c) => Some(&c.transformer),
        }
    }

    pub fn transformer_mut(&mut self) -> Option<&mut TransformerConfig> {
        match self {
            Self::Pure(c) => Some(&mut c.transformer),
            Self::Hybrid(c) => Some(&mut c.transformer),
            Self::ConvBaseline(_) => None,
            Self::ShallowHybrid(c) => Some(&mut c.transformer),
        }
    }

    /// Same variant with the attention mode replaced, where one exists.
    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        if let Some(t) = self.transformer_mut() {
            t.attention_mode = mode;
        }
        self
    }
}

/// Extents fixed at construction time for the configured image size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePlan {
    /// `[C, H, W]` of one input image.
    pub image: [usize; 3],
    /// `[C, H, W]` of the convolutional stem output, if there is a stem.
    pub stem_output: Option<[usize; 3]>,
    /// Flattened length of one patch, for patch-based variants.
    pub patch_len: Option<usize>,
    /// `[rows, width]` of the encoder input, token row included.
    pub sequence: Option<[usize; 2]>,
    /// Width of the feature fed to the regression head.
    pub head_input: usize,
}

#[derive(Clone, Debug)]
pub enum Network {
    Pure {
        embed: PatchEmbedding,
        encoder: Encoder,
        head: Head,
    },
    Hybrid {
        stem: ResNetBody,
        scale: Conv2d,
        sequence: TokenSequence,
        encoder: Encoder,
        head: Head,
    },
    ConvBaseline {
        stem: ResNetBody,
        scale: Option<Conv2d>,
        head: Head,
    },
    ShallowHybrid {
        stem: ShallowStem,
        embed: PatchEmbedding,
        encoder: Encoder,
        head: Head,
    },
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    pub stem_output: Option<Var>,
    pub sequence: Option<Var>,
    pub output: Var,
}

/// A constructed network together with its parameters.
#[derive(Clone, Debug)]
pub struct GazeModel {
    pub variant: ModelVariant,
    pub seed: u64,
    pub network: Network,
    pub params: ParamStore,
    pub plan: ShapePlan,
}

fn config_error(msg: String) -> TensorError {
    TensorError::Config(msg)
}

fn divisible(size: usize, grid: usize, what: &str) -> Result<usize> {
    if grid == 0 || size % grid != 0 {
        return Err(config_error(format!("{what} of {size} is not divisible by a {grid}×{grid} patch grid")));
    }
    Ok(size / grid)
}

/// Builds and initializes `variant` deterministically from `seed`.
pub fn build_variant(variant: &ModelVariant, seed: u64) -> Result<GazeModel> {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut params, &mut rng);
    let size = variant.image_size();
    if size == 0 {
        return Err(config_error("image size must be positive".into()));
    }
    let (network, plan) = match variant {
        ModelVariant::Pure(c) => {
            c.transformer.validate()?;
            let side = divisible(size, c.grid, "image size")?;
            let patch_len = side * side * c.in_channels;
            let d = c.transformer.width;
            let embed = PatchEmbedding::new(&mut pb.scope("embed"), c.grid, patch_len, d);
            let encoder = Encoder::new(&mut pb.scope("encoder"), &c.transformer)?;
            let head = Head::new(&mut pb.scope("head"), d, c.head_hidden);
            let plan = ShapePlan {
                image: [c.in_channels, size, size],
                stem_output: None,
                patch_len: Some(patch_len),
                sequence: Some([c.grid * c.grid + 1, d]),
                head_input: d,
            };
            (Network::Pure { embed, encoder, head }, plan)
        }
        ModelVariant::Hybrid(c) => {
            c.transformer.validate()?;
            if c.channel_scale != c.transformer.width {
                return Err(config_error(format!(
                    "channel_scale {} must equal the transformer width {}",
                    c.channel_scale, c.transformer.width
                )));
            }
            let stem = ResNetBody::new(&mut pb.scope("stem"), &c.stem)?;
            let out = stem.output_size(size)?;
            let scale = Conv2d::new(&mut pb.scope("scale"), stem.out_channels(), c.channel_scale, 1, 1, 0, true);
            let cells = out * out;
            let sequence = TokenSequence::new(&mut pb.scope("embed"), cells, c.channel_scale);
            let encoder = Encoder::new(&mut pb.scope("encoder"), &c.transformer)?;
            let head = Head::new(&mut pb.scope("head"), c.channel_scale, c.head_hidden);
            let plan = ShapePlan {
                image: [c.stem.in_channels, size, size],
                stem_output: Some([stem.out_channels(), out, out]),
                patch_len: None,
                sequence: Some([cells + 1, c.channel_scale]),
                head_input: c.channel_scale,
            };
            (
                Network::Hybrid {
                    stem,
                    scale,
                    sequence,
                    encoder,
                    head,
                },
                plan,
            )
        }
        ModelVariant::ConvBaseline(c) => {
            let stem = ResNetBody::new(&mut pb.scope("stem"), &c.stem)?;
            let out = stem.output_size(size)?;
            let scale = c
                .channel_scale
                .map(|ch| Conv2d::new(&mut pb.scope("scale"), stem.out_channels(), ch, 1, 1, 0, true));
            let width = c.channel_scale.unwrap_or(stem.out_channels());
            let head = Head::new(&mut pb.scope("head"), width, c.head_hidden);
            let plan = ShapePlan {
                image: [c.stem.in_channels, size, size],
                stem_output: Some([stem.out_channels(), out, out]),
                patch_len: None,
                sequence: None,
                head_input: width,
            };
            (Network::ConvBaseline { stem, scale, head }, plan)
        }
        ModelVariant::ShallowHybrid(c) => {
            c.transformer.validate()?;
            let stem = ShallowStem::new(&mut pb.scope("stem"), &c.stem)?;
            let out = stem.output_size(size)?;
            let side = divisible(out, c.grid, "stem output")?;
            let patch_len = side * side * c.stem.channels;
            let d = c.transformer.width;
            let embed = PatchEmbedding::new(&mut pb.scope("embed"), c.grid, patch_len, d);
            let encoder = Encoder::new(&mut pb.scope("encoder"), &c.transformer)?;
            let head = Head::new(&mut pb.scope("head"), d, c.head_hidden);
            let plan = ShapePlan {
                image: [c.stem.in_channels, size, size],
                stem_output: Some([c.stem.channels, out, out]),
                patch_len: Some(patch_len),
                sequence: Some([c.grid * c.grid + 1, d]),
                head_input: d,
            };
            (
                Network::ShallowHybrid {
                    stem,
                    embed,
                    encoder,
                    head,
                },
                plan,
            )
        }
    };
    Ok(GazeModel {
        variant: variant.clone(),
        seed,
        network,
        params,
        plan,
    })
}

/// Trainable scalars of `variant` at its configured size.
pub fn count_parameters(variant: &ModelVariant) -> Result<usize> {
    Ok(build_variant(variant, 0)?.params.parameter_count())
}

impl GazeModel {
    pub fn tag(&self) -> VariantTag {
        self.variant.tag()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Trainable scalars grouped by top-level module, in construction order.
    pub fn audit(&self) -> Vec<(String, usize)> {
        let mut order = Vec::new();
        let mut counts = BTreeMap::new();
        for (_, p) in self.params.iter().filter(|(_, p)| p.trainable) {
            let module = p.name.split('.').next().unwrap_or(&p.name).to_string();
            if !counts.contains_key(&module) {
                order.push(module.clone());
            }
            *counts.entry(module).or_insert(0) += p.value.numel();
        }
        order.into_iter().map(|m| (m.clone(), counts[&m])).collect()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.plan.image {
            let mut want = vec![0];
            want.extend(self.plan.image);
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// Forward pass recording the stem output and the encoder input.
    pub fn trace(&self, cx: &mut Context<'_>, x: Var) -> Result<Trace> {
        self.check_input(cx.graph, x)?;
        let (stem_output, sequence, feature) = match &self.network {
            Network::Pure { embed, encoder, .. } => {
                let z = embed.forward(cx, x)?;
                let h = encoder.forward(cx, z)?;
                (None, Some(z), cx.graph.slice_row(h, 0)?)
            }
            Network::Hybrid {
                stem,
                scale,
                sequence,
                encoder,
                ..
            } => {
                let f = stem.forward(cx, x)?;
                let s = scale.forward(cx, f)?;
                let cells = flatten_cells(cx.graph, s)?;
                let z = sequence.forward(cx, cells)?;
                let h = encoder.forward(cx, z)?;
                (Some(f), Some(z), cx.graph.slice_row(h, 0)?)
            }
            Network::ConvBaseline { stem, scale, .. } => {
                let f = stem.forward(cx, x)?;
                let s = match scale {
                    Some(conv) => conv.forward(cx, f)?,
                    None => f,
                };
                let shape = cx.graph.shape(s).to_vec();
                let flat = cx.graph.reshape(s, &[shape[0], shape[1], shape[2] * shape[3]])?;
                (Some(f), None, cx.graph.mean_last(flat)?)
            }
            Network::ShallowHybrid { stem, embed, encoder, .. } => {
                let f = stem.forward(cx, x)?;
                let z = embed.forward(cx, f)?;
                let h = encoder.forward(cx, z)?;
                (Some(f), Some(z), cx.graph.slice_row(h, 0)?)
            }
        };
        let output = self.head().forward(cx, feature)?;
        Ok(Trace {
            stem_output,
            sequence,
            output,
        })
    }

    pub fn head(&self) -> &Head {
        match &self.network {
            Network::Pure { head, .. }
            | Network::Hybrid { head, .. }
            | Network::ConvBaseline { head, .. }
            | Network::ShallowHybrid { head, .. } => head,
        }
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.network {
            Network::Pure { encoder, .. } | Network::Hybrid { encoder, .. } | Network::ShallowHybrid { encoder, .. } => {
                Some(encoder)
            }
            Network::ConvBaseline { .. } => None,
        }
    }

    /// Eval-mode predictions for `[n, C, H, W]` images, `batch` at a time.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<GazeDirection>> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "predict",
                shape: s.to_vec(),
                reason: "expected [N, C, H, W]".into(),
            });
        }
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::with_capacity(s[0]);
        for chunk in images.data().chunks(per * batch.max(1)) {
            let n = chunk.len() / per;
            let x = Tensor::new([n, s[1], s[2], s[3]], chunk.to_vec())?;
            let y = self.predict_batch(x)?;
            out.extend(y.data().chunks(2).map(|r| GazeDirection::new(r[0], r[1])));
        }
        Ok(out)
    }

    /// Eval-mode `[n, 2]` output for one batch.
    pub fn predict_batch(&self, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let mut cx = Context::new(&mut g, &self.params, Mode::Eval, 0);
        let x = cx.graph.constant(images);
        let y = self.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }
}

impl Module for GazeModel {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        Ok(self.trace(cx, x)?.output)
    }
}
