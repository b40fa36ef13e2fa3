//! Residual convolutional stems.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::nn::{BatchNorm2d, Context, Conv2d, MaxPool2d, Module, ParamBuilder};
use crate::tensor::{Result, TensorError};

/// Two 3×3 conv/BN layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(pb: &mut ParamBuilder, in_channels: usize, channels: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || in_channels != channels).then(|| {
            let mut sb = pb.scope("shortcut");
            (
                Conv2d::new(&mut sb.scope("conv"), in_channels, channels, 1, stride, 0, false),
                BatchNorm2d::new(&mut sb.scope("bn"), channels),
            )
        });
        Self {
            conv1: Conv2d::new(&mut pb.scope("conv1"), in_channels, channels, 3, stride, 1, false),
            bn1: BatchNorm2d::new(&mut pb.scope("bn1"), channels),
            conv2: Conv2d::new(&mut pb.scope("conv2"), channels, channels, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&mut pb.scope("bn2"), channels),
            shortcut,
        }
    }

    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.conv1.output_size(size)
    }
}

impl Module for BasicBlock {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        let h = self.conv2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x)?;
                bn.forward(cx, s)?
            }
            None => x,
        };
        let sum = cx.graph.add(h, skip)?;
        cx.graph.relu(sum)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Conv/BN/ReLU entry layer, optional 3×3 stride-2 max-pool, then stages of
/// basic blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub max_pool: bool,
    pub stages: Vec<StageConfig>,
}

impl ResNetConfig {
    /// The convolutional body of ResNet-18.
    pub fn resnet18() -> Self {
        let stage = |channels, stride| StageConfig {
            channels,
            blocks: 2,
            stride,
        };
        Self {
            in_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_padding: 3,
            max_pool: true,
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    fn validate(&self) -> Result<()> {
        let positive = [self.in_channels, self.stem_channels, self.stem_kernel, self.stem_stride];
        if positive.contains(&0) || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0) {
            return Err(TensorError::Config("resnet extents must be positive".into()));
        }
        Ok(())
    }
}

fn stem_pool() -> MaxPool2d {
    MaxPool2d::new(3, 2, 1)
}

fn too_small(what: &str, size: usize) -> TensorError {
    TensorError::Config(format!("{size}px input is too small for the {what}"))
}

#[derive(Clone, Debug)]
pub struct ResNetBody {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub pool: Option<MaxPool2d>,
    pub blocks: Vec<BasicBlock>,
}

impl ResNetBody {
    pub fn new(pb: &mut ParamBuilder, cfg: &ResNetConfig) -> Result<Self> {
        cfg.validate()?;
        let conv = Conv2d::new(
            &mut pb.scope("conv1"),
            cfg.in_channels,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_padding,
            false,
        );
        let bn = BatchNorm2d::new(&mut pb.scope("bn1"), cfg.stem_channels);
        let mut blocks = Vec::new();
        let mut channels = cfg.stem_channels;
        for (s, stage) in cfg.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let name = format!("layer{}.{b}", s + 1);
                blocks.push(BasicBlock::new(&mut pb.scope(&name), channels, stage.channels, stride));
                channels = stage.channels;
            }
        }
        Ok(Self {
            conv,
            bn,
            pool: cfg.max_pool.then(stem_pool),
            blocks,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.conv.out_channels, |b| b.conv2.out_channels)
    }

    /// Spatial extent of the output for a square input.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let mut s = self.conv.output_size(size).ok_or_else(|| too_small("stem", size))?;
        if let Some(p) = &self.pool {
            s = p.output_size(s).ok_or_else(|| too_small("stem", size))?;
        }
        for b in &self.blocks {
            s = b.output_size(s).ok_or_else(|| too_small("stem", size))?;
        }
        Ok(s)
    }
}

impl Module for ResNetBody {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.bn.forward(cx, h)?;
        let mut h = cx.graph.relu(h)?;
        if let Some(p) = &self.pool {
            h = p.forward(cx, h)?;
        }
        for b in &self.blocks {
            h = b.forward(cx, h)?;
        }
        Ok(h)
    }
}

/// The first five conv layers of a ResNet-18-style body with a 1×1 strided
/// conv inserted after the third.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowStemConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub max_pool: bool,
}

impl ShallowStemConfig {
    pub fn resnet18() -> Self {
        Self {
            in_channels: 3,
            channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_padding: 3,
            max_pool: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShallowStem {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub pool: Option<MaxPool2d>,
    pub block1: BasicBlock,
    pub down: Conv2d,
    pub down_bn: BatchNorm2d,
    pub block2: BasicBlock,
}

impl ShallowStem {
    pub fn new(pb: &mut ParamBuilder, cfg: &ShallowStemConfig) -> Result<Self> {
        if [cfg.in_channels, cfg.channels, cfg.stem_kernel, cfg.stem_stride].contains(&0) {
            return Err(TensorError::Config("shallow stem extents must be positive".into()));
        }
        let c = cfg.channels;
        Ok(Self {
            conv: Conv2d::new(
                &mut pb.scope("conv1"),
                cfg.in_channels,
                c,
                cfg.stem_kernel,
                cfg.stem_stride,
                cfg.stem_padding,
                false,
            ),
            bn: BatchNorm2d::new(&mut pb.scope("bn1"), c),
            pool: cfg.max_pool.then(stem_pool),
            block1: BasicBlock::new(&mut pb.scope("block1"), c, c, 1),
            down: Conv2d::new(&mut pb.scope("down.conv"), c, c, 1, 2, 0, false),
            down_bn: BatchNorm2d::new(&mut pb.scope("down.bn"), c),
            block2: BasicBlock::new(&mut pb.scope("block2"), c, c, 1),
        })
    }

    pub fn output_size(&self, size: usize) -> Result<usize> {
        let err = || too_small("shallow stem", size);
        let mut s = self.conv.output_size(size).ok_or_else(err)?;
        if let Some(p) = &self.pool {
            s = p.output_size(s).ok_or_else(err)?;
        }
        self.down.output_size(s).ok_or_else(err)
    }
}

impl Module for ShallowStem {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.bn.forward(cx, h)?;
        let mut h = cx.graph.relu(h)?;
        if let Some(p) = &self.pool {
            h = p.forward(cx, h)?;
        }
        let h = self.block1.forward(cx, h)?;
        let h = self.down.forward(cx, h)?;
        let h = self.down_bn.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        self.block2.forward(cx, h)
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
    fn resnet18_body_parameter_count() {
        let store = store_with(|pb| drop(ResNetBody::new(pb, &ResNetConfig::resnet18()).unwrap()));
        // conv weights 11_166_912 + BN affine 9_600
        assert_eq!(store.parameter_count(), 11_176_512);
    }

    #[test]
    fn resnet18_body_output_size() {
        let mut body = None;
        store_with(|pb| body = Some(ResNetBody::new(pb, &ResNetConfig::resnet18()).unwrap()));
        let body = body.unwrap();
        assert_eq!(body.output_size(224).unwrap(), 7);
        assert_eq!(body.out_channels(), 512);
    }

    #[test]
    fn shallow_stem_output_size() {
        let mut stem = None;
        store_with(|pb| stem = Some(ShallowStem::new(pb, &ShallowStemConfig::resnet18()).unwrap()));
        assert_eq!(stem.unwrap().output_size(224).unwrap(), 28);
    }

    #[test]
    fn block_without_projection_keeps_shape() {
        let mut block = None;
        let store = store_with(|pb| block = Some(BasicBlock::new(pb, 4, 4, 1)));
        let block = block.unwrap();
        assert!(block.shortcut.is_none());
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Train, 0);
        let x = cx.graph.constant(Tensor::from_fn([2, 4, 6, 6], |i| (i as f64 * 0.37).sin()).unwrap());
        let y = block.forward(&mut cx, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn strided_block_projects_shortcut() {
        let mut block = None;
        let store = store_with(|pb| block = Some(BasicBlock::new(pb, 4, 8, 2)));
        let block = block.unwrap();
        assert!(block.shortcut.is_some());
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let x = cx.graph.constant(Tensor::ones([1, 4, 6, 6]).unwrap());
        let y = block.forward(&mut cx, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 3, 3]);
    }

    #[test]
    fn tiny_input_is_a_config_error() {
        let cfg = ResNetConfig {
            stem_padding: 0,
            ..ResNetConfig::resnet18()
        };
        let mut body = None;
        store_with(|pb| body = Some(ResNetBody::new(pb, &cfg).unwrap()));
        assert!(body.unwrap().output_size(4).is_err());
    }
}
