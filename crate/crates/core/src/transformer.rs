//! Multi-head self-attention and the pre-norm residual encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::nn::{Context, Dropout, LayerNorm, Linear, Module, ParamBuilder};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Every attention weight is `1/s`; queries and keys are still projected.
    UniformAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    #[serde(default)]
    pub attention_mode: AttentionMode,
}

impl TransformerConfig {
    /// Per-head query/key/value width: `width / heads`, rounded down, at least 1.
    pub fn head_dim(&self) -> usize {
        (self.width / self.heads.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Config(msg));
        if self.heads == 0 || self.width == 0 || self.mlp_hidden == 0 {
            return fail(format!(
                "transformer extents must be positive (heads {}, width {}, mlp_hidden {})",
                self.heads, self.width, self.mlp_hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Trainable scalars in one encoder block.
    pub fn block_parameter_count(&self) -> usize {
        let (d, inner, h) = (self.width, self.heads * self.head_dim(), self.mlp_hidden);
        let ln = 2 * d;
        let qkv = 3 * (d * inner + inner);
        let proj = inner * d + d;
        let mlp = d * h + h + h * d + d;
        2 * ln + qkv + proj + mlp
    }
}

/// Scaled dot-product attention over `[.., s, d_k]` operands. Returns the
/// output and the attention weights `[.., s, s]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mode: AttentionMode) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let rank = qs.len();
    let agree = rank >= 2 && ks.len() == rank && vs.len() == rank && qs[..rank - 1] == ks[..rank - 1] && ks[..rank - 1] == vs[..rank - 1];
    if !agree || qs[rank - 1] != ks[rank - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let s = qs[rank - 2];
    let weights = match mode {
        AttentionMode::Learned => {
            let kt = g.transpose_last2(k)?;
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (qs[rank - 1] as f64).sqrt())?;
            g.softmax_rows(scaled)?
        }
        AttentionMode::UniformAverage => {
            let mut shape = qs[..rank - 1].to_vec();
            shape.push(s);
            g.constant(Tensor::full(shape, 1.0 / s as f64)?)
        }
    };
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention with joint query/key/value projections.
#[derive(Clone, Debug)]
pub struct MsaLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: AttentionMode,
}

impl MsaLayer {
    pub fn new(pb: &mut ParamBuilder, cfg: &TransformerConfig) -> Self {
        let (d, inner) = (cfg.width, cfg.heads * cfg.head_dim());
        Self {
            query: Linear::new(&mut pb.scope("query"), d, inner, true),
            key: Linear::new(&mut pb.scope("key"), d, inner, true),
            value: Linear::new(&mut pb.scope("value"), d, inner, true),
            output: Linear::new(&mut pb.scope("output"), inner, d, true),
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            mode: cfg.attention_mode,
        }
    }

    /// `[n, s, N·d_k]` to `[n, N, s, d_k]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Output before the final projection, plus the attention weights.
    pub fn attend(&self, cx: &mut Context<'_>, x: Var) -> Result<(Var, Var)> {
        let xs = cx.graph.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != self.query.in_features {
            return Err(TensorError::ShapeMismatch {
                op: "msa",
                lhs: xs,
                rhs: vec![self.query.in_features],
            });
        }
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let g = &mut *cx.graph;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let (o, w) = attention(g, q, k, v, self.mode)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[xs[0], xs[1], self.heads * self.head_dim])?;
        Ok((o, w))
    }
}

impl Module for MsaLayer {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let (o, _) = self.attend(cx, x)?;
        self.output.forward(cx, o)
    }
}

/// `x' = x + MSA(LN(x))`, then `x' + MLP(LN(x'))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub msa: MsaLayer,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: Dropout,
}

impl EncoderBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.scope("ln1"), cfg.width),
            msa: MsaLayer::new(&mut pb.scope("msa"), cfg),
            ln2: LayerNorm::new(&mut pb.scope("ln2"), cfg.width),
            fc1: Linear::new(&mut pb.scope("fc1"), cfg.width, cfg.mlp_hidden, true),
            fc2: Linear::new(&mut pb.scope("fc2"), cfg.mlp_hidden, cfg.width, true),
            dropout: Dropout::new(cfg.dropout)?,
        })
    }
}

impl Module for EncoderBlock {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let h = self.msa.forward(cx, h)?;
        let h = self.dropout.forward(cx, h)?;
        let x = cx.graph.add(x, h)?;

        let h = self.ln2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.graph.gelu(h)?;
        let h = self.dropout.forward(cx, h)?;
        let h = self.fc2.forward(cx, h)?;
        let h = self.dropout.forward(cx, h)?;
        cx.graph.add(x, h)
    }
}

/// A stack of encoder blocks. No normalization follows the last block.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub width: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&mut pb.scope(&format!("block{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            width: cfg.width,
        })
    }
}

impl Module for Encoder {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let shape = cx.graph.shape(x);
        if shape.len() != 3 || shape[2] != self.width {
            return Err(TensorError::ShapeMismatch {
                op: "encoder",
                lhs: shape.to_vec(),
                rhs: vec![self.width],
            });
        }
        self.blocks.iter().try_fold(x, |h, b| b.forward(cx, h))
    }
}
