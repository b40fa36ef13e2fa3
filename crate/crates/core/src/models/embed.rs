//! Patch splitting, the prepended gaze token and position embeddings.

use crate::autodiff::{Graph, Var};
use crate::nn::{Context, Linear, Module, ParamBuilder, EMBEDDING_INIT_STD};
use crate::params::ParamId;
use crate::tensor::{Result, TensorError};

/// Splits `[n, C, H, W]` into a `grid × grid` raster of patches, each
/// flattened in `(row, col, channel)` order: `[n, grid², (H/grid)·(W/grid)·C]`.
pub fn patchify(g: &mut Graph, x: Var, grid: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || grid == 0 || s[2] % grid != 0 || s[3] % grid != 0 {
        return Err(TensorError::InvalidShape {
            op: "patchify",
            shape: s,
            reason: format!("spatial extents must be divisible by the {grid}×{grid} grid"),
        });
    }
    let (n, c, ph, pw) = (s[0], s[1], s[2] / grid, s[3] / grid);
    let r = g.reshape(x, &[n, c, grid, ph, grid, pw])?;
    let p = g.permute(r, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(p, &[n, grid * grid, ph * pw * c])
}

/// `[n, c, h, w]` feature maps to a `[n, h·w, c]` sequence of cells.
pub fn flatten_cells(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "flatten_cells",
            shape: s,
            reason: "expected [N, C, H, W]".into(),
        });
    }
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(r, &[0, 2, 1])
}

/// Prepends a learned token row and adds learned position embeddings.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub token: ParamId,
    pub position: ParamId,
    pub length: usize,
    pub width: usize,
}

impl TokenSequence {
    /// `length` counts the rows before the token is prepended.
    pub fn new(pb: &mut ParamBuilder, length: usize, width: usize) -> Self {
        Self {
            token: pb.normal("token", &[1, width], EMBEDDING_INIT_STD),
            position: pb.normal("position", &[length + 1, width], EMBEDDING_INIT_STD),
            length,
            width,
        }
    }
}

impl Module for TokenSequence {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let s = cx.graph.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.length || s[2] != self.width {
            return Err(TensorError::ShapeMismatch {
                op: "token sequence",
                lhs: s,
                rhs: vec![self.length, self.width],
            });
        }
        let token = cx.param(self.token);
        let token = cx.graph.reshape(token, &[1, 1, self.width])?;
        let token = cx.graph.expand(token, &[s[0], 1, self.width])?;
        let z = cx.graph.concat_rows(&[token, x])?;
        let pos = cx.param(self.position);
        cx.graph.add(z, pos)
    }
}

/// Patch split, linear projection to the model width, then [`TokenSequence`].
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub grid: usize,
    pub projection: Linear,
    pub sequence: TokenSequence,
}

impl PatchEmbedding {
    pub fn new(pb: &mut ParamBuilder, grid: usize, patch_len: usize, width: usize) -> Self {
        Self {
            grid,
            projection: Linear::new(&mut pb.scope("projection"), patch_len, width, true),
            sequence: TokenSequence::new(pb, grid * grid, width),
        }
    }
}

impl Module for PatchEmbedding {
    fn forward(&self, cx: &mut Context<'_>, x: Var) -> Result<Var> {
        let patches = patchify(cx.graph, x, self.grid)?;
        let z = self.projection.forward(cx, patches)?;
        self.sequence.forward(cx, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::store_with;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn patchify_matches_index_oracle() {
        let (n, c, h, grid) = (2, 3, 8, 2);
        let x = Tensor::from_fn([n, c, h, h], |i| i as f64).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = patchify(&mut g, xv, grid).unwrap();
        let ph = h / grid;
        assert_eq!(g.shape(p), &[n, grid * grid, ph * ph * c]);
        let out = g.value(p);
        for b in 0..n {
            for gi in 0..grid {
                for gj in 0..grid {
                    for r in 0..ph {
                        for col in 0..ph {
                            for ch in 0..c {
                                let want = x.at(&[b, ch, gi * ph + r, gj * ph + col]);
                                let got = out.at(&[b, gi * grid + gj, (r * ph + col) * c + ch]);
                                assert_eq!(got, want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_rejects_indivisible_grid() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros([1, 3, 10, 10]).unwrap());
        assert!(patchify(&mut g, xv, 3).is_err());
    }

    #[test]
    fn flatten_cells_reads_channels_per_cell() {
        let x = Tensor::from_fn([1, 2, 2, 3], |i| i as f64).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = flatten_cells(&mut g, xv).unwrap();
        assert_eq!(g.shape(s), &[1, 6, 2]);
        assert_eq!(g.value(s).at(&[0, 4, 1]), x.at(&[0, 1, 1, 1]));
    }

    #[test]
    fn token_is_first_row_plus_position() {
        let mut seq = None;
        let store = store_with(|pb| seq = Some(TokenSequence::new(pb, 4, 3)));
        let seq = seq.unwrap();
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let xv = cx.graph.constant(Tensor::zeros([2, 4, 3]).unwrap());
        let z = seq.forward(&mut cx, xv).unwrap();
        assert_eq!(g.shape(z), &[2, 5, 3]);
        let (tok, pos) = (store.value(seq.token), store.value(seq.position));
        for b in 0..2 {
            for d in 0..3 {
                assert_eq!(g.value(z).at(&[b, 0, d]), tok.data()[d] + pos.at(&[0, d]));
                assert_eq!(g.value(z).at(&[b, 3, d]), pos.at(&[3, d]));
            }
        }
    }

    #[test]
    fn patch_embedding_sequence_length() {
        let mut emb = None;
        let store = store_with(|pb| emb = Some(PatchEmbedding::new(pb, 4, 4 * 4 * 3, 8)));
        let mut g = Graph::new();
        let mut cx = Context::new(&mut g, &store, Mode::Eval, 0);
        let xv = cx.graph.constant(Tensor::zeros([1, 3, 16, 16]).unwrap());
        let z = emb.unwrap().forward(&mut cx, xv).unwrap();
        assert_eq!(g.shape(z), &[1, 17, 8]);
    }
}
