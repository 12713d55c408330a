//! Unified embedding alignment: instance queries attend over the per-frame
//! vision-language image embeddings of the whole clip, producing class
//! embeddings that live in the text-aligned space.
//!
//! `Q = mlp2(act(mlp1(q_clip)))`, `K = E_image W_k`, `V = E_image W_v`,
//! `E_cls = softmax(Q K^T / sqrt(C')) V`. There is no residual path: the
//! attention output is the class embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{activate, linear, Activation, Bound, ParamStore};
use crate::query_generator::attention;
use crate::tensor::{Graph, Tensor, Var};

/// Per-frame image embeddings `E_image`, `[T, C']`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipImageEmbeddings {
    pub embeddings: Tensor,
    pub source: String,
}

impl ClipImageEmbeddings {
    pub fn num_frames(&self) -> usize {
        self.embeddings.shape()[0]
    }

    /// Rows are unit-norm to 1e-6, except all-zero rows (empty frames).
    pub fn check_normalized(&self) -> Result<()> {
        for t in 0..self.num_frames() {
            let row = self.embeddings.row(t);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n != 0.0 && (n - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!(
                    "image embedding row {t} has norm {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Aligned class embeddings `E_cls`, `[N, C']`.
#[derive(Debug, Clone, Copy)]
pub struct ClassEmbeddings {
    pub embeddings: Var,
    /// Attention over frames, `[N, T]` (single-head only).
    pub attention: Option<Var>,
    pub clip_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Query width `C`.
    pub query_dim: usize,
    /// Vision-language embedding width `C'`.
    pub embed_dim: usize,
    pub heads: usize,
    pub activation: Activation,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            query_dim: 64,
            embed_dim: 16,
            heads: 1,
            activation: Activation::Relu,
        }
    }
}

impl AlignmentConfig {
    /// Key and value projections start at the identity so that directions the
    /// training vocabulary never excites pass through unchanged.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_linear("uea.mlp1", self.query_dim, self.embed_dim, rng);
        store.init_linear("uea.mlp2", self.embed_dim, self.embed_dim, rng);
        store.insert("uea.wk", Tensor::eye(self.embed_dim));
        store.insert("uea.wv", Tensor::eye(self.embed_dim));
    }
}

/// `Q_clip = mlp2(act(mlp1(q_clip)))`.
pub fn project_queries(
    g: &mut Graph,
    p: &Bound,
    cfg: &AlignmentConfig,
    queries: Var,
) -> Result<Var> {
    let c = g.shape(queries);
    if c.len() != 2 || c[1] != cfg.query_dim {
        return Err(Error::input(format!(
            "queries {c:?} do not match query width {}",
            cfg.query_dim
        )));
    }
    let h = linear(g, p, "uea.mlp1", queries)?;
    let h = activate(g, cfg.activation, h)?;
    linear(g, p, "uea.mlp2", h)
}

/// Cross-attention from projected queries into the clip's frame embeddings.
pub fn align(
    g: &mut Graph,
    p: &Bound,
    cfg: &AlignmentConfig,
    projected: Var,
    image: Var,
    clip_index: usize,
) -> Result<ClassEmbeddings> {
    let s = g.shape(image).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::input(format!(
            "alignment needs at least one frame embedding, got {s:?}"
        )));
    }
    if s[1] != cfg.embed_dim || g.shape(projected)[1] != cfg.embed_dim {
        return Err(Error::input(format!(
            "embedding width mismatch: image {:?}, queries {:?}, expected {}",
            s,
            g.shape(projected),
            cfg.embed_dim
        )));
    }
    let k = g.matmul(image, p.get("uea.wk")?)?;
    let v = g.matmul(image, p.get("uea.wv")?)?;
    let (embeddings, attention) = attention(g, projected, k, v, cfg.heads)?;
    Ok(ClassEmbeddings {
        embeddings,
        attention,
        clip_index,
    })
}
