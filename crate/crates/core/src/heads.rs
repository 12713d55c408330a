//! Open-vocabulary classification, objectness and mask heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{activate, linear, Activation, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Binarization threshold applied to soft masks at evaluation time.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Category text embeddings `E_text`, `[K, C']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub embeddings: Tensor,
    pub category_names: Vec<String>,
    pub novel_flags: Vec<bool>,
}

impl TextEmbeddings {
    pub fn new(embeddings: Tensor, category_names: Vec<String>, novel_flags: Vec<bool>) -> Result<Self> {
        let k = category_names.len();
        if k == 0 {
            return Err(Error::input("text embeddings need at least one category"));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != k || novel_flags.len() != k {
            return Err(Error::input(format!(
                "{k} names and {} flags for embeddings {:?}",
                novel_flags.len(),
                embeddings.shape()
            )));
        }
        let mut sorted = category_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::input("category names must be unique"));
        }
        for i in 0..k {
            let n = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!("text embedding {i} has norm {n}")));
            }
        }
        Ok(TextEmbeddings {
            embeddings,
            category_names,
            novel_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.category_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_names.is_empty()
    }

    /// The sub-vocabulary of the given category ids, in that order.
    pub fn subset(&self, ids: &[usize]) -> TextEmbeddings {
        TextEmbeddings {
            embeddings: self.embeddings.select_rows(ids),
            category_names: ids.iter().map(|&i| self.category_names[i].clone()).collect(),
            novel_flags: ids.iter().map(|&i| self.novel_flags[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub width: usize,
    pub activation: Activation,
    /// Multiplier on the class logits; 1 leaves them untouched.
    pub logit_scale: f64,
    /// L2-normalize class embeddings before scoring.
    pub normalize_cls_embeddings: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            width: 64,
            activation: Activation::Relu,
            logit_scale: 1.0,
            normalize_cls_embeddings: false,
        }
    }
}

impl HeadsConfig {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        store.init_linear("ins_head.mlp1", c, c, rng);
        store.init_linear("ins_head.mlp2", c, c, rng);
        store.init_linear("ins_head.mlp3", c, 1, rng);
        store.init_linear("mask_head.mlp1", c, c, rng);
        store.init_linear("mask_head.mlp2", c, c, rng);
        store.init_linear("mask_head.mlp3", c, c, rng);
    }
}

/// `S_cls = softmax(scale * E_cls E_text^T)`, `[N, K]`.
pub fn classify(
    g: &mut Graph,
    cfg: &HeadsConfig,
    class_embeddings: Var,
    text: &TextEmbeddings,
) -> Result<Var> {
    let (e, t) = (g.shape(class_embeddings).to_vec(), text.embeddings.shape());
    if e.len() != 2 || e[1] != t[1] {
        return Err(Error::input(format!(
            "class embeddings {e:?} do not match text embeddings {t:?}"
        )));
    }
    let e = if cfg.normalize_cls_embeddings {
        g.l2_normalize(class_embeddings)?
    } else {
        class_embeddings
    };
    let text_t = g.constant(text.embeddings.transpose()?);
    let logits = g.matmul(e, text_t)?;
    let logits = if cfg.logit_scale != 1.0 {
        g.scale(logits, cfg.logit_scale)?
    } else {
        logits
    };
    Ok(g.softmax(logits)?)
}

fn mlp3(g: &mut Graph, p: &Bound, prefix: &str, act: Activation, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.mlp1"), x)?;
    let h = activate(g, act, h)?;
    let h = linear(g, p, &format!("{prefix}.mlp2"), h)?;
    let h = activate(g, act, h)?;
    linear(g, p, &format!("{prefix}.mlp3"), h)
}

/// Objectness `S_ins = sigmoid(mlp3(q_clip))`, `[N, 1]`.
pub fn instance_head(g: &mut Graph, p: &Bound, cfg: &HeadsConfig, queries: Var) -> Result<Var> {
    check_width(g, cfg, queries)?;
    let logits = mlp3(g, p, "ins_head", cfg.activation, queries)?;
    Ok(g.sigmoid(logits)?)
}

/// Soft masks and mask embeddings for one clip.
#[derive(Debug, Clone, Copy)]
pub struct MaskPrediction {
    /// `M_clip`, `[N, T, h, w]`.
    pub masks: Var,
    /// `E_mask`, `[N, C]`.
    pub mask_embeddings: Var,
}

/// `M_clip[n,t,y,x] = sigmoid(sum_c E_mask[n,c] E_pixel[c,t,y,x])`.
pub fn mask_head(
    g: &mut Graph,
    p: &Bound,
    cfg: &HeadsConfig,
    queries: Var,
    pixel_embeddings: Var,
) -> Result<MaskPrediction> {
    check_width(g, cfg, queries)?;
    let mask_embeddings = mlp3(g, p, "mask_head", cfg.activation, queries)?;
    mask_from_embeddings(g, mask_embeddings, pixel_embeddings)
}

pub fn mask_from_embeddings(
    g: &mut Graph,
    mask_embeddings: Var,
    pixel_embeddings: Var,
) -> Result<MaskPrediction> {
    let ps = g.shape(pixel_embeddings).to_vec();
    let n = g.shape(mask_embeddings)[0];
    if ps.len() != 4 || ps[0] != g.shape(mask_embeddings)[1] {
        return Err(Error::input(format!(
            "pixel embeddings {ps:?} do not match mask embeddings {:?}",
            g.shape(mask_embeddings)
        )));
    }
    let flat = g.reshape(pixel_embeddings, &[ps[0], ps[1] * ps[2] * ps[3]])?;
    let logits = g.matmul(mask_embeddings, flat)?;
    let probs = g.sigmoid(logits)?;
    let masks = g.reshape(probs, &[n, ps[1], ps[2], ps[3]])?;
    Ok(MaskPrediction {
        masks,
        mask_embeddings,
    })
}

fn check_width(g: &Graph, cfg: &HeadsConfig, queries: Var) -> Result<()> {
    let s = g.shape(queries);
    if s.len() != 2 || s[1] != cfg.width {
        return Err(Error::input(format!(
            "queries {s:?} do not match head width {}",
            cfg.width
        )));
    }
    Ok(())
}

/// Detection score `S_ins * max_k S_cls` and the arg-max class for every query.
/// Ties go to the lowest class id.
pub fn detection_scores(instance: &Tensor, classes: &Tensor) -> Vec<(usize, f64)> {
    (0..classes.shape()[0])
        .map(|n| {
            let (k, best) = argmax(classes.row(n));
            (k, instance.data()[n] * best)
        })
        .collect()
}

/// Index and value of the first maximum.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
}
