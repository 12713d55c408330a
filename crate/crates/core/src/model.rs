//! The assembled model: query generation, embedding alignment and the three
//! prediction heads for one clip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_alignment::{align, project_queries, AlignmentConfig, ClipImageEmbeddings};
use crate::error::{Error, Result};
use crate::heads::{classify, instance_head, mask_head, HeadsConfig, TextEmbeddings};
use crate::params::{Activation, Bound, ParamStore};
use crate::posenc::PositionalEncoding;
use crate::query_generator::{decode, encode, QueryGeneratorConfig, VideoClip};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `N`
    pub num_queries: usize,
    /// `C`
    pub width: usize,
    /// `C'`
    pub embed_dim: usize,
    pub in_channels: usize,
    /// Decoder layers `L`.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    pub query_init_std: f64,
    pub logit_scale: f64,
    pub uea_enabled: bool,
    pub normalize_cls_embeddings: bool,
    pub all_class_bce: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 20,
            width: 64,
            embed_dim: 16,
            in_channels: 16,
            layers: 3,
            heads: 1,
            ffn_dim: 128,
            activation: Activation::Relu,
            query_init_std: 0.02,
            logit_scale: 1.0,
            uea_enabled: true,
            normalize_cls_embeddings: false,
            all_class_bce: false,
        }
    }
}

impl ModelConfig {
    pub fn query_generator(&self) -> QueryGeneratorConfig {
        QueryGeneratorConfig {
            in_channels: self.in_channels,
            width: self.width,
            num_queries: self.num_queries,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            strides: [2, 2],
            activation: self.activation,
            query_init_std: self.query_init_std,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            query_dim: self.width,
            embed_dim: self.embed_dim,
            heads: 1,
            activation: self.activation,
        }
    }

    pub fn heads_config(&self) -> HeadsConfig {
        HeadsConfig {
            width: self.width,
            activation: self.activation,
            logit_scale: self.logit_scale,
            normalize_cls_embeddings: self.normalize_cls_embeddings,
        }
    }

    pub fn stride(&self) -> usize {
        self.query_generator().stride()
    }

    pub fn validate(&self) -> Result<()> {
        self.query_generator().validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(Error::config(format!("logit_scale must be positive, got {}", self.logit_scale)));
        }
        Ok(())
    }

    /// Fresh parameters; a pure function of `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.query_generator().init(&mut store, &mut rng);
        self.alignment().init(&mut store, &mut rng);
        self.heads_config().init(&mut store, &mut rng);
        Ok(store)
    }
}

/// Graph handles for everything the model produces on one clip.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `q_clip`, `[N, C]`
    pub queries: Var,
    /// `E_cls`, `[N, C']`
    pub class_embeddings: Var,
    /// `S_cls`, `[N, K]`
    pub classes: Var,
    /// `S_ins`, `[N, 1]`
    pub instance: Var,
    /// `M_clip`, `[N, T, h, w]`
    pub masks: Var,
    pub clip_index: usize,
}

/// One forward pass. With alignment disabled the projected queries are
/// scored against the text embeddings directly.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    clip: &VideoClip,
    image: &ClipImageEmbeddings,
    text: &TextEmbeddings,
) -> Result<ModelOutput> {
    clip.validate()?;
    if image.num_frames() != clip.num_frames() {
        return Err(Error::input(format!(
            "{} image embeddings for a clip of {} frames",
            image.num_frames(),
            clip.num_frames()
        )));
    }
    let qcfg = cfg.query_generator();
    let frames = g.constant(clip.frames.clone());
    let encoded = encode(g, p, &qcfg, frames)?;
    let pos = PositionalEncoding::new(cfg.width, encoded.frames, encoded.height, encoded.width)?;
    let queries = decode(g, p, &qcfg, &encoded, &pos, clip.clip_index)?.queries;

    let acfg = cfg.alignment();
    let projected = project_queries(g, p, &acfg, queries)?;
    let class_embeddings = if cfg.uea_enabled {
        let img = g.constant(image.embeddings.clone());
        align(g, p, &acfg, projected, img, clip.clip_index)?.embeddings
    } else {
        projected
    };
    let hcfg = cfg.heads_config();
    let classes = classify(g, &hcfg, class_embeddings, text)?;
    let instance = instance_head(g, p, &hcfg, queries)?;
    let masks = mask_head(g, p, &hcfg, queries, encoded.pixel_embeddings)?.masks;
    Ok(ModelOutput {
        queries,
        class_embeddings,
        classes,
        instance,
        masks,
        clip_index: clip.clip_index,
    })
}

/// Detached outputs of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub queries: Tensor,
    pub classes: Tensor,
    pub instance: Tensor,
    pub masks: Tensor,
    pub clip_index: usize,
    pub frame_indices: Vec<usize>,
}

/// Inference on one clip with frozen parameters.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &VideoClip,
    image: &ClipImageEmbeddings,
    text: &TextEmbeddings,
) -> Result<ClipPrediction> {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, store, false);
    let out = forward(&mut g, &p, cfg, clip, image, text)?;
    Ok(ClipPrediction {
        queries: g.value(out.queries).clone(),
        classes: g.value(out.classes).clone(),
        instance: g.value(out.instance).clone(),
        masks: g.value(out.masks).clone(),
        clip_index: clip.clip_index,
        frame_indices: clip.frame_indices.clone(),
    })
}
