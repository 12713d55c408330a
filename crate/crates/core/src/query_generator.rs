//! Pixel embeddings and video-level instance queries for one clip.
//!
//! A two-layer strided convolutional stem (3x3, padding 1) stands in for the
//! backbone and pixel decoder; a stack of transformer decoder layers turns the
//! learnable initial queries into clip-level instance queries. Positional
//! encodings are added to the attention keys only; the learnable query
//! embedding `decoder.query_embed` is added to the attention queries in every
//! layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{activate, linear, Activation, Bound, ParamStore};
use crate::posenc::PositionalEncoding;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryGeneratorConfig {
    pub in_channels: usize,
    /// Model width `C`.
    pub width: usize,
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Strides of the two stem convolutions; their product is `S`.
    pub strides: [usize; 2],
    pub activation: Activation,
    /// Standard deviation of the initial query draw.
    pub query_init_std: f64,
}

impl Default for QueryGeneratorConfig {
    fn default() -> Self {
        QueryGeneratorConfig {
            in_channels: 16,
            width: 64,
            num_queries: 20,
            layers: 3,
            heads: 1,
            ffn_dim: 128,
            strides: [2, 2],
            activation: Activation::Relu,
            query_init_std: 0.02,
        }
    }
}

impl QueryGeneratorConfig {
    pub fn stride(&self) -> usize {
        self.strides[0] * self.strides[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::config(format!(
                "model width must be a positive multiple of 4, got {}",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.num_queries == 0 || self.in_channels == 0 || self.strides.contains(&0) {
            return Err(Error::config("queries, input channels and strides must be positive"));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        store.init_linear("encoder.conv1", self.in_channels * 9, c, rng);
        store.init_linear("encoder.conv2", c * 9, c, rng);
        store.init_linear("encoder.pixel_proj", c, c, rng);
        store.insert(
            "decoder.query_init",
            Tensor::randn(&[self.num_queries, c], self.query_init_std, rng),
        );
        store.insert(
            "decoder.query_embed",
            Tensor::randn(&[self.num_queries, c], self.query_init_std, rng),
        );
        for l in 0..self.layers {
            for block in ["cross_attn", "self_attn"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    store.insert(
                        format!("decoder.layer{l}.{block}.{w}"),
                        crate::params::xavier(c, c, rng),
                    );
                }
            }
            store.init_linear(&format!("decoder.layer{l}.ffn.fc1"), c, self.ffn_dim, rng);
            store.init_linear(&format!("decoder.layer{l}.ffn.fc2"), self.ffn_dim, c, rng);
            for n in ["norm1", "norm2", "norm3"] {
                store.insert(format!("decoder.layer{l}.{n}.gamma"), Tensor::ones(&[c]));
                store.insert(format!("decoder.layer{l}.{n}.beta"), Tensor::zeros(&[c]));
            }
        }
    }
}

/// Input clip `x_clip`: `frames` is `[T, Cin, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub clip_index: usize,
    pub frame_indices: Vec<usize>,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::input(format!(
                "clip frames must be [T>=1, Cin, H, W], got {s:?}"
            )));
        }
        if self.frame_indices.len() != s[0] {
            return Err(Error::input("frame_indices length differs from T"));
        }
        if !self.frames.is_finite() {
            return Err(Error::input("clip contains non-finite values"));
        }
        Ok(())
    }
}

/// Graph handles for `F_enc` and `E_pixel`, both `[C, T, H/S, W/S]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedClip {
    pub features: Var,
    pub pixel_embeddings: Var,
    /// `F_enc` as tokens `[T*h*w, C]`, ordered `(t, y, x)`.
    pub tokens: Var,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Video-level instance queries `q_clip`, `[N, C]`.
#[derive(Debug, Clone, Copy)]
pub struct InstanceQuerySet {
    pub queries: Var,
    pub clip_index: usize,
}

/// im2col for a 3x3, padding-1 convolution as a gather.
/// `at(t, c, y, x)` maps an input coordinate to its flat index.
fn im2col(
    frames: usize,
    channels: usize,
    (h, w): (usize, usize),
    stride: usize,
    at: impl Fn(usize, usize, usize, usize) -> usize,
) -> (Vec<Option<usize>>, usize, usize) {
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let cols = channels * 9;
    let mut index = Vec::with_capacity(frames * oh * ow * cols);
    for t in 0..frames {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            index.push(inside.then(|| at(t, c, iy as usize, ix as usize)));
                        }
                    }
                }
            }
        }
    }
    (index, oh, ow)
}

fn conv3x3(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    frames: usize,
    channels: usize,
    hw: (usize, usize),
    stride: usize,
    at: impl Fn(usize, usize, usize, usize) -> usize,
) -> Result<(Var, usize, usize)> {
    let (index, oh, ow) = im2col(frames, channels, hw, stride, at);
    let cols = g.gather(x, index, &[frames * oh * ow, channels * 9])?;
    Ok((linear(g, p, prefix, cols)?, oh, ow))
}

/// `[P, C]` tokens -> `[C, T, h, w]`.
fn tokens_to_channel_major(
    g: &mut Graph,
    tokens: Var,
    c: usize,
    t: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let tr = g.transpose(tokens)?;
    Ok(g.reshape(tr, &[c, t, h, w])?)
}

/// Runs the stem on `frames` (`[T, Cin, H, W]`).
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &QueryGeneratorConfig,
    frames: Var,
) -> Result<EncodedClip> {
    let s = g.shape(frames).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::input(format!(
            "expected frames [T, {}, H, W], got {s:?}",
            cfg.in_channels
        )));
    }
    let (t, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let stride = cfg.stride();
    if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "frame size {h}x{w} not divisible by stride {stride}"
        )));
    }
    let c = cfg.width;
    let (x1, h1, w1) = conv3x3(g, p, "encoder.conv1", frames, t, cin, (h, w), cfg.strides[0], |ti, ci, y, x| {
        ((ti * cin + ci) * h + y) * w + x
    })?;
    let x1 = activate(g, cfg.activation, x1)?;
    let (tokens, h2, w2) = conv3x3(g, p, "encoder.conv2", x1, t, c, (h1, w1), cfg.strides[1], |ti, ci, y, x| {
        ((ti * h1 + y) * w1 + x) * c + ci
    })?;
    let pix_tokens = linear(g, p, "encoder.pixel_proj", tokens)?;
    let features = tokens_to_channel_major(g, tokens, c, t, h2, w2)?;
    let pixel_embeddings = tokens_to_channel_major(g, pix_tokens, c, t, h2, w2)?;
    Ok(EncodedClip {
        features,
        pixel_embeddings,
        tokens,
        frames: t,
        height: h2,
        width: w2,
        stride,
    })
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` split over
/// `heads` column groups. Returns the output and, for one head, the weights.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Option<Var>)> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::input(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if heads <= 1 {
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
        let weights = g.softmax(logits)?;
        let out = g.matmul(weights, v)?;
        return Ok((out, Some(weights)));
    }
    let dh = d / heads;
    let dv = g.shape(v)[1] / heads;
    let (qt, kt, vt) = (g.transpose(q)?, g.transpose(k)?, g.transpose(v)?);
    let mut parts = Vec::with_capacity(heads);
    for hd in 0..heads {
        let rows: Vec<usize> = (hd * dh..(hd + 1) * dh).collect();
        let vrows: Vec<usize> = (hd * dv..(hd + 1) * dv).collect();
        let qh = g.select_rows(qt, &rows)?;
        let qh = g.transpose(qh)?;
        let kh = g.select_rows(kt, &rows)?;
        let vh = g.select_rows(vt, &vrows)?;
        let vh = g.transpose(vh)?;
        let logits = g.matmul(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(logits)?;
        let out = g.matmul(weights, vh)?;
        parts.push(g.transpose(out)?);
    }
    let stacked = g.concat(&parts)?;
    Ok((g.transpose(stacked)?, None))
}

fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, p.get(&format!("{prefix}.gamma"))?)?;
    Ok(g.add(y, p.get(&format!("{prefix}.beta"))?)?)
}

/// One decoder layer: cross-attention into the clip tokens, self-attention
/// among the queries, then a feed-forward block; each with residual + norm.
fn decoder_layer(
    g: &mut Graph,
    p: &Bound,
    cfg: &QueryGeneratorConfig,
    l: usize,
    queries: Var,
    query_embed: Var,
    memory: Var,
    memory_keys: Var,
) -> Result<Var> {
    let w = |name: &str| p.get(&format!("decoder.layer{l}.{name}"));

    let q_in = g.add(queries, query_embed)?;
    let q = g.matmul(q_in, w("cross_attn.wq")?)?;
    let k = g.matmul(memory_keys, w("cross_attn.wk")?)?;
    let v = g.matmul(memory, w("cross_attn.wv")?)?;
    let (att, _) = attention(g, q, k, v, cfg.heads)?;
    let att = g.matmul(att, w("cross_attn.wo")?)?;
    let x = g.add(queries, att)?;
    let x = norm(g, p, &format!("decoder.layer{l}.norm1"), x)?;

    let x_in = g.add(x, query_embed)?;
    let q = g.matmul(x_in, w("self_attn.wq")?)?;
    let k = g.matmul(x_in, w("self_attn.wk")?)?;
    let v = g.matmul(x, w("self_attn.wv")?)?;
    let (att, _) = attention(g, q, k, v, cfg.heads)?;
    let att = g.matmul(att, w("self_attn.wo")?)?;
    let x2 = g.add(x, att)?;
    let x2 = norm(g, p, &format!("decoder.layer{l}.norm2"), x2)?;

    let h = linear(g, p, &format!("decoder.layer{l}.ffn.fc1"), x2)?;
    let h = activate(g, cfg.activation, h)?;
    let h = linear(g, p, &format!("decoder.layer{l}.ffn.fc2"), h)?;
    let x3 = g.add(x2, h)?;
    norm(g, p, &format!("decoder.layer{l}.norm3"), x3)
}

/// Decoder over explicit token rows; `memory` and `pos` are `[P, C]`.
pub fn decode_tokens(
    g: &mut Graph,
    p: &Bound,
    cfg: &QueryGeneratorConfig,
    memory: Var,
    pos: Var,
) -> Result<Var> {
    if g.shape(memory) != g.shape(pos) {
        return Err(Error::input(format!(
            "positional encoding {:?} does not match features {:?}",
            g.shape(pos),
            g.shape(memory)
        )));
    }
    let mut queries = p.get("decoder.query_init")?;
    if cfg.layers == 0 {
        return Ok(queries);
    }
    let query_embed = p.get("decoder.query_embed")?;
    let keys = g.add(memory, pos)?;
    for l in 0..cfg.layers {
        queries = decoder_layer(g, p, cfg, l, queries, query_embed, memory, keys)?;
    }
    Ok(queries)
}

/// Produces `q_clip` for an encoded clip.
pub fn decode(
    g: &mut Graph,
    p: &Bound,
    cfg: &QueryGeneratorConfig,
    encoded: &EncodedClip,
    pos: &PositionalEncoding,
    clip_index: usize,
) -> Result<InstanceQuerySet> {
    let want = [cfg.width, encoded.frames, encoded.height, encoded.width];
    if pos.combined.shape() != want {
        return Err(Error::input(format!(
            "positional encoding {:?} does not match features {:?}",
            pos.combined.shape(),
            want
        )));
    }
    let pos_tokens = g.constant(pos.tokens());
    let queries = decode_tokens(g, p, cfg, encoded.tokens, pos_tokens)?;
    Ok(InstanceQuerySet {
        queries,
        clip_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> QueryGeneratorConfig {
        QueryGeneratorConfig {
            in_channels: 2,
            width: 8,
            num_queries: 3,
            layers: 2,
            heads: 1,
            ffn_dim: 12,
            activation: Activation::Gelu,
            query_init_std: 0.5,
            ..Default::default()
        }
    }

    fn store(cfg: &QueryGeneratorConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        cfg.init(&mut s, &mut rng);
        s
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_features() {
        let cfg = small_cfg();
        let s = store(&cfg, 1);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let x = g.constant(Tensor::zeros(&[2, 2, 8, 8]));
        let enc = encode(&mut g, &p, &cfg, x).unwrap();
        assert!(g.value(enc.features).data().iter().all(|v| *v == 0.0));
        assert_eq!(g.shape(enc.features), &[8, 2, 2, 2]);
    }

    #[test]
    fn output_shapes_follow_stride() {
        let cfg = QueryGeneratorConfig {
            in_channels: 3,
            width: 32,
            ..small_cfg()
        };
        let s = store(&cfg, 2);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::randn(&[3, 3, 16, 16], 1.0, &mut rng));
        let enc = encode(&mut g, &p, &cfg, x).unwrap();
        assert_eq!(g.shape(enc.pixel_embeddings), &[32, 3, 4, 4]);
        assert_eq!(enc.stride, 4);

        let bad = g.constant(Tensor::zeros(&[1, 3, 10, 16]));
        assert!(matches!(encode(&mut g, &p, &cfg, bad), Err(Error::Config(_))));
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let s = store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let probe = Tensor::randn(&[8, 1, 2, 2], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let p = Bound::bind(g, &s, false);
                let enc = encode(g, &p, &cfg, x)?;
                let w = g.constant(probe.clone());
                let y = g.mul(enc.pixel_embeddings, w)?;
                Ok::<_, Error>(g.sum(y)?)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = QueryGeneratorConfig {
            layers: 0,
            ..small_cfg()
        };
        let s = store(&cfg, 4);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let mem = g.constant(Tensor::ones(&[5, 8]));
        let pos = g.constant(Tensor::zeros(&[5, 8]));
        let q = decode_tokens(&mut g, &p, &cfg, mem, pos).unwrap();
        assert_eq!(g.value(q), s.get("decoder.query_init").unwrap());
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[4, 6], 3.0, &mut rng));
        let k = g.constant(Tensor::randn(&[1, 6], 3.0, &mut rng));
        let vt = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let v = g.constant(vt.clone());
        for heads in [1, 2, 3] {
            let (out, _) = attention(&mut g, q, k, v, heads).unwrap();
            for r in 0..4 {
                for c in 0..6 {
                    assert!((g.value(out).at(&[r, c]) - vt.at(&[0, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn token_permutation_with_positions_is_invisible() {
        let cfg = small_cfg();
        let s = store(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = Tensor::randn(&[10, 8], 1.0, &mut rng);
        let pos = Tensor::randn(&[10, 8], 1.0, &mut rng);
        let perm = [3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let run = |m: Tensor, ps: Tensor| {
            let mut g = Graph::new();
            let p = Bound::bind(&mut g, &s, false);
            let m = g.constant(m);
            let ps = g.constant(ps);
            let q = decode_tokens(&mut g, &p, &cfg, m, ps).unwrap();
            g.value(q).clone()
        };
        let base = run(mem.clone(), pos.clone());
        let permuted = run(mem.select_rows(&perm), pos.select_rows(&perm));
        assert!(base.max_abs_diff(&permuted) < 1e-9);
    }

    #[test]
    fn query_permutation_is_equivariant() {
        let cfg = QueryGeneratorConfig {
            heads: 2,
            ..small_cfg()
        };
        let s = store(&cfg, 8);
        let perm = [2, 0, 1];
        let mut permuted = s.clone();
        for name in ["decoder.query_init", "decoder.query_embed"] {
            let t = s.get(name).unwrap().select_rows(&perm);
            permuted.insert(name, t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let pos = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let run = |st: &ParamStore| {
            let mut g = Graph::new();
            let p = Bound::bind(&mut g, st, false);
            let m = g.constant(mem.clone());
            let ps = g.constant(pos.clone());
            let q = decode_tokens(&mut g, &p, &cfg, m, ps).unwrap();
            g.value(q).clone()
        };
        let a = run(&s).select_rows(&perm);
        let b = run(&permuted);
        assert!(a.max_abs_diff(&b) < 1e-12);
        // deterministic
        assert_eq!(run(&s), run(&s));
    }

    #[test]
    fn positional_mismatch_is_rejected() {
        let cfg = small_cfg();
        let s = store(&cfg, 9);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let x = g.constant(Tensor::zeros(&[2, 2, 8, 8]));
        let enc = encode(&mut g, &p, &cfg, x).unwrap();
        let pos = PositionalEncoding::new(8, 3, 2, 2).unwrap();
        assert!(decode(&mut g, &p, &cfg, &enc, &pos, 0).is_err());
        let pos = PositionalEncoding::new(8, 2, 2, 2).unwrap();
        let q = decode(&mut g, &p, &cfg, &enc, &pos, 0).unwrap();
        assert_eq!(g.shape(q.queries), &[3, 8]);
    }
}
