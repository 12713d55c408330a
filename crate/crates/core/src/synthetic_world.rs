//! Procedural videos of moving shapes with category prototypes, standing in
//! for real video and for the vision-language encoders.
//!
//! Every category `k` has a unit prototype `p_k` in the text-aligned space.
//! Pixels of an instance carry the visual signature `v_k = A p_k`, where `A`
//! is a hidden orthogonal matrix fixed per dataset (identity when there is no
//! domain gap), plus Gaussian noise everywhere. The image-embedding provider
//! works in prototype space, which is what lets alignment against it bridge
//! the gap.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::{GroundTruthClip, GtInstance};
use crate::embedding_alignment::ClipImageEmbeddings;
use crate::error::{Error, Result};
use crate::heads::TextEmbeddings;
use crate::query_generator::VideoClip;
use crate::tensor::ovtf::{self, DType};
use crate::tensor::{Tensor, L2_EPS};

pub const MANIFEST_FORMAT: &str = "ovsynth-dataset-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainGap {
    Identity,
    HiddenRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// `K`
    pub num_classes: usize,
    /// Share of the categories that are base (seen in training).
    pub base_ratio: f64,
    /// `C'`; also the number of input channels.
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive range of instances per video.
    pub instances: [usize; 2],
    /// Inclusive range of shape side lengths in pixels.
    pub size: [usize; 2],
    /// Maximum displacement per frame in pixels.
    pub speed: f64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub domain_gap: DomainGap,
    /// Instances may overlap (front-most wins); otherwise each moves in its own band.
    pub occlusion: bool,
    pub train_videos: usize,
    pub eval_videos: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes: 12,
            base_ratio: 2.0 / 3.0,
            embed_dim: 16,
            height: 32,
            width: 32,
            frames: 10,
            instances: [1, 1],
            size: [8, 14],
            speed: 1.5,
            noise: 0.05,
            domain_gap: DomainGap::HiddenRotation,
            occlusion: true,
            train_videos: 64,
            eval_videos: 24,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_base(&self) -> usize {
        (self.num_classes as f64 * self.base_ratio).round() as usize
    }

    pub fn num_novel(&self) -> usize {
        self.num_classes - self.num_base()
    }

    /// Base categories are `0..num_base`, novel ones the rest.
    pub fn is_novel(&self, class_id: usize) -> bool {
        class_id >= self.num_base()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.num_classes == 0 || self.num_classes > self.embed_dim {
            return bad(format!(
                "need 1 <= num_classes <= embed_dim for orthonormal prototypes, got {} and {}",
                self.num_classes, self.embed_dim
            ));
        }
        if !(self.base_ratio > 0.0 && self.base_ratio <= 1.0) || self.num_base() == 0 {
            return bad(format!("base_ratio {} leaves no base category", self.base_ratio));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return bad(format!("speed must be finite and >= 0, got {}", self.speed));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames, height and width must be positive".into());
        }
        let [lo, hi] = self.instances;
        if hi == 0 || lo > hi {
            return bad(format!("invalid instance range {:?}", self.instances));
        }
        let [smin, smax] = self.size;
        if smin == 0 || smin > smax {
            return bad(format!("invalid size range {:?}", self.size));
        }
        let room = if self.occlusion {
            smax.min(self.height) >= smin && smin <= self.width && hi * smin * smin <= self.height * self.width
        } else {
            self.height / hi >= smin && smin <= self.width
        };
        if !room {
            return bad(format!(
                "{hi} instances of size >= {smin} do not fit a {}x{} grid",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub novel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub track_id: usize,
    pub class_id: usize,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    /// `[T, Cin, H, W]`
    pub frames: Tensor,
    pub instances: Vec<InstanceInfo>,
    /// Visible masks `[I, T, H, W]`, disjoint per frame.
    pub masks: Tensor,
}

impl SyntheticVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Full-resolution visible mask of instance `i` in frame `t`.
    pub fn mask(&self, i: usize, t: usize) -> &[f64] {
        let hw = self.height() * self.width();
        let off = (i * self.num_frames() + t) * hw;
        &self.masks.data()[off..off + hw]
    }

    pub fn clip(&self, frame_indices: &[usize], clip_index: usize) -> Result<VideoClip> {
        let s = self.frames.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(frame_indices.len() * per);
        for &t in frame_indices {
            if t >= s[0] {
                return Err(Error::input(format!("frame {t} outside video of {} frames", s[0])));
            }
            data.extend_from_slice(&self.frames.data()[t * per..(t + 1) * per]);
        }
        Ok(VideoClip {
            frames: Tensor::new(vec![frame_indices.len(), s[1], s[2], s[3]], data)?,
            clip_index,
            frame_indices: frame_indices.to_vec(),
        })
    }

    /// Masks of instance `i` over `frame_indices`, majority-downsampled by `stride`: `[T, h, w]`.
    pub fn downsampled_masks(&self, i: usize, frame_indices: &[usize], stride: usize) -> Tensor {
        let (h, w) = (self.height() / stride, self.width() / stride);
        let mut data = Vec::with_capacity(frame_indices.len() * h * w);
        for &t in frame_indices {
            data.extend(downsample(self.mask(i, t), self.width(), h, w, stride));
        }
        Tensor::new(vec![frame_indices.len(), h, w], data).expect("mask shape")
    }

    /// Training targets for a clip: instances with at least one visible cell.
    pub fn ground_truth(&self, frame_indices: &[usize], stride: usize) -> GroundTruthClip {
        let instances = self
            .instances
            .iter()
            .enumerate()
            .filter_map(|(i, info)| {
                let masks = self.downsampled_masks(i, frame_indices, stride);
                masks.data().iter().any(|v| *v > 0.0).then(|| GtInstance {
                    class_id: info.class_id,
                    masks,
                    track_id: info.track_id,
                })
            })
            .collect();
        GroundTruthClip { instances }
    }
}

/// Strict-majority pooling of `stride x stride` blocks.
pub fn downsample(mask: &[f64], width: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut on = 0;
            for dy in 0..stride {
                for dx in 0..stride {
                    if mask[(y * stride + dy) * width + x * stride + dx] > 0.5 {
                        on += 1;
                    }
                }
            }
            if 2 * on > stride * stride {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub categories: Vec<Category>,
    /// Unit rows `p_k`, `[K, C']`.
    pub prototypes: Tensor,
    /// Hidden orthogonal `A`, `[C', C']`.
    pub rotation: Tensor,
    pub videos: Vec<SyntheticVideo>,
}

impl World {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticVideo> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn video(&self, id: usize) -> Option<&SyntheticVideo> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.categories[class_id].novel
    }

    /// `v_k = A p_k` for every category, `[K, C']`.
    pub fn signatures(&self) -> Tensor {
        self.prototypes
            .matmul(&self.rotation.transpose().expect("rank 2"))
            .expect("shapes")
    }
}

/// Mixes a master seed and an index into an independent 64-bit seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const WORLD_STREAM: u64 = u64::MAX;
const IMAGE_STREAM: u64 = 0x1AA6_E000_0000_0000;

/// Orthonormalizes the rows in order (modified Gram-Schmidt).
fn gram_schmidt(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let r = &mut rest[0];
        for q in done.iter() {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-8 {
            return Err(Error::input("degenerate draw during orthonormalization"));
        }
        r.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

fn gaussian_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).expect("rectangular rows")
}

/// Orthonormal prototypes and the hidden rotation of a dataset.
pub fn prototypes_and_rotation(cfg: &WorldConfig) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, WORLD_STREAM));
    let mut protos = gaussian_rows(cfg.num_classes, cfg.embed_dim, &mut rng);
    gram_schmidt(&mut protos)?;
    let rotation = match cfg.domain_gap {
        DomainGap::Identity => Tensor::eye(cfg.embed_dim),
        DomainGap::HiddenRotation => {
            let mut a = gaussian_rows(cfg.embed_dim, cfg.embed_dim, &mut rng);
            gram_schmidt(&mut a)?;
            to_tensor(&a)
        }
    };
    Ok((to_tensor(&protos), rotation))
}

struct Mover {
    shape: Shape,
    h: usize,
    w: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Mover {
    fn step(&mut self) {
        for a in 0..2 {
            self.pos[a] += self.vel[a];
            // Reflect off the region walls; speeds below the region size need one bounce at most.
            if self.pos[a] < self.lo[a] {
                self.pos[a] = (2.0 * self.lo[a] - self.pos[a]).min(self.hi[a]);
                self.vel[a] = -self.vel[a];
            } else if self.pos[a] > self.hi[a] {
                self.pos[a] = (2.0 * self.hi[a] - self.pos[a]).max(self.lo[a]);
                self.vel[a] = -self.vel[a];
            }
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        let (y0, x0) = (self.pos[0].floor(), self.pos[1].floor());
        let (fy, fx) = (y as f64 - y0, x as f64 - x0);
        let (h, w) = (self.h as f64, self.w as f64);
        if fy < 0.0 || fx < 0.0 || fy >= h || fx >= w {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let dy = (fy + 0.5 - h / 2.0) / (h / 2.0);
                let dx = (fx + 0.5 - w / 2.0) / (w / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn generate_video(
    cfg: &WorldConfig,
    signatures: &Tensor,
    id: usize,
    split: Split,
    split_index: usize,
) -> Result<SyntheticVideo> {
    let seed = derive_seed(cfg.seed, id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hh, ww, t_len, cin) = (cfg.height, cfg.width, cfg.frames, cfg.embed_dim);
    let count = rng.random_range(cfg.instances[0]..=cfg.instances[1]);
    let pool: Vec<usize> = match split {
        Split::Train => (0..cfg.num_base()).collect(),
        Split::Eval => (0..cfg.num_classes).collect(),
    };
    let band = hh / count;
    let mut movers = Vec::with_capacity(count);
    let mut instances = Vec::with_capacity(count);
    for j in 0..count {
        let class_id = if j == 0 {
            pool[split_index % pool.len()]
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        let shape = if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let (ylo, yspan) = if cfg.occlusion { (0, hh) } else { (j * band, band) };
        let h = rng.random_range(cfg.size[0]..=cfg.size[1].min(yspan));
        let w = rng.random_range(cfg.size[0]..=cfg.size[1].min(ww));
        let lo = [ylo as f64, 0.0];
        let hi = [(ylo + yspan - h) as f64, (ww - w) as f64];
        let pos = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = cfg.speed * rng.random_range(0.5..=1.0);
        movers.push(Mover {
            shape,
            h,
            w,
            pos,
            vel: [speed * angle.sin(), speed * angle.cos()],
            lo,
            hi,
        });
        instances.push(InstanceInfo {
            track_id: j,
            class_id,
            shape,
        });
    }

    let hw = hh * ww;
    let mut owner = vec![usize::MAX; t_len * hw];
    for t in 0..t_len {
        for (j, m) in movers.iter().enumerate() {
            for y in 0..hh {
                for x in 0..ww {
                    if m.covers(y, x) {
                        owner[t * hw + y * ww + x] = j;
                    }
                }
            }
        }
        movers.iter_mut().for_each(Mover::step);
    }

    let mut masks = vec![0.0; count * t_len * hw];
    let mut frames = vec![0.0; t_len * cin * hw];
    for t in 0..t_len {
        for px in 0..hw {
            let j = owner[t * hw + px];
            if j == usize::MAX {
                continue;
            }
            masks[(j * t_len + t) * hw + px] = 1.0;
            let sig = signatures.row(instances[j].class_id);
            for c in 0..cin {
                frames[(t * cin + c) * hw + px] = sig[c];
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::config(e.to_string()))?;
        frames.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(SyntheticVideo {
        id,
        split,
        seed,
        frames: Tensor::new(vec![t_len, cin, hh, ww], frames)?,
        instances,
        masks: Tensor::new(vec![count, t_len, hh, ww], masks)?,
    })
}

pub fn category_name(k: usize) -> String {
    format!("category_{k:02}")
}

/// Builds the whole dataset; a pure function of the config (including its seed).
/// Train videos get ids `0..train_videos`, eval videos follow.
pub fn generate(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (prototypes, rotation) = prototypes_and_rotation(cfg)?;
    let signatures = prototypes.matmul(&rotation.transpose()?)?;
    let mut videos = Vec::with_capacity(cfg.train_videos + cfg.eval_videos);
    for i in 0..cfg.train_videos {
        videos.push(generate_video(cfg, &signatures, i, Split::Train, i)?);
    }
    for i in 0..cfg.eval_videos {
        videos.push(generate_video(cfg, &signatures, cfg.train_videos + i, Split::Eval, i)?);
    }
    let categories = (0..cfg.num_classes)
        .map(|k| Category {
            id: k,
            name: category_name(k),
            novel: cfg.is_novel(k),
        })
        .collect();
    Ok(World {
        config: cfg.clone(),
        categories,
        prototypes,
        rotation,
        videos,
    })
}

/// Per-frame image embeddings: the visible-area-weighted mix of the
/// prototypes of the instances in view, plus noise, L2-normalized. Frames
/// with (numerically) nothing in them come back as zero rows.
pub fn clip_image_provider(
    world: &World,
    video: &SyntheticVideo,
    frame_indices: &[usize],
) -> Result<ClipImageEmbeddings> {
    let d = world.config.embed_dim;
    let mut out = Vec::with_capacity(frame_indices.len() * d);
    for &t in frame_indices {
        if t >= video.num_frames() {
            return Err(Error::input(format!("frame {t} outside video {}", video.id)));
        }
        let areas: Vec<f64> = (0..video.instances.len())
            .map(|i| video.mask(i, t).iter().sum())
            .collect();
        let total: f64 = areas.iter().sum();
        let mut e = vec![0.0; d];
        if total > 0.0 {
            for (info, a) in video.instances.iter().zip(&areas) {
                let p = world.prototypes.row(info.class_id);
                e.iter_mut().zip(p).for_each(|(v, pk)| *v += pk * a / total);
            }
        }
        if world.config.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(video.seed ^ IMAGE_STREAM, t as u64));
            let normal = Normal::new(0.0, world.config.noise).map_err(|e| Error::config(e.to_string()))?;
            e.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > L2_EPS {
            e.iter_mut().for_each(|v| *v /= n);
        } else {
            e.iter_mut().for_each(|v| *v = 0.0);
        }
        out.extend(e);
    }
    Ok(ClipImageEmbeddings {
        embeddings: Tensor::new(vec![frame_indices.len(), d], out)?,
        source: format!("synthetic:{}", video.id),
    })
}

/// `E_text[k] = p_k` with the world's category names and split.
pub fn text_provider(world: &World) -> Result<TextEmbeddings> {
    TextEmbeddings::new(
        world.prototypes.clone(),
        world.categories.iter().map(|c| c.name.clone()).collect(),
        world.categories.iter().map(|c| c.novel).collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: WorldConfig,
    categories: Vec<Category>,
    prototypes: String,
    rotation: String,
    videos: Vec<VideoEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoEntry {
    id: usize,
    split: Split,
    seed: u64,
    num_frames: usize,
    frames: String,
    masks: String,
    instances: Vec<InstanceInfo>,
}

impl World {
    /// Writes `manifest.json` plus OVTF tensors into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("videos"))?;
        ovtf::save(&dir.join("prototypes.ovtf"), &self.prototypes, DType::F64)?;
        ovtf::save(&dir.join("rotation.ovtf"), &self.rotation, DType::F64)?;
        let mut entries = Vec::with_capacity(self.videos.len());
        for v in &self.videos {
            let frames = format!("videos/{:04}.frames.ovtf", v.id);
            let masks = format!("videos/{:04}.masks.ovtf", v.id);
            ovtf::save(&dir.join(&frames), &v.frames, DType::F64)?;
            ovtf::save(&dir.join(&masks), &v.masks, DType::F32)?;
            entries.push(VideoEntry {
                id: v.id,
                split: v.split,
                seed: v.seed,
                num_frames: v.num_frames(),
                frames,
                masks,
                instances: v.instances.clone(),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            config: self.config.clone(),
            categories: self.categories.clone(),
            prototypes: "prototypes.ovtf".into(),
            rotation: "rotation.ovtf".into(),
            videos: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::input(format!("unknown dataset format `{}`", m.format)));
        }
        let prototypes = ovtf::load(&dir.join(&m.prototypes))?;
        let rotation = ovtf::load(&dir.join(&m.rotation))?;
        let mut videos = Vec::with_capacity(m.videos.len());
        for e in m.videos {
            let frames = ovtf::load(&dir.join(&e.frames))?;
            let masks = ovtf::load(&dir.join(&e.masks))?;
            if frames.shape()[0] != e.num_frames || masks.shape()[0] != e.instances.len() {
                return Err(Error::input(format!("video {} does not match its manifest entry", e.id)));
            }
            videos.push(SyntheticVideo {
                id: e.id,
                split: e.split,
                seed: e.seed,
                frames,
                instances: e.instances,
                masks,
            });
        }
        Ok(World {
            config: m.config,
            categories: m.categories,
            prototypes,
            rotation,
            videos,
        })
    }
}
