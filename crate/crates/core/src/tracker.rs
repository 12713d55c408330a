//! Online, offline and semi-online inference over a whole video.
//!
//! All three schemes share one code path: the video is cut into
//! non-overlapping clips (length 1, the whole video, or `clip_len`), every
//! clip runs through the model, and identities are carried from clip to clip
//! by Hungarian matching on the cosine similarity of instance queries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::embedding_alignment::ClipImageEmbeddings;
use crate::error::{Error, Result};
use crate::heads::{argmax, TextEmbeddings, MASK_THRESHOLD};
use crate::model::{predict, ClipPrediction, ModelConfig};
use crate::params::ParamStore;
use crate::query_generator::VideoClip;
use crate::tensor::{Tensor, L2_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Online,
    Offline,
    SemiOnline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub scheme: Scheme,
    /// Clip length for the semi-online scheme.
    pub clip_len: usize,
    /// Queries with `S_ins` below this are dropped before association.
    pub keep_threshold: f64,
    /// Minimum cosine similarity for a match to extend a track.
    pub new_threshold: f64,
    /// Clips an unmatched track stays active before it closes.
    pub patience: usize,
    /// Weight of the old track query when updating it; 0 overwrites.
    pub query_momentum: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            scheme: Scheme::SemiOnline,
            clip_len: 5,
            keep_threshold: 0.3,
            new_threshold: 0.2,
            patience: 1,
            query_momentum: 0.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scheme == Scheme::SemiOnline && self.clip_len == 0 {
            return Err(Error::config("clip_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.query_momentum) {
            return Err(Error::config(format!(
                "query_momentum must be in [0, 1), got {}",
                self.query_momentum
            )));
        }
        if !self.keep_threshold.is_finite() || !self.new_threshold.is_finite() {
            return Err(Error::config("thresholds must be finite"));
        }
        Ok(())
    }

    /// Clip length actually used on a video of `len` frames.
    pub fn effective_clip_len(&self, len: usize) -> usize {
        match self.scheme {
            Scheme::Online => 1,
            Scheme::Offline => len,
            Scheme::SemiOnline => self.clip_len,
        }
    }
}

/// Non-overlapping clips covering `0..len`; the last one may be shorter.
pub fn clip_spans(len: usize, clip_len: usize) -> Vec<Vec<usize>> {
    (0..len)
        .step_by(clip_len.max(1))
        .map(|s| (s..(s + clip_len).min(len)).collect())
        .collect()
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::input(format!(
            "similarity needs [N, C] inputs of equal width, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let norms = |t: &Tensor| -> Vec<f64> {
        (0..t.shape()[0])
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let mut out = Tensor::zeros(&[a.shape()[0], b.shape()[0]]);
    for i in 0..a.shape()[0] {
        for j in 0..b.shape()[0] {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.set(&[i, j], dot / (na[i] * nb[j]).max(L2_EPS));
        }
    }
    Ok(out)
}

/// What one clip contributed to a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub clip_index: usize,
    pub query_index: usize,
    pub frame_indices: Vec<usize>,
    pub instance_score: f64,
    pub class_scores: Vec<f64>,
    /// Binarized masks, one per frame of the clip.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: usize,
    /// Latest `q_clip` row for this identity.
    pub query: Vec<f64>,
    pub records: Vec<TrackRecord>,
    pub active: bool,
    missed: usize,
}

impl Track {
    /// Confidence-weighted class vote over clips: each clip votes for its
    /// arg-max class with weight `S_ins * max S_cls`. Confidence is the mean
    /// over clips of `S_ins * S_cls[category]`.
    pub fn category(&self) -> (usize, f64) {
        let k = self.records[0].class_scores.len();
        let mut votes = vec![0.0; k];
        for r in &self.records {
            let (c, s) = argmax(&r.class_scores);
            votes[c] += r.instance_score * s;
        }
        let (cat, _) = argmax(&votes);
        let conf = self
            .records
            .iter()
            .map(|r| r.instance_score * r.class_scores[cat])
            .sum::<f64>()
            / self.records.len() as f64;
        (cat, conf)
    }
}

/// Clip-to-clip identity association.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: InferenceConfig,
    tracks: Vec<Track>,
}

fn record(pred: &ClipPrediction, n: usize) -> TrackRecord {
    let s = pred.masks.shape();
    let (t, hw) = (s[1], s[2] * s[3]);
    let base = n * t * hw;
    TrackRecord {
        clip_index: pred.clip_index,
        query_index: n,
        frame_indices: pred.frame_indices.clone(),
        instance_score: pred.instance.data()[n],
        class_scores: pred.classes.row(n).to_vec(),
        masks: (0..t)
            .map(|f| {
                pred.masks.data()[base + f * hw..base + (f + 1) * hw]
                    .iter()
                    .map(|v| *v >= MASK_THRESHOLD)
                    .collect()
            })
            .collect(),
    }
}

impl Tracker {
    pub fn new(cfg: InferenceConfig) -> Self {
        Tracker {
            cfg,
            tracks: Vec::new(),
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }

    /// Indices of the queries that pass the objectness filter.
    pub fn kept(&self, pred: &ClipPrediction) -> Vec<usize> {
        (0..pred.instance.numel())
            .filter(|&n| pred.instance.data()[n] >= self.cfg.keep_threshold)
            .collect()
    }

    /// Folds one clip into the tracks; returns `(query, track_id)` for every kept query.
    pub fn associate(&mut self, pred: &ClipPrediction) -> Result<Vec<(usize, usize)>> {
        let kept = self.kept(pred);
        let active: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].active).collect();
        let mut owner: Vec<Option<usize>> = vec![None; kept.len()];
        if !kept.is_empty() && !active.is_empty() {
            let prev = Tensor::from_rows(&active.iter().map(|&i| self.tracks[i].query.clone()).collect::<Vec<_>>())?;
            let curr = pred.queries.select_rows(&kept);
            let sim = similarity(&prev, &curr)?;
            let cost = CostMatrix::new(sim.map(|s| 1.0 - s))?;
            for (a, j) in hungarian(&cost).pairs {
                if sim.at(&[a, j]) >= self.cfg.new_threshold {
                    owner[j] = Some(active[a]);
                }
            }
        }
        let matched: BTreeSet<usize> = owner.iter().flatten().copied().collect();
        for &i in &active {
            if !matched.contains(&i) {
                let t = &mut self.tracks[i];
                t.missed += 1;
                if t.missed > self.cfg.patience {
                    t.active = false;
                }
            }
        }
        let mut out = Vec::with_capacity(kept.len());
        for (j, &n) in kept.iter().enumerate() {
            let q = pred.queries.row(n);
            let idx = match owner[j] {
                Some(i) => {
                    let t = &mut self.tracks[i];
                    let m = self.cfg.query_momentum;
                    t.query.iter_mut().zip(q).for_each(|(a, b)| *a = m * *a + (1.0 - m) * b);
                    t.missed = 0;
                    i
                }
                None => {
                    self.tracks.push(Track {
                        track_id: self.tracks.len(),
                        query: q.to_vec(),
                        records: Vec::new(),
                        active: true,
                        missed: 0,
                    });
                    self.tracks.len() - 1
                }
            };
            self.tracks[idx].records.push(record(pred, n));
            out.push((n, self.tracks[idx].track_id));
        }
        Ok(out)
    }
}

/// Run-length encoding of a row-major binary mask: alternating run lengths
/// starting with zeros (the first run may be empty).
pub fn rle_encode(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in mask {
        if b != current {
            runs.push(len);
            current = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<bool>> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != len as u64 {
        return Err(Error::input(format!("RLE covers {total} pixels, expected {len}")));
    }
    let mut out = Vec::with_capacity(len);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMask {
    pub frame_idx: usize,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackResult {
    pub id: usize,
    pub category: usize,
    pub category_name: String,
    pub confidence: f64,
    pub frames: Vec<FrameMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoResult {
    pub video_id: usize,
    pub scheme: Scheme,
    pub clip_len: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: Vec<TrackResult>,
}

impl VideoResult {
    pub fn from_tracks(
        video_id: usize,
        scheme: Scheme,
        clip_len: usize,
        num_frames: usize,
        (height, width): (usize, usize),
        tracks: &[Track],
        text: &TextEmbeddings,
    ) -> VideoResult {
        let tracks = tracks
            .iter()
            .map(|t| {
                let (category, confidence) = t.category();
                let mut frames: Vec<FrameMask> = t
                    .records
                    .iter()
                    .flat_map(|r| {
                        r.frame_indices.iter().zip(&r.masks).map(|(&f, m)| FrameMask {
                            frame_idx: f,
                            rle: rle_encode(m),
                        })
                    })
                    .collect();
                frames.sort_by_key(|f| f.frame_idx);
                TrackResult {
                    id: t.track_id,
                    category,
                    category_name: text.category_names[category].clone(),
                    confidence,
                    frames,
                }
            })
            .collect();
        VideoResult {
            video_id,
            scheme,
            clip_len,
            num_frames,
            height,
            width,
            tracks,
        }
    }

    /// Structural checks on a (possibly deserialized) result.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut ids = BTreeSet::new();
        let hw = self.height * self.width;
        for t in &self.tracks {
            if !ids.insert(t.id) {
                return Err(Error::input(format!("duplicate track id {}", t.id)));
            }
            if t.category >= num_classes {
                return Err(Error::input(format!("track {}: category {} out of range", t.id, t.category)));
            }
            if !t.confidence.is_finite() {
                return Err(Error::input(format!("track {}: non-finite confidence", t.id)));
            }
            let mut seen = BTreeSet::new();
            for f in &t.frames {
                if f.frame_idx >= self.num_frames || !seen.insert(f.frame_idx) {
                    return Err(Error::input(format!(
                        "track {}: invalid or repeated frame {}",
                        t.id, f.frame_idx
                    )));
                }
                rle_decode(&f.rle, hw)?;
            }
        }
        Ok(())
    }

    /// Dense per-frame masks of one track; frames it does not cover are empty.
    pub fn dense_masks(&self, track: &TrackResult) -> Result<Vec<Vec<bool>>> {
        let hw = self.height * self.width;
        let mut out = vec![vec![false; hw]; self.num_frames];
        for f in &track.frames {
            out[f.frame_idx] = rle_decode(&f.rle, hw)?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str, num_classes: usize) -> Result<VideoResult> {
        let r: VideoResult = serde_json::from_str(s)?;
        r.validate(num_classes)?;
        Ok(r)
    }
}

/// Runs a scheme over a video whose clips are produced by `source`, which
/// maps frame indices and a clip index to model inputs.
pub fn run_inference<F>(
    video_id: usize,
    num_frames: usize,
    source: F,
    store: &ParamStore,
    model: &ModelConfig,
    cfg: &InferenceConfig,
    text: &TextEmbeddings,
) -> Result<VideoResult>
where
    F: Fn(&[usize], usize) -> Result<(VideoClip, ClipImageEmbeddings)>,
{
    cfg.validate()?;
    if num_frames == 0 {
        return Err(Error::input(format!("video {video_id} has no frames")));
    }
    let clip_len = cfg.effective_clip_len(num_frames);
    let mut tracker = Tracker::new(cfg.clone());
    let mut mask_hw = (0, 0);
    for (ci, frames) in clip_spans(num_frames, clip_len).iter().enumerate() {
        let (clip, image) = source(frames, ci)?;
        let pred = predict(store, model, &clip, &image, text)?;
        mask_hw = (pred.masks.shape()[2], pred.masks.shape()[3]);
        tracker.associate(&pred)?;
    }
    Ok(VideoResult::from_tracks(
        video_id,
        cfg.scheme,
        clip_len,
        num_frames,
        mask_hw,
        tracker.tracks(),
        text,
    ))
}
