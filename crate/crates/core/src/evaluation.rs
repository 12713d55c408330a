//! Video-level mask AP with a base/novel breakdown, plus identity metrics.
//!
//! Matching follows the COCO convention: at each IoU threshold in
//! `0.50:0.05:0.95`, predictions of a category are visited in descending
//! confidence and each takes the unmatched ground truth of the same video
//! with the highest spatio-temporal IoU at or above the threshold. AP is the
//! 101-point interpolated area under the precision-recall curve, averaged
//! over thresholds. IoU comparisons use integer pixel counts, so threshold
//! membership is exact.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic_world::{SyntheticVideo, World};
use crate::tracker::VideoResult;

/// IoU thresholds as percentages.
pub const IOU_THRESHOLDS: [u64; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];
pub const RECALL_POINTS: usize = 101;

/// Per-frame binary masks of one track over the whole video.
pub type TrackMasks = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredTrack {
    pub id: usize,
    pub category: usize,
    pub confidence: f64,
    pub masks: TrackMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTrack {
    pub id: usize,
    pub category: usize,
    pub masks: TrackMasks,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: usize,
    pub preds: Vec<PredTrack>,
    pub gts: Vec<GtTrack>,
}

impl VideoEval {
    /// Predictions from a result, ground truth from the video's visible masks
    /// pooled to the result's mask resolution.
    pub fn from_result(result: &VideoResult, video: &SyntheticVideo) -> Result<VideoEval> {
        if result.num_frames != video.num_frames() || result.height == 0 {
            return Err(Error::input(format!(
                "result for video {} does not match it ({} vs {} frames)",
                video.id,
                result.num_frames,
                video.num_frames()
            )));
        }
        let stride = video.height() / result.height;
        if stride == 0 || video.width() / stride != result.width {
            return Err(Error::input(format!(
                "mask size {}x{} incompatible with a {}x{} video",
                result.height,
                result.width,
                video.height(),
                video.width()
            )));
        }
        let frames: Vec<usize> = (0..video.num_frames()).collect();
        let gts = video
            .instances
            .iter()
            .enumerate()
            .map(|(i, info)| {
                let m = video.downsampled_masks(i, &frames, stride);
                let hw = result.height * result.width;
                GtTrack {
                    id: info.track_id,
                    category: info.class_id,
                    masks: m.data().chunks(hw).map(|c| c.iter().map(|v| *v > 0.5).collect()).collect(),
                }
            })
            .filter(|g| g.masks.iter().flatten().any(|b| *b))
            .collect();
        let preds = result
            .tracks
            .iter()
            .map(|t| {
                Ok(PredTrack {
                    id: t.id,
                    category: t.category,
                    confidence: t.confidence,
                    masks: result.dense_masks(t)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(VideoEval {
            video_id: video.id,
            preds,
            gts,
        })
    }
}

/// Intersection and union pixel counts summed over frames; frames missing
/// from the shorter track count as empty.
pub fn overlap(a: &[Vec<bool>], b: &[Vec<bool>]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for t in 0..a.len().max(b.len()) {
        let fa = a.get(t).map(Vec::as_slice).unwrap_or(&[]);
        let fb = b.get(t).map(Vec::as_slice).unwrap_or(&[]);
        for p in 0..fa.len().max(fb.len()) {
            let x = fa.get(p).copied().unwrap_or(false);
            let y = fb.get(p).copied().unwrap_or(false);
            inter += (x && y) as u64;
            union += (x || y) as u64;
        }
    }
    (inter, union)
}

/// `Σ_t |a_t ∩ b_t| / Σ_t |a_t ∪ b_t|`, 0 when both are empty.
pub fn st_iou(a: &[Vec<bool>], b: &[Vec<bool>]) -> f64 {
    let (i, u) = overlap(a, b);
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

fn meets(inter: u64, union: u64, percent: u64) -> bool {
    union > 0 && inter * 100 >= percent * union
}

/// 101-point interpolated AP of one ranked list of TP/FP flags.
fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    let mut recall_tp = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall_tp.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        // First ranked position whose recall tp/num_gt reaches r/100.
        while j < recall_tp.len() && recall_tp[j] * 100 < r * num_gt {
            j += 1;
        }
        if j < recall_tp.len() {
            sum += precision[j];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Ranked predictions of `category` as `(video, pred)` indices.
fn ranked(videos: &[VideoEval], category: usize) -> Vec<(usize, usize)> {
    let mut preds: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, ve)| {
            ve.preds
                .iter()
                .enumerate()
                .filter(move |(_, p)| p.category == category)
                .map(move |(i, _)| (v, i))
        })
        .collect();
    preds.sort_by(|a, b| {
        let ca = videos[a.0].preds[a.1].confidence;
        let cb = videos[b.0].preds[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });
    preds
}

/// AP of one category, averaged over the IoU thresholds; `None` without ground truth.
pub fn average_precision(videos: &[VideoEval], category: usize) -> Option<f64> {
    let num_gt: usize = videos
        .iter()
        .map(|v| v.gts.iter().filter(|g| g.category == category).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let order = ranked(videos, category);
    let overlaps: Vec<Vec<(usize, u64, u64)>> = order
        .iter()
        .map(|&(v, i)| {
            let p = &videos[v].preds[i];
            videos[v]
                .gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.category == category)
                .map(|(j, g)| {
                    let (inter, union) = overlap(&p.masks, &g.masks);
                    (j, inter, union)
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for &thr in &IOU_THRESHOLDS {
        let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
        let flags: Vec<bool> = order
            .iter()
            .zip(&overlaps)
            .map(|(&(v, _), cands)| {
                let best = cands
                    .iter()
                    .filter(|(j, i, u)| !taken.contains(&(v, *j)) && meets(*i, *u, thr))
                    // Highest IoU; on equal IoU the lowest gt index.
                    .fold(None::<&(usize, u64, u64)>, |best, c| match best {
                        Some(b) if (c.1 as u128) * (b.2 as u128) <= (b.1 as u128) * (c.2 as u128) => Some(b),
                        _ => Some(c),
                    });
                match best {
                    Some(&(j, _, _)) => {
                        taken.insert((v, j));
                        true
                    }
                    None => false,
                }
            })
            .collect();
        total += interpolated_ap(&flags, num_gt);
    }
    Some(total / IOU_THRESHOLDS.len() as f64)
}

/// `(id_switches, consistent gt tracks, gt tracks)` for one video. A gt track
/// is matched in a frame by the prediction with the highest IoU above 0.5.
pub fn id_counts(video: &VideoEval) -> (usize, usize, usize) {
    let mut switches = 0;
    let mut consistent = 0;
    for g in &video.gts {
        let mut last: Option<usize> = None;
        let mut ids = BTreeSet::new();
        for (t, gm) in g.masks.iter().enumerate() {
            if !gm.iter().any(|b| *b) {
                continue;
            }
            let mut best: Option<(usize, u64, u64)> = None;
            for p in &video.preds {
                let pm = p.masks.get(t).map(Vec::as_slice).unwrap_or(&[]);
                let (i, u) = overlap(&[pm.to_vec()], &[gm.clone()]);
                if 2 * i <= u {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bi, bu)) => (i as u128) * (bu as u128) > (bi as u128) * (u as u128),
                };
                if better {
                    best = Some((p.id, i, u));
                }
            }
            if let Some((id, _, _)) = best {
                if last.is_some_and(|l| l != id) {
                    switches += 1;
                }
                last = Some(id);
                ids.insert(id);
            }
        }
        consistent += (ids.len() == 1) as usize;
    }
    (switches, consistent, video.gts.len())
}

/// Total identity switches and the fraction of gt tracks followed by one id.
pub fn id_metrics(videos: &[VideoEval]) -> (usize, f64) {
    let (mut s, mut c, mut n) = (0, 0, 0);
    for v in videos {
        let (vs, vc, vn) = id_counts(v);
        s += vs;
        c += vc;
        n += vn;
    }
    (s, if n == 0 { 0.0 } else { c as f64 / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub id: usize,
    pub name: String,
    pub novel: bool,
    pub num_gt: usize,
    pub num_pred: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAP_b")]
    pub map_base: Option<f64>,
    #[serde(rename = "mAP_n")]
    pub map_novel: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    pub id_switches: usize,
    pub id_consistency: f64,
    pub config: serde_json::Value,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Builds the report over `videos`; categories are `(name, novel)` by id.
pub fn evaluate(videos: &[VideoEval], categories: &[(String, bool)], config: serde_json::Value) -> EvalReport {
    let per_category: Vec<CategoryAp> = categories
        .iter()
        .enumerate()
        .map(|(k, (name, novel))| CategoryAp {
            id: k,
            name: name.clone(),
            novel: *novel,
            num_gt: videos.iter().map(|v| v.gts.iter().filter(|g| g.category == k).count()).sum(),
            num_pred: videos.iter().map(|v| v.preds.iter().filter(|p| p.category == k).count()).sum(),
            ap: average_precision(videos, k),
        })
        .collect();
    let pick = |f: &dyn Fn(&CategoryAp) -> bool| -> Vec<f64> {
        per_category.iter().filter(|c| f(c)).filter_map(|c| c.ap).collect()
    };
    let (id_switches, id_consistency) = id_metrics(videos);
    EvalReport {
        map: mean(&pick(&|_| true)).unwrap_or(0.0),
        map_base: mean(&pick(&|c| !c.novel)),
        map_novel: mean(&pick(&|c| c.novel)),
        per_category,
        id_switches,
        id_consistency,
        config,
    }
}

/// Pairs results with the world's videos and evaluates them.
pub fn evaluate_results(world: &World, results: &[VideoResult], config: serde_json::Value) -> Result<EvalReport> {
    let videos = results
        .iter()
        .map(|r| {
            let v = world
                .video(r.video_id)
                .ok_or_else(|| Error::input(format!("no video {} in dataset", r.video_id)))?;
            VideoEval::from_result(r, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let cats: Vec<(String, bool)> = world.categories.iter().map(|c| (c.name.clone(), c.novel)).collect();
    Ok(evaluate(&videos, &cats, config))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-category APs, one row each; empty `ap` when a category has no ground truth.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category_id,name,novel,num_gt,num_pred,ap\n");
        for c in &self.per_category {
            let ap = c.ap.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", c.id, c.name, c.novel, c.num_gt, c.num_pred, ap);
        }
        s
    }
}

pub mod fixtures {
    //! Hand-derived golden values for the evaluator, stored as JSON with
    //! their derivations.

    use super::*;

    pub const GOLDEN: &str = include_str!("../fixtures/evaluation.json");

    #[derive(Debug, Deserialize)]
    struct FixtureSet {
        st_iou: Vec<StIouCase>,
        ap: Vec<ApCase>,
        id_metrics: Vec<IdCase>,
    }

    #[derive(Debug, Deserialize)]
    struct StIouCase {
        name: String,
        #[allow(dead_code)]
        derivation: String,
        pred: Vec<String>,
        gt: Vec<String>,
        expected: String,
    }

    #[derive(Debug, Deserialize)]
    struct TrackSpec {
        id: usize,
        category: usize,
        #[serde(default)]
        confidence: f64,
        masks: Vec<String>,
    }

    #[derive(Debug, Deserialize)]
    struct VideoSpec {
        #[serde(default)]
        preds: Vec<TrackSpec>,
        #[serde(default)]
        gts: Vec<TrackSpec>,
    }

    #[derive(Debug, Deserialize)]
    struct ApCase {
        name: String,
        #[allow(dead_code)]
        derivation: String,
        category: usize,
        videos: Vec<VideoSpec>,
        expected: String,
    }

    #[derive(Debug, Deserialize)]
    struct IdCase {
        name: String,
        #[allow(dead_code)]
        derivation: String,
        videos: Vec<VideoSpec>,
        expected_switches: usize,
        expected_consistency: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize)]
    pub struct Outcome {
        pub kind: &'static str,
        pub name: String,
        pub expected: f64,
        pub actual: f64,
        pub pass: bool,
    }

    fn masks(frames: &[String]) -> Result<TrackMasks> {
        frames
            .iter()
            .map(|f| {
                f.chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(Error::Fixture(format!("bad mask character `{c}`"))),
                    })
                    .collect()
            })
            .collect()
    }

    /// `"a/b"` or a plain number.
    fn fraction(s: &str) -> Result<f64> {
        let bad = || Error::Fixture(format!("bad fraction `{s}`"));
        match s.split_once('/') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                Ok(a as f64 / b as f64)
            }
            None => s.trim().parse().map_err(|_| bad()),
        }
    }

    fn videos(specs: &[VideoSpec]) -> Result<Vec<VideoEval>> {
        specs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                Ok(VideoEval {
                    video_id: i,
                    preds: v
                        .preds
                        .iter()
                        .map(|p| {
                            Ok(PredTrack {
                                id: p.id,
                                category: p.category,
                                confidence: p.confidence,
                                masks: masks(&p.masks)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    gts: v
                        .gts
                        .iter()
                        .map(|g| Ok(GtTrack { id: g.id, category: g.category, masks: masks(&g.masks)? }))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Relative slack for values that are sums of rounded rationals.
    pub const TOLERANCE: f64 = 1e-12;

    fn outcome(kind: &'static str, name: &str, expected: f64, actual: f64) -> Outcome {
        Outcome {
            kind,
            name: name.to_string(),
            expected,
            actual,
            pass: (expected - actual).abs() <= TOLERANCE * expected.abs().max(1.0),
        }
    }

    /// Evaluates every golden case in `json`.
    pub fn run(json: &str) -> Result<Vec<Outcome>> {
        let set: FixtureSet = serde_json::from_str(json).map_err(|e| Error::Fixture(e.to_string()))?;
        let mut out = Vec::new();
        for c in &set.st_iou {
            let v = st_iou(&masks(&c.pred)?, &masks(&c.gt)?);
            out.push(outcome("st_iou", &c.name, fraction(&c.expected)?, v));
        }
        for c in &set.ap {
            let v = average_precision(&videos(&c.videos)?, c.category).unwrap_or(f64::NAN);
            out.push(outcome("ap", &c.name, fraction(&c.expected)?, v));
        }
        for c in &set.id_metrics {
            let (s, cons) = id_metrics(&videos(&c.videos)?);
            out.push(outcome("id_switches", &c.name, c.expected_switches as f64, s as f64));
            out.push(outcome("id_consistency", &c.name, fraction(&c.expected_consistency)?, cons));
        }
        Ok(out)
    }
}
