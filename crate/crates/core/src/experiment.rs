//! End-to-end drivers behind the command-line subcommands. Every driver is a
//! pure function of the configuration and the files it reads; outputs are
//! written with stable formatting so reruns reproduce them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{brute_force_min_cost, hungarian, pairwise_cost, CostMatrix, LossWeights, PredictionValues};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_results, fixtures, EvalReport};
use crate::heads::{argmax, TextEmbeddings};
use crate::model::{predict, ModelConfig};
use crate::params::ParamStore;
use crate::synthetic_world::{clip_image_provider, generate, text_provider, Split, SyntheticVideo, World};
use crate::tensor::{grad_check, Graph, Tensor, DEFAULT_EPS};
use crate::tracker::{clip_spans, run_inference, Scheme, VideoResult};
use crate::train::{train, StepLog};

pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RESULTS_DIR: &str = "results";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const REPORT_JSON: &str = "eval_report.json";
pub const REPORT_CSV: &str = "eval_report.csv";

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

/// Generates the dataset into `out/dataset`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<World> {
    cfg.validate()?;
    let world = generate(&cfg.world)?;
    world.save(&out.join(DATASET_DIR))?;
    write_config(cfg, out)?;
    Ok(world)
}

/// The dataset in `out/dataset` if it was generated from the same world
/// config, otherwise a fresh one (also saved there).
pub fn dataset(cfg: &ExperimentConfig, out: &Path) -> Result<World> {
    let dir = out.join(DATASET_DIR);
    if dir.join("manifest.json").exists() {
        let w = World::load(&dir)?;
        if w.config == cfg.world {
            return Ok(w);
        }
    }
    let w = generate(&cfg.world)?;
    w.save(&dir)?;
    Ok(w)
}

fn write_train_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(e.to_string()))?;
    for s in log {
        w.serialize(s).map_err(|e| Error::input(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on the dataset and writes the checkpoint, the loss log and the config echo.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(ParamStore, Vec<StepLog>)> {
    cfg.validate()?;
    let world = dataset(cfg, out)?;
    let (store, log) = train(cfg, &world)?;
    store.save(&out.join(CHECKPOINT_DIR))?;
    write_train_log(&log, &out.join(TRAIN_LOG))?;
    write_config(cfg, out)?;
    Ok((store, log))
}

/// Loads a checkpoint and checks it against the model config.
pub fn load_checkpoint(model: &ModelConfig, dir: &Path) -> Result<ParamStore> {
    let store = ParamStore::load(dir)?;
    model.init(0)?.check_compatible(&store)?;
    Ok(store)
}

/// Runs the configured scheme over one video.
pub fn infer_video(
    world: &World,
    video: &SyntheticVideo,
    store: &ParamStore,
    cfg: &ExperimentConfig,
    text: &TextEmbeddings,
) -> Result<VideoResult> {
    run_inference(
        video.id,
        video.num_frames(),
        |frames, ci| Ok((video.clip(frames, ci)?, clip_image_provider(world, video, frames)?)),
        store,
        &cfg.model,
        &cfg.infer,
        text,
    )
}

/// Inference over `videos` (all eval videos when `None`), in video-id order.
pub fn infer_world(
    world: &World,
    store: &ParamStore,
    cfg: &ExperimentConfig,
    videos: Option<&[usize]>,
) -> Result<Vec<VideoResult>> {
    cfg.validate()?;
    let text = text_provider(world)?;
    let selected: Vec<&SyntheticVideo> = match videos {
        None => world.split(Split::Eval).collect(),
        Some(ids) => ids
            .iter()
            .map(|&id| world.video(id).ok_or_else(|| Error::input(format!("no video {id}"))))
            .collect::<Result<_>>()?,
    };
    selected
        .par_iter()
        .map(|v| infer_video(world, v, store, cfg, &text))
        .collect()
}

pub fn result_path(out: &Path, video_id: usize) -> PathBuf {
    out.join(RESULTS_DIR).join(format!("video_{video_id:04}.json"))
}

/// Runs inference with `out/checkpoint` and writes one JSON per video.
pub fn run_infer(cfg: &ExperimentConfig, out: &Path, videos: Option<&[usize]>) -> Result<Vec<VideoResult>> {
    cfg.validate()?;
    let world = dataset(cfg, out)?;
    let store = load_checkpoint(&cfg.model, &out.join(CHECKPOINT_DIR))?;
    let results = infer_world(&world, &store, cfg, videos)?;
    let dir = out.join(RESULTS_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    for r in &results {
        fs::write(result_path(out, r.video_id), r.to_json()?)?;
    }
    Ok(results)
}

/// Reads every result JSON in `dir`, ordered by file name.
pub fn read_results(dir: &Path, num_classes: usize) -> Result<Vec<VideoResult>> {
    if !dir.is_dir() {
        return Err(Error::input(format!("no results directory at {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::input(format!("no results in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| VideoResult::from_json(&fs::read_to_string(p)?, num_classes))
        .collect()
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::write(out.join(REPORT_JSON), report.to_json()?)?;
    fs::write(out.join(REPORT_CSV), report.to_csv())?;
    Ok(())
}

/// Evaluates `out/results` and writes the report as JSON and CSV.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let world = dataset(cfg, out)?;
    let results = read_results(&out.join(RESULTS_DIR), cfg.world.num_classes)?;
    let report = evaluate_results(&world, &results, cfg.to_value())?;
    write_report(&report, out)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub base_correct: usize,
    pub base_total: usize,
    pub novel_correct: usize,
    pub novel_total: usize,
}

impl Accuracy {
    pub fn base(&self) -> f64 {
        self.base_correct as f64 / self.base_total.max(1) as f64
    }

    pub fn novel(&self) -> f64 {
        self.novel_correct as f64 / self.novel_total.max(1) as f64
    }
}

/// Classification accuracy on the eval split: clips are cut as the inference
/// scheme would, queries are matched to ground truth with the class term
/// switched off, and a match counts as correct when the arg-max of `S_cls`
/// over the full vocabulary is the ground-truth category.
pub fn classification_accuracy(world: &World, store: &ParamStore, cfg: &ExperimentConfig) -> Result<Accuracy> {
    let text = text_provider(world)?;
    let stride = cfg.model.stride();
    let weights = LossWeights { cls: 0.0, ..cfg.train.loss };
    let videos: Vec<&SyntheticVideo> = world.split(Split::Eval).collect();
    let per_video = videos
        .par_iter()
        .map(|v| {
            let mut acc = Accuracy::default();
            let clip_len = cfg.infer.effective_clip_len(v.num_frames());
            for (ci, frames) in clip_spans(v.num_frames(), clip_len).iter().enumerate() {
                let gt = v.ground_truth(frames, stride);
                let pred = predict(store, &cfg.model, &v.clip(frames, ci)?, &clip_image_provider(world, v, frames)?, &text)?;
                let values = PredictionValues {
                    instance: pred.instance.clone(),
                    classes: pred.classes.clone(),
                    masks: pred.masks.clone(),
                };
                let assignment = hungarian(&pairwise_cost(&values, &gt, &weights, cfg.loss_options())?);
                for &(p, j) in &assignment.pairs {
                    let class = gt.instances[j].class_id;
                    let hit = argmax(pred.classes.row(p)).0 == class;
                    if world.is_novel(class) {
                        acc.novel_total += 1;
                        acc.novel_correct += hit as usize;
                    } else {
                        acc.base_total += 1;
                        acc.base_correct += hit as usize;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.into_iter().fold(Accuracy::default(), |a, b| Accuracy {
        base_correct: a.base_correct + b.base_correct,
        base_total: a.base_total + b.base_total,
        novel_correct: a.novel_correct + b.novel_correct,
        novel_total: a.novel_total + b.novel_total,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    UeaEnabled,
    ClipLen,
    Scheme,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uea_enabled" => Ok(SweepAxis::UeaEnabled),
            "clip_len" => Ok(SweepAxis::ClipLen),
            "scheme" => Ok(SweepAxis::Scheme),
            _ => Err(Error::config(format!(
                "unknown sweep axis `{s}` (expected uea_enabled, clip_len or scheme)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::UeaEnabled => &["false", "true"],
            SweepAxis::ClipLen => &["1", "2", "5", "10"],
            SweepAxis::Scheme => &["online", "semi_online", "offline"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    fn key(self) -> &'static str {
        match self {
            SweepAxis::UeaEnabled => "uea_enabled",
            SweepAxis::ClipLen => "clip_len",
            SweepAxis::Scheme => "scheme",
        }
    }

    /// The config for one sweep value.
    fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let bad = || Error::config(format!("invalid value `{value}` for sweep axis {}", self.key()));
        match self {
            SweepAxis::UeaEnabled => c.model.uea_enabled = value.parse().map_err(|_| bad())?,
            SweepAxis::ClipLen => {
                c.infer.scheme = Scheme::SemiOnline;
                c.infer.clip_len = value.parse().map_err(|_| bad())?;
            }
            SweepAxis::Scheme => {
                c.infer.scheme = serde_json::from_value(serde_json::Value::String(value.into())).map_err(|_| bad())?
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAP_b")]
    pub map_base: Option<f64>,
    #[serde(rename = "mAP_n")]
    pub map_novel: Option<f64>,
    pub id_switches: usize,
    pub id_consistency: f64,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub final_loss: Option<f64>,
}

/// Trains (once per value on the model axis, once overall otherwise),
/// infers and evaluates every value; writes `sweep_<axis>.csv` and `.png`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let configs = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let world = dataset(cfg, out)?;
    let shared = if axis == SweepAxis::UeaEnabled { None } else { Some(train(cfg, &world)?) };
    let mut rows = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        let (store, log) = match &shared {
            Some(s) => s.clone(),
            None => train(c, &world)?,
        };
        let results = infer_world(&world, &store, c, None)?;
        let report = evaluate_results(&world, &results, c.to_value())?;
        let acc = classification_accuracy(&world, &store, c)?;
        rows.push(SweepRow {
            axis: axis.key().into(),
            value: value.clone(),
            map: report.map,
            map_base: report.map_base,
            map_novel: report.map_novel,
            id_switches: report.id_switches,
            id_consistency: report.id_consistency,
            base_accuracy: acc.base(),
            novel_accuracy: acc.novel(),
            final_loss: log.last().map(|s| s.loss),
        });
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(format!("sweep_{}.csv", axis.key()))).map_err(|e| Error::input(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::input(e.to_string()))?;
    }
    w.flush()?;
    let series = vec![
        ("mAP".to_string(), rows.iter().map(|r| r.map).collect()),
        ("mAP_n".to_string(), rows.iter().map(|r| r.map_novel.unwrap_or(0.0)).collect()),
        ("id_consistency".to_string(), rows.iter().map(|r| r.id_consistency).collect()),
        ("novel_accuracy".to_string(), rows.iter().map(|r| r.novel_accuracy).collect()),
    ];
    crate::plot::save_line_plot(&series, &out.join(format!("sweep_{}.png", axis.key())))?;
    write_config(cfg, out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Hungarian-versus-enumeration, gradient checks and the evaluator golden
/// fixtures. Fails with [`Error::Fixture`] if any check does not hold.
pub fn selftest() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let (p, g) = (rng.random_range(0..=5), rng.random_range(0..=5));
        let data = (0..p * g).map(|_| rng.random_range(0.0..10.0)).collect();
        let c = CostMatrix::new(Tensor::new(vec![p, g], data)?)?;
        worst = worst.max((hungarian(&c).total_cost - brute_force_min_cost(&c)).abs());
    }
    checks.push(Check {
        name: "hungarian_vs_enumeration".into(),
        pass: worst == 0.0,
        detail: format!("max |difference| over 300 matrices = {worst:e}"),
    });

    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let err = grad_check(
        |g: &mut Graph, x| {
            let a = g.layer_norm(x)?;
            let b = g.gelu(a)?;
            let c = g.softmax(b)?;
            let d = g.l2_normalize(x)?;
            let e = g.mul(c, d)?;
            let f = g.sigmoid(e)?;
            g.sum(f)
        },
        &x,
        DEFAULT_EPS,
    )
    .map_err(|e| Error::Fixture(e.to_string()))?;
    checks.push(Check {
        name: "grad_check_composite".into(),
        pass: err < 1e-4,
        detail: format!("max relative error {err:e}"),
    });

    let outcomes = fixtures::run(fixtures::GOLDEN)?;
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}:{} expected {} got {}", o.kind, o.name, o.expected, o.actual))
        .collect();
    checks.push(Check {
        name: "evaluator_fixtures".into(),
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} golden values reproduced", outcomes.len())
        } else {
            failed.join("; ")
        },
    });

    if let Some(bad) = checks.iter().find(|c| !c.pass) {
        return Err(Error::Fixture(format!("{}: {}", bad.name, bad.detail)));
    }
    Ok(checks)
}
