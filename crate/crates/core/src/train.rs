//! Adam training on sampled clips of the synthetic training split.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{training_loss, PredictionVars};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::heads::TextEmbeddings;
use crate::model::forward;
use crate::params::{Bound, ParamStore};
use crate::synthetic_world::{clip_image_provider, derive_seed, text_provider, Split, World};
use crate::tensor::{Graph, Tensor};

const SAMPLER_STREAM: u64 = 0x5A3B_1E00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &crate::config::TrainConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for a stored parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + cfg.weight_decay * *w);
            }
        }
    }
}

/// The vocabulary seen in training: base categories only.
pub fn training_vocabulary(world: &World) -> Result<TextEmbeddings> {
    let base: Vec<usize> = world.categories.iter().filter(|c| !c.novel).map(|c| c.id).collect();
    Ok(text_provider(world)?.subset(&base))
}

fn numeric(step: usize) -> impl Fn(Error) -> Error {
    move |e| if e.is_numeric() { Error::Divergence { step } } else { e }
}

/// Trains from `init` and returns the final parameters and the per-step log.
pub fn train_from(cfg: &ExperimentConfig, world: &World, init: ParamStore) -> Result<(ParamStore, Vec<StepLog>)> {
    cfg.validate()?;
    let videos: Vec<_> = world.split(Split::Train).collect();
    if videos.is_empty() && cfg.train.steps > 0 {
        return Err(Error::input("dataset has no training videos"));
    }
    let text = training_vocabulary(world)?;
    let stride = cfg.model.stride();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SAMPLER_STREAM));
    let mut store = init;
    let mut adam = Adam::default();
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let lr = cfg.train.learning_rate_at(step);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &store, true);
        let mut total = None;
        for _ in 0..cfg.train.batch {
            let video = videos[rng.random_range(0..videos.len())];
            let mut frames = sample(&mut rng, video.num_frames(), cfg.train.clip_frames).into_vec();
            frames.sort_unstable();
            let clip = video.clip(&frames, 0)?;
            let image = clip_image_provider(world, video, &frames)?;
            let gt = video.ground_truth(&frames, stride);
            let out = forward(&mut g, &p, &cfg.model, &clip, &image, &text).map_err(numeric(step))?;
            let vars = PredictionVars {
                instance: out.instance,
                classes: out.classes,
                masks: out.masks,
            };
            let (loss, _) = training_loss(&mut g, &vars, &gt, &cfg.train.loss, cfg.loss_options()).map_err(numeric(step))?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss).map_err(|e| numeric(step)(e.into()))?,
            });
        }
        let total = total.expect("batch is positive");
        let mean = g.scale(total, 1.0 / cfg.train.batch as f64).map_err(|e| numeric(step)(e.into()))?;
        let loss = g.value(mean).item();
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        g.backward(mean).map_err(|e| numeric(step)(e.into()))?;
        let mut grads = BTreeMap::new();
        for (name, var) in p.iter() {
            if let Some(gr) = g.grad(*var) {
                if !gr.is_finite() {
                    return Err(Error::Divergence { step });
                }
                grads.insert(name.clone(), gr);
            }
        }
        adam.step(&mut store, &grads, lr, &cfg.train);
        log.push(StepLog {
            step,
            loss,
            learning_rate: lr,
        });
    }
    Ok((store, log))
}

/// Initializes from `train.seed` and trains.
pub fn train(cfg: &ExperimentConfig, world: &World) -> Result<(ParamStore, Vec<StepLog>)> {
    let init = cfg.model.init(cfg.train.seed)?;
    train_from(cfg, world, init)
}
