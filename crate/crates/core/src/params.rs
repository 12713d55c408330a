//! Named parameter tensors, their graph bindings, and on-disk checkpoints.
//!
//! A checkpoint is a directory holding one OVTF file per tensor plus
//! `manifest.json` mapping dotted names (`decoder.layer0.cross_attn.wq`) to
//! file names. Names are kept sorted so checkpoints are byte-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ovtf::{self, DType};
use crate::tensor::{Graph, Tensor, Var};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight and zero bias under `prefix.w` / `prefix.b`.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        self.insert(format!("{prefix}.w"), xavier(fan_in, fan_out, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.ovtf");
            ovtf::save(&dir.join(&file), t, DType::F64)?;
            entries.insert(
                name.clone(),
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        let manifest = Manifest {
            format: "ovtf-checkpoint-v1".into(),
            tensors: entries,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut store = ParamStore::new();
        for (name, entry) in manifest.tensors {
            let t = ovtf::load(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: manifest shape {:?} but file holds {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

/// Parameters registered on a graph for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every tensor of `store`; tracked leaves when `trainable`.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Overrides a single binding, e.g. to route a probe tensor through a model.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

/// `x W + b` with `W: [in, out]`, `b: [out]` bound as `prefix.w` / `prefix.b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

pub fn activate(g: &mut Graph, act: Activation, x: Var) -> Result<Var> {
    Ok(match act {
        Activation::Relu => g.relu(x)?,
        Activation::Gelu => g.gelu(x)?,
    })
}
