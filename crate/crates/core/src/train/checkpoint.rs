use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use super::optim::AdamState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamTree, Section};
use crate::rng::StreamState;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "s3net-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ParamTree<S>,
    pub adam: AdamState<S>,
    pub rng: BTreeMap<String, StreamState>,
    /// Steps completed in `stage`.
    pub step: u64,
    /// Steps completed over all stages so far.
    pub global_step: u64,
    pub config_digest: String,
    pub stage: Stage,
}

/// Which array of the blob a manifest record describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Part {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    name: String,
    part: Part,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into `tensors.bin`.
    offset: usize,
    section: Section,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    stage: Stage,
    step: u64,
    global_step: u64,
    config_digest: String,
    adam_t: u64,
    rng: BTreeMap<String, StreamState>,
    tensors: Vec<Record>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Writes `dir/manifest.json` and `dir/tensors.bin`. The blob holds the
    /// parameters, then first moments, then second moments, each in name
    /// order, as little-endian values of the manifest dtype.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for part in [Part::Param, Part::AdamM, Part::AdamV] {
            for (name, e) in self.params.iter() {
                let data: &[S] = match part {
                    Part::Param => e.tensor.data(),
                    Part::AdamM => &self.adam.m[name],
                    Part::AdamV => &self.adam.v[name],
                };
                tensors.push(Record {
                    name: name.clone(),
                    part,
                    shape: e.tensor.shape().to_vec(),
                    dtype: S::DTYPE.into(),
                    offset: blob.len(),
                    section: e.section,
                });
                for &v in data {
                    v.push_le(&mut blob);
                }
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            stage: self.stage,
            step: self.step,
            global_step: self.global_step,
            config_digest: self.config_digest.clone(),
            adam_t: self.adam.t,
            rng: self.rng.clone(),
            tensors,
        };
        let bpath = dir.join(BLOB);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        let mpath = dir.join(MANIFEST);
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&mpath, format!("unsupported format '{}'", m.format)));
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut params = ParamTree::new();
        let mut adam = AdamState { t: m.adam_t, m: BTreeMap::new(), v: BTreeMap::new() };
        for r in m.tensors {
            if r.dtype != S::DTYPE {
                return Err(Error::format(&mpath, format!("{} is {}, expected {}", r.name, r.dtype, S::DTYPE)));
            }
            let n: usize = r.shape.iter().product();
            let bytes = blob
                .get(r.offset..r.offset + n * S::BYTES)
                .ok_or_else(|| Error::format(&bpath, format!("truncated data for {}", r.name)))?;
            let data: Vec<S> = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
            match r.part {
                Part::Param => params.insert(r.name, Tensor::new(r.shape, data)?, r.section),
                Part::AdamM => {
                    adam.m.insert(r.name, data);
                }
                Part::AdamV => {
                    adam.v.insert(r.name, data);
                }
            }
        }
        for name in params.names() {
            if !adam.m.contains_key(name) || !adam.v.contains_key(name) {
                return Err(Error::format(&mpath, format!("optimizer moments missing for {name}")));
            }
        }
        Ok(Self {
            params,
            adam,
            rng: m.rng,
            step: m.step,
            global_step: m.global_step,
            config_digest: m.config_digest,
            stage: m.stage,
        })
    }

    /// Whether `dir` holds a checkpoint manifest.
    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }
}
