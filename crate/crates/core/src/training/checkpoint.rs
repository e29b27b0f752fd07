//! Checkpoint container: `M2VC`, u32 version, u64 manifest length, UTF-8 JSON
//! manifest, then every tensor as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainState};
use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2VC";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&str; 4] = ["params", "best", "adam.m", "adam.v"];

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128 portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    train_config: TrainConfig,
    model_config: ModelConfig,
    epoch: usize,
    best_metric: Option<f64>,
    stale_evals: usize,
    stopped: bool,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Loaded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub state: TrainState,
}

fn section_tensors(prefix: &str, names: &[Tensor], data: impl Fn(usize) -> Vec<f64>) -> Vec<Tensor> {
    names
        .iter()
        .enumerate()
        .map(|(k, t)| Tensor {
            name: format!("{prefix}/{}", t.name),
            rows: t.rows,
            cols: t.cols,
            data: data(k),
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let layout = state.params.store.tensors();
    let mut all = Vec::new();
    all.extend(section_tensors(SECTIONS[0], layout, |k| layout[k].data.clone()));
    let best = state.best_params.store.tensors();
    all.extend(section_tensors(SECTIONS[1], layout, |k| best[k].data.clone()));
    all.extend(section_tensors(SECTIONS[2], layout, |k| state.adam.m.grads[k].clone()));
    all.extend(section_tensors(SECTIONS[3], layout, |k| state.adam.v.grads[k].clone()));

    let mut offset = 0;
    let entries = all
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                offset,
            };
            offset += t.data.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        train_config: config.clone(),
        model_config: state.params.config.clone(),
        epoch: state.epoch,
        best_metric: state.best_metric,
        stale_evals: state.stale_evals,
        stopped: state.stopped,
        adam_step: state.adam.step,
        rng: RngState::capture(&state.rng),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + offset * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in &all {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take<'b>(bytes: &mut &'b [u8], n: usize, what: &str) -> Result<&'b [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rest = raw.as_slice();
    if take(&mut rest, 4, "header")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "header")?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut rest, len, "manifest")?)?;
    if manifest.format_version != version {
        return Err(Error::Checkpoint("manifest version disagrees with header".into()));
    }

    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if rest.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest describes {}",
            rest.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut sections: [Vec<Tensor>; 4] = Default::default();
    for e in &manifest.tensors {
        let n = e.rows * e.cols;
        if e.offset + n > values.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)));
        }
        let (prefix, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("malformed tensor name `{}`", e.name)))?;
        let k = SECTIONS
            .iter()
            .position(|s| *s == prefix)
            .ok_or_else(|| Error::Checkpoint(format!("unknown section `{prefix}`")))?;
        sections[k].push(Tensor {
            name: name.to_string(),
            rows: e.rows,
            cols: e.cols,
            data: values[e.offset..e.offset + n].to_vec(),
        });
    }
    let [params, best, m, v] = sections;
    let params = ModelParams::from_tensors(manifest.model_config.clone(), params)?;
    let best_params = ModelParams::from_tensors(manifest.model_config.clone(), best)?;
    let moments = |ts: Vec<Tensor>, what: &str| -> Result<Gradients> {
        let restored = ModelParams::from_tensors(manifest.model_config.clone(), ts)
            .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
        Ok(Gradients {
            grads: restored.store.tensors().iter().map(|t| t.data.clone()).collect(),
        })
    };
    let mut adam = Adam::new(&params);
    adam.m = moments(m, "adam first moment")?;
    adam.v = moments(v, "adam second moment")?;
    adam.step = manifest.adam_step;

    Ok(Checkpoint {
        train_config: manifest.train_config,
        state: TrainState {
            params,
            adam,
            rng: manifest.rng.restore()?,
            epoch: manifest.epoch,
            best_metric: manifest.best_metric,
            best_params,
            stale_evals: manifest.stale_evals,
            stopped: manifest.stopped,
        },
    })
}

impl Checkpoint {
    /// Errors, naming the first offending tensor, when the stored parameters
    /// do not have the shapes `expected` requires.
    pub fn check_shapes(&self, expected: &ModelConfig) -> Result<()> {
        let tensors = self.state.params.store.tensors().to_vec();
        ModelParams::from_tensors(expected.clone(), tensors).map(|_| ())
    }
}
