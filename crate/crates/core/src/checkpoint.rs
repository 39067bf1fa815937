//! Checkpoints: a safetensors archive of named arrays plus a JSON sidecar.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::critic::Critic;
use crate::data::{BatchIterator, DataCursor};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::optim::Adam;
use crate::rng::{substream, RngState};
use crate::trainer::{TrainState, DATA_SEED_SALT};

pub const FORMAT_VERSION: u32 = 1;

const OPT_D: &str = "opt_d/";
const OPT_GQ: &str = "opt_gq/";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub rng_digest: String,
    pub data_len: usize,
    pub data_cursor: DataCursor,
    pub opt_d_steps: BTreeMap<String, u64>,
    pub opt_gq_steps: BTreeMap<String, u64>,
    pub arrays: BTreeMap<String, Vec<usize>>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:08}.safetensors"))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for (k, v) in state.generator.params().into_iter().chain(state.critic.params()) {
        out.push((k, v.as_tensor().clone()));
    }
    out.extend(state.generator.buffers());
    out.extend(state.critic.buffers());
    out.extend(state.opt_d.tensors(OPT_D));
    out.extend(state.opt_gq.tensors(OPT_GQ));
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tensors: HashMap<String, Tensor> = named_tensors(state).into_iter().collect();
    let rng = RngState::capture(&state.rng);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        iteration: state.iteration,
        rng_digest: rng.digest(),
        rng,
        data_len: state.data_len,
        data_cursor: state.data.cursor(),
        opt_d_steps: state.opt_d.step_counts(),
        opt_gq_steps: state.opt_gq.step_counts(),
        arrays: tensors.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect(),
    };
    candle_core::safetensors::save(&tensors, path)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::Format(format!("cannot read checkpoint sidecar {}: {e}", side.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("sidecar has no format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

fn assign(vars: Vec<(String, Var)>, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in vars {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array '{name}'")))?;
        if t.dims() != var.dims() {
            return Err(Error::Format(format!(
                "array '{name}' has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(t)?;
    }
    Ok(())
}

fn assign_buffers<F>(names: Vec<(String, Tensor)>, tensors: &HashMap<String, Tensor>, mut set: F) -> Result<()>
where
    F: FnMut(&str, Tensor) -> Result<bool>,
{
    for (name, current) in names {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks buffer '{name}'")))?;
        if t.dims() != current.dims() {
            return Err(Error::Format(format!("buffer '{name}' has shape {:?}", t.dims())));
        }
        if !set(&name, t.clone())? {
            return Err(Error::Format(format!("model has no buffer '{name}'")));
        }
    }
    Ok(())
}

/// Restores a full training state; version, digest and every array are checked.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let meta = read_meta(path)?;
    let actual = meta.rng.digest();
    if actual != meta.rng_digest {
        return Err(Error::Checksum {
            expected: meta.rng_digest.clone(),
            actual,
        });
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    for (name, shape) in &meta.arrays {
        match tensors.get(name) {
            Some(t) if t.dims() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Format(format!(
                    "array '{name}' is {:?}, sidecar says {shape:?}",
                    t.dims()
                )))
            }
            None => return Err(Error::Format(format!("checkpoint lacks array '{name}'"))),
        }
    }
    let cfg = meta.config.clone();
    let dev = Device::Cpu;
    let mut generator = Generator::new(cfg.generator_config(), &mut substream(cfg.seed, 0), candle_core::DType::F32, &dev)?;
    let mut critic = Critic::new(cfg.critic_config(), &mut substream(cfg.seed, 1), candle_core::DType::F32, &dev)?;
    assign(generator.params(), &tensors)?;
    assign(critic.params(), &tensors)?;
    let gb = generator.buffers();
    assign_buffers(gb, &tensors, |k, v| generator.set_buffer(k, v))?;
    let cb = critic.buffers();
    assign_buffers(cb, &tensors, |k, v| critic.set_buffer(k, v))?;
    let opt_d = Adam::restore(cfg.adam(), OPT_D, &meta.opt_d_steps, &tensors)?;
    let opt_gq = Adam::restore(cfg.adam(), OPT_GQ, &meta.opt_gq_steps, &tensors)?;
    let data = BatchIterator::resume(meta.data_len, cfg.batch_size, true, cfg.seed ^ DATA_SEED_SALT, meta.data_cursor)?;
    TrainState::assemble(cfg, meta.iteration, generator, critic, opt_d, opt_gq, meta.rng.restore()?, data, meta.data_len)
}

/// Loads only the models, for evaluation and traversal.
pub fn load_models(path: &Path) -> Result<(TrainConfig, Generator, Critic)> {
    let state = load_checkpoint(path)?;
    Ok((state.config, state.generator, state.critic))
}
