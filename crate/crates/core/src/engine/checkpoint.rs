//! Checkpoint directory: `manifest.json` (configs, step, RNG position,
//! vocabulary, tensor index) plus one raw little-endian f32 file per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainConfig, TrainState};
use crate::error::{io_err, Error, Result};
use crate::nn::{to_vec_f32, ParamStore};
use crate::rng::RngState;
use crate::style::Vocab;

const FORMAT: &str = "diffgan-tts-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    step: u64,
    model: ModelConfig,
    train: TrainConfig,
    rng: RngState,
    vocab: String,
    opt_g_steps: u64,
    opt_d_steps: u64,
    tensors: Vec<TensorEntry>,
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.f32"))
}

fn write_tensor(dir: &Path, group: &str, name: &str, t: &Tensor, index: &mut Vec<TensorEntry>) -> Result<()> {
    let path = tensor_path(dir, group, name);
    let bytes: Vec<u8> = to_vec_f32(t)?.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(&path, bytes).map_err(io_err(&path))?;
    index.push(TensorEntry { group: group.into(), name: name.into(), shape: t.dims().to_vec() });
    Ok(())
}

fn read_tensor(dir: &Path, e: &TensorEntry, dtype: DType) -> Result<Tensor> {
    let path = tensor_path(dir, &e.group, &e.name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let n: usize = e.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Corrupt {
            item: format!("{}/{}", e.group, e.name),
            reason: format!("{} bytes for shape {:?}", bytes.len(), e.shape),
        });
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(data, e.shape.as_slice(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let groups = ["gen", "disc", "opt_g.m", "opt_g.v", "opt_d.m", "opt_d.v"];
    for g in groups {
        fs::create_dir_all(dir.join(g)).map_err(io_err(dir))?;
    }
    let mut index = Vec::new();
    for (name, var) in state.model.gen_params.iter() {
        write_tensor(dir, "gen", name, var.as_tensor(), &mut index)?;
    }
    for (name, var) in state.model.disc_params.iter() {
        write_tensor(dir, "disc", name, var.as_tensor(), &mut index)?;
    }
    for (opt, prefix) in [(&state.opt_g, "opt_g"), (&state.opt_d, "opt_d")] {
        for (name, m, v) in opt.moments() {
            write_tensor(dir, &format!("{prefix}.m"), name, m, &mut index)?;
            write_tensor(dir, &format!("{prefix}.v"), name, v, &mut index)?;
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        model: state.model.cfg.clone(),
        train: state.train.clone(),
        rng: RngState::capture(&state.rng),
        vocab: state.model.vocab().to_text(),
        opt_g_steps: state.opt_g.steps(),
        opt_d_steps: state.opt_d.steps(),
        tensors: index,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if m.format != FORMAT {
        return Err(Error::Corrupt {
            item: path.display().to_string(),
            reason: format!("unknown format `{}`", m.format),
        });
    }
    Ok(m)
}

fn fill_store(dir: &Path, m: &Manifest, group: &str, store: &ParamStore) -> Result<()> {
    let entries: Vec<&TensorEntry> = m.tensors.iter().filter(|e| e.group == group).collect();
    if entries.len() != store.len() {
        return Err(Error::Corrupt {
            item: dir.display().to_string(),
            reason: format!("{} `{group}` tensors for {} parameters", entries.len(), store.len()),
        });
    }
    for e in entries {
        store.assign(&e.name, &read_tensor(dir, e, store.dtype())?)?;
    }
    Ok(())
}

fn load_model_from(dir: &Path, m: &Manifest) -> Result<Model> {
    let vocab = Vocab::from_text(&m.vocab)?;
    let model = Model::new(&m.model, vocab, 0, DType::F32)?;
    fill_store(dir, m, "gen", &model.gen_params)?;
    fill_store(dir, m, "disc", &model.disc_params)?;
    Ok(model)
}

/// Model parameters only.
pub fn load_model(dir: &Path) -> Result<Model> {
    load_model_from(dir, &read_manifest(dir)?)
}

/// Full training state, ready to resume.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let m = read_manifest(dir)?;
    let model = load_model_from(dir, &m)?;
    let mut state = TrainState::new(model, m.train.clone())?;
    for (opt, prefix, t) in [(&mut state.opt_g, "opt_g", m.opt_g_steps), (&mut state.opt_d, "opt_d", m.opt_d_steps)] {
        let names: Vec<String> = opt.names().map(str::to_string).collect();
        let mut moments = Vec::with_capacity(names.len());
        for name in names {
            let find = |g: String| {
                m.tensors.iter().find(|e| e.group == g && e.name == name).ok_or_else(|| Error::Corrupt {
                    item: dir.display().to_string(),
                    reason: format!("missing optimizer state `{g}/{name}`"),
                })
            };
            let mt = read_tensor(dir, find(format!("{prefix}.m"))?, DType::F32)?;
            let vt = read_tensor(dir, find(format!("{prefix}.v"))?, DType::F32)?;
            moments.push((name, mt, vt));
        }
        opt.restore(t, &moments)?;
    }
    state.rng = m.rng.restore();
    state.step = m.step;
    Ok(state)
}
