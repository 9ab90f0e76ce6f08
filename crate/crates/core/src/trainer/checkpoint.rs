//! Checkpoint file. All integers little-endian.
//!
//! ```text
//! magic        8 bytes  "MSGCL-CK"
//! version      u32
//! config hash  u64      first 8 bytes of SHA-256 of the model config JSON
//! dtype        u8       parameter storage: 0 = f64, 1 = f32
//! meta         u32 length + JSON (configs, counters, early-stopping state)
//! tensors      u32 count, then per tensor:
//!                u32 length + UTF-8 name, u8 dtype, u32 rows, u32 cols, data
//! ```
//!
//! Tensor names are prefixed `param/`, `best/`, `adam.m/` and `adam.v/`.
//! Optimizer moments are always stored as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Adam, TrainState};
use crate::config::{ModelConfig, Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSGCL-CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    best_ndcg10: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    finished: bool,
    adam_t: [u64; 2],
}

fn short(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

fn write_tensor(w: &mut impl Write, name: &str, m: &Mat, f32: bool) -> std::io::Result<()> {
    w.write_u32::<LE>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(f32 as u8)?;
    w.write_u32::<LE>(m.nrows() as u32)?;
    w.write_u32::<LE>(m.ncols() as u32)?;
    for &x in m.iter() {
        if f32 {
            w.write_f32::<LE>(x as f32)?;
        } else {
            w.write_f64::<LE>(x)?;
        }
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Mat)> {
    let n = r.read_u32::<LE>().map_err(short)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(short)?;
    let name = String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let dtype = r.read_u8().map_err(short)?;
    let rows = r.read_u32::<LE>().map_err(short)? as usize;
    let cols = r.read_u32::<LE>().map_err(short)? as usize;
    let mut data = vec![0.0; rows * cols];
    match dtype {
        0 => r.read_f64_into::<LE>(&mut data).map_err(short)?,
        1 => {
            for x in data.iter_mut() {
                *x = r.read_f32::<LE>().map_err(short)? as f64;
            }
        }
        d => return Err(Error::Format(format!("tensor {name}: unknown dtype {d}"))),
    }
    let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((name, m))
}

pub fn write_checkpoint(state: &TrainState, w: &mut impl Write) -> Result<()> {
    let f32 = state.config.precision == Precision::F32;
    let meta = Meta {
        model: state.model.config.clone(),
        train: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        best_ndcg10: state.best_ndcg10,
        best_epoch: state.best_epoch,
        bad_epochs: state.bad_epochs,
        finished: state.finished,
        adam_t: state.adam.t,
    };
    let json = serde_json::to_vec(&meta)?;
    let io = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u64::<LE>(state.model.config.hash()).map_err(io)?;
    w.write_u8(f32 as u8).map_err(io)?;
    w.write_u32::<LE>(json.len() as u32).map_err(io)?;
    w.write_all(&json).map_err(io)?;

    let params = state.model.params.entries();
    let best = state.best_params.as_ref().map(|p| p.entries());
    let count = params.len() * 3 + best.map_or(0, |b| b.len());
    w.write_u32::<LE>(count as u32).map_err(io)?;
    for (i, e) in params.iter().enumerate() {
        write_tensor(w, &format!("param/{}", e.name), &e.value, f32).map_err(io)?;
        write_tensor(w, &format!("adam.m/{}", e.name), &state.adam.m[i], false).map_err(io)?;
        write_tensor(w, &format!("adam.v/{}", e.name), &state.adam.v[i], false).map_err(io)?;
    }
    for e in best.into_iter().flatten() {
        write_tensor(w, &format!("best/{}", e.name), &e.value, f32).map_err(io)?;
    }
    Ok(())
}

fn fill(template: &ParamStore, prefix: &str, tensors: &mut std::collections::HashMap<String, Mat>) -> Result<Vec<Mat>> {
    template
        .entries()
        .iter()
        .map(|e| {
            let key = format!("{prefix}/{}", e.name);
            let m = tensors
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if m.dim() != e.value.dim() {
                return Err(Error::Shape(format!(
                    "{key}: stored {:?}, expected {:?}",
                    m.dim(),
                    e.value.dim()
                )));
            }
            Ok(m)
        })
        .collect()
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<TrainState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(short)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.read_u64::<LE>().map_err(short)?;
    let _dtype = r.read_u8().map_err(short)?;
    let n = r.read_u32::<LE>().map_err(short)? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json).map_err(short)?;
    let meta: Meta = serde_json::from_slice(&json)?;
    if meta.model.hash() != hash {
        return Err(Error::Format("config hash does not match stored config".into()));
    }
    let count = r.read_u32::<LE>().map_err(short)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, m) = read_tensor(r)?;
        tensors.insert(name, m);
    }

    let template = Model::new(meta.model.clone())?;
    let mut params = template.params.clone();
    for (i, m) in fill(&template.params, "param", &mut tensors)?.into_iter().enumerate() {
        *params.value_mut(crate::params::ParamId(i)) = m;
    }
    let model = Model::from_params(meta.model.clone(), params)?;
    let adam = Adam {
        lr: meta.train.lr,
        m: fill(&template.params, "adam.m", &mut tensors)?,
        v: fill(&template.params, "adam.v", &mut tensors)?,
        t: meta.adam_t,
    };
    let best_params = if tensors.keys().any(|k| k.starts_with("best/")) {
        let mut b = template.params.clone();
        for (i, m) in fill(&template.params, "best", &mut tensors)?.into_iter().enumerate() {
            *b.value_mut(crate::params::ParamId(i)) = m;
        }
        Some(b)
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        model,
        config: meta.train,
        adam,
        epoch: meta.epoch,
        step: meta.step,
        best_ndcg10: meta.best_ndcg10,
        best_epoch: meta.best_epoch,
        bad_epochs: meta.bad_epochs,
        best_params,
        finished: meta.finished,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(state, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
