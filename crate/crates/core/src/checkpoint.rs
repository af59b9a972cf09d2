//! Checkpoint files.
//!
//! Layout, little-endian: `"M3TC" | u16 version | u32 manifest length |
//! manifest JSON | u32 tensor count | tensors`. Each tensor is `u32 name
//! length | name | u8 dtype (0 = f32, 1 = f64) | u16 rank | rank×u32 extents |
//! payload`. Parameters come first in store order, then `adam.m.<name>` and
//! `adam.v.<name>` for each parameter.
//!
//! Random streams are derived from `(seed, step, epoch)`, so the manifest's
//! copy of those three numbers is the whole RNG state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::M3tModel;
use crate::tensor::{AdamState, ParamStore, Precision, Tensor};

const MAGIC: &[u8; 4] = b"M3TC";
const VERSION: u16 = 1;

/// Training progress that is not part of the model itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub stale_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vocabulary,
    step: u64,
    adam_step: u64,
    seed: u64,
    train_state: TrainState,
    parameters: Vec<String>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], wide: bool) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(u8::from(wide));
    out.extend((shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for &x in data {
        if wide {
            out.extend(x.to_le_bytes());
        } else {
            out.extend((x as f32).to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &M3tModel, state: &TrainState) -> Result<Vec<u8>> {
    let store = &model.store;
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_owned()).collect();
    let manifest = Manifest {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        step: model.step,
        adam_step: model.adam.step_count(),
        seed: model.config.train.seed,
        train_state: state.clone(),
        parameters: names.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let wide = model.config.train.precision == Precision::F64;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json.as_bytes());
    out.extend(((names.len() * 3) as u32).to_le_bytes());
    for id in store.ids() {
        let t = store.get(id);
        put_tensor(&mut out, &names[id.index()], t.shape(), t.data(), wide);
    }
    for (prefix, pick) in [("adam.m.", 0), ("adam.v.", 1)] {
        for id in store.ids() {
            let (m, v) = model.adam.moments(id.index());
            let data = if pick == 0 { m } else { v };
            let name = format!("{prefix}{}", names[id.index()]);
            put_tensor(&mut out, &name, store.get(id).shape(), data, wide);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let wide = match self.u8()? {
            0 => false,
            1 => true,
            d => return Err(Error::Format(format!("{name}: unknown dtype {d}"))),
        };
        let rank = self.u16()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = if wide { 8 } else { 4 };
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if wide {
                    f64::from_le_bytes(c.try_into().unwrap())
                } else {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                }
            })
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(M3tModel, TrainState)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an M3TC checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let count = r.u32()? as usize;
    let k = manifest.parameters.len();
    if count != 3 * k {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            3 * k
        )));
    }
    let mut store = ParamStore::new();
    for want in &manifest.parameters {
        let (name, t) = r.tensor()?;
        if &name != want {
            return Err(Error::Format(format!(
                "expected tensor {want}, found {name}"
            )));
        }
        store.add(name, t);
    }
    let mut moments = [Vec::with_capacity(k), Vec::with_capacity(k)];
    for (prefix, buf) in ["adam.m.", "adam.v."].iter().zip(&mut moments) {
        for want in &manifest.parameters {
            let (name, t) = r.tensor()?;
            if name != format!("{prefix}{want}") {
                return Err(Error::Format(format!(
                    "expected tensor {prefix}{want}, found {name}"
                )));
            }
            buf.push(t.into_data());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let [m, v] = moments;
    let cfg = manifest.config;
    let adam = AdamState::restore(
        &store,
        cfg.adam(),
        cfg.train.precision,
        m,
        v,
        manifest.adam_step,
    )?;
    let model = M3tModel::from_parts(cfg, manifest.vocab, store, adam, manifest.step)?;
    Ok((model, manifest.train_state))
}

pub fn save_checkpoint(path: &Path, model: &M3tModel, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(model, state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(M3tModel, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
