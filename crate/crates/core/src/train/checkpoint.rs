//! `.ckpt` files: a text preamble declaring the header length, a TOML
//! header (configs, step, generator position, tensor manifest), then the
//! tensors as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::train::{train_rng, AdamState, TrainConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "moe-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: usize,
    model: ModelConfig,
    train: TrainConfig,
    rng: RngState,
    tensor: Vec<ManifestEntry>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Serializes a trainer to bytes.
pub fn encode(trainer: &Trainer<f32>) -> Vec<u8> {
    let store = &trainer.model.store;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32], blob: &mut Vec<u8>| {
        entries.push(ManifestEntry {
            name,
            shape,
            offset: blob.len(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (id, name, t) in store.iter() {
        push(name.to_string(), t.shape.clone(), &t.data, &mut blob);
        let _ = id;
    }
    for (id, name, t) in store.iter() {
        if t.requires_grad {
            push(format!("{M_PREFIX}{name}"), t.shape.clone(), &trainer.opt.m[id.0], &mut blob);
            push(format!("{V_PREFIX}{name}"), t.shape.clone(), &trainer.opt.v[id.0], &mut blob);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        step: trainer.opt.step,
        model: trainer.model.cfg.clone(),
        train: trainer.cfg.clone(),
        rng: RngState {
            seed: trainer.cfg.seed,
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        tensor: entries,
    };
    let text = toml::to_string(&header).expect("checkpoint header serializes");
    let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\nheader_bytes {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n')?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).ok()
}

/// Parses bytes produced by [`encode`]. Nothing is returned unless every
/// tensor is present with the right shape and the blob length matches.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Trainer<f32>> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0;
    let first = take_line(bytes, &mut pos).ok_or_else(|| bad("missing preamble".into()))?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a checkpoint file".into()))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hb = take_line(bytes, &mut pos)
        .and_then(|l| l.strip_prefix("header_bytes "))
        .and_then(|n| n.trim().parse::<usize>().ok())
        .ok_or_else(|| bad("missing header length".into()))?;
    if bytes.len() < pos + hb {
        return Err(bad("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[pos..pos + hb]).map_err(|_| bad("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("header version {}, expected {CHECKPOINT_VERSION}", header.version)));
    }
    let blob = &bytes[pos + hb..];

    let mut expected_offset = 0usize;
    for e in &header.tensor {
        if e.offset != expected_offset {
            return Err(bad(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        expected_offset += e.shape.iter().product::<usize>() * 4;
    }
    if blob.len() < expected_offset {
        return Err(bad(format!("blob has {} bytes, manifest needs {expected_offset}", blob.len())));
    }
    if blob.len() != expected_offset {
        return Err(bad(format!("blob has {} bytes, manifest describes {expected_offset}", blob.len())));
    }
    let read = |e: &ManifestEntry| -> Vec<f32> {
        let n: usize = e.shape.iter().product();
        blob[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    let find = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let e = header
            .tensor
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("manifest lacks tensor {name}")))?;
        if e.shape != shape {
            return Err(bad(format!("tensor {name} has shape {:?}, model expects {shape:?}", e.shape)));
        }
        Ok(read(e))
    };

    header.model.validate()?;
    header.train.validate()?;
    let mut model = Model::<f32>::build(&header.model, header.train.seed)?;
    let mut opt = AdamState::new(&model.store);
    let mut expected_entries = 0;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape.clone();
        model.store.get_mut(id).data = find(&name, &shape)?;
        expected_entries += 1;
        if model.store.get(id).requires_grad {
            opt.m[id.0] = find(&format!("{M_PREFIX}{name}"), &shape)?;
            opt.v[id.0] = find(&format!("{V_PREFIX}{name}"), &shape)?;
            expected_entries += 2;
        }
    }
    if expected_entries != header.tensor.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, model has {expected_entries}",
            header.tensor.len()
        )));
    }
    opt.step = header.step;
    let mut rng = train_rng(header.rng.seed);
    if header.rng.stream != rng.get_stream() {
        return Err(bad(format!("unexpected generator stream {}", header.rng.stream)));
    }
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| bad("invalid generator position".into()))?;
    rng.set_word_pos(word_pos);
    Ok(Trainer {
        model,
        opt,
        cfg: header.train,
        rng,
    })
}

pub fn save_checkpoint(trainer: &Trainer<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(trainer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
