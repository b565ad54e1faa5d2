//! Single-file training checkpoints.
//!
//! ```text
//! "MACK" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | "MFE8" | u32 rows | u32 cols | rows*cols f64
//! u64 trailer length | JSON trailer (configs, counters, metric history)
//! ```
//!
//! Tensor blocks use the `MFE1` header layout with magic `MFE8` and a binary64
//! payload, so parameters round-trip bit-exactly. All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetricsRow, TrainConfig, TrainState};
use crate::network::{ModelParams, NetworkConfig, Parameters, VisualTwinParams};
use crate::optim::Adam;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MACK";
pub const CHECKPOINT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"MFE8";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: NetworkConfig,
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    format_version: u32,
    config_hash: String,
    train_config: TrainConfig,
    network_config: NetworkConfig,
    epoch: usize,
    global_step: usize,
    adam_av_step: u64,
    adam_twin_step: u64,
    history: Vec<MetricsRow>,
}

/// SHA-256 over the JSON of both configs.
pub fn config_hash(config: &TrainConfig, net: &NetworkConfig) -> Result<String> {
    let json = serde_json::to_vec(&(config, net))?;
    Ok(Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: [usize; 2], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    out.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let state = &ckpt.state;
    let mut tensors = Vec::new();
    let mut count = 0u32;
    state.params.visit(&mut |name, shape, values| {
        put_tensor(&mut tensors, &format!("av.{name}"), shape, values);
        count += 1;
    });
    state.twin.visit(&mut |name, shape, values| {
        put_tensor(&mut tensors, &format!("twin.{name}"), shape, values);
        count += 1;
    });
    for (name, adam) in [("adam_av", &state.adam_av), ("adam_twin", &state.adam_twin)] {
        put_tensor(&mut tensors, &format!("{name}.m"), [1, adam.m.len()], &adam.m);
        put_tensor(&mut tensors, &format!("{name}.v"), [1, adam.v.len()], &adam.v);
        count += 2;
    }
    let trailer = Trailer {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash(&ckpt.config, &ckpt.net)?,
        train_config: ckpt.config.clone(),
        network_config: ckpt.net.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        adam_av_step: state.adam_av.step,
        adam_twin_step: state.adam_twin.step,
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&trailer)?;

    let mut out = Vec::with_capacity(tensors.len() + json.len() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&tensors);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

type Tensors = HashMap<String, ([usize; 2], Vec<f64>)>;

fn fill(target: &mut dyn Parameters, prefix: &str, tensors: &mut Tensors) -> Result<()> {
    let mut shapes = Vec::new();
    target.visit(&mut |name, shape, _| shapes.push((name.to_string(), shape)));
    for (name, shape) in &shapes {
        let key = format!("{prefix}.{name}");
        match tensors.get(&key) {
            Some((s, _)) if s == shape => {}
            Some((s, _)) => {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {s:?}, expected {shape:?}"
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing tensor {key}"))),
        }
    }
    target.visit_mut(&mut |name, values| {
        let (_, src) = tensors.remove(&format!("{prefix}.{name}")).unwrap();
        values.copy_from_slice(&src);
    });
    Ok(())
}

fn take_vec(tensors: &mut Tensors, key: &str, len: usize) -> Result<Vec<f64>> {
    let (_, v) = tensors
        .remove(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
    if v.len() != len {
        return Err(Error::Checkpoint(format!("{key}: {} values, expected {len}", v.len())));
    }
    Ok(v)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Tensors::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?
            .to_string();
        if r.take(4, "tensor magic")? != TENSOR_MAGIC {
            return Err(Error::Checkpoint(format!("{name}: bad tensor magic")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let payload = r.take(rows * cols * 8, &name)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, ([rows, cols], values));
    }
    let json_len = r.u64("trailer length")? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(json_len, "trailer")?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after trailer".to_string()));
    }
    let expected_hash = config_hash(&trailer.train_config, &trailer.network_config)?;
    if trailer.config_hash != expected_hash {
        return Err(Error::Checkpoint("config hash mismatch".to_string()));
    }

    let net = trailer.network_config;
    let mut params = ModelParams::zeros(&net);
    let mut twin = VisualTwinParams::zeros(&net);
    fill(&mut params, "av", &mut tensors)?;
    fill(&mut twin, "twin", &mut tensors)?;
    let mut adam_av = Adam::new(params.count());
    adam_av.m = take_vec(&mut tensors, "adam_av.m", params.count())?;
    adam_av.v = take_vec(&mut tensors, "adam_av.v", params.count())?;
    adam_av.step = trailer.adam_av_step;
    let mut adam_twin = Adam::new(twin.count());
    adam_twin.m = take_vec(&mut tensors, "adam_twin.m", twin.count())?;
    adam_twin.v = take_vec(&mut tensors, "adam_twin.v", twin.count())?;
    adam_twin.step = trailer.adam_twin_step;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config: trailer.train_config,
        net,
        state: TrainState {
            epoch: trailer.epoch,
            global_step: trailer.global_step,
            params,
            twin,
            adam_av,
            adam_twin,
            history: trailer.history,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
