//! Checkpoint format (shared by the codec and the trainer):
//!
//!   magic "LLICCKPT" | version u16 | config digest u64 | tensor count u32
//!   then per tensor:
//!     name length u16 | UTF-8 name | rank u8 | extents u32[rank] | f64[] LE
//!
//! Reserved names carry non-parameter payloads: `__config` holds the
//! numeric model configuration, `__state.*` the optimizer/RNG state for
//! bit-exact training resume. Loaders that only need the model skip the
//! state entries.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const CKPT_MAGIC: &[u8; 8] = b"LLICCKPT";
pub const CKPT_VERSION: u16 = 1;

pub const CONFIG_TENSOR: &str = "__config";
const STATE_STEP: &str = "__state.step";
const STATE_RNG: &str = "__state.rng";

/// Serializable training state: step counter, Adam moments (by param
/// creation order) and the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub rng: Rng,
}

impl TrainState {
    pub fn fresh(store: &ParamStore, seed: u64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        TrainState {
            step: 0,
            m,
            v,
            rng: Rng::new(seed),
        }
    }
}

fn rng_to_values(rng: &Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(8);
    for word in rng.state() {
        out.push((word >> 32) as f64);
        out.push((word & 0xFFFF_FFFF) as f64);
    }
    out
}

fn rng_from_values(v: &[f64]) -> Result<Rng> {
    if v.len() != 8 {
        return Err(Error::Format("bad RNG state length in checkpoint".into()));
    }
    let mut state = [0u64; 4];
    for i in 0..4 {
        let hi = v[2 * i] as u64;
        let lo = v[2 * i + 1] as u64;
        state[i] = (hi << 32) | lo;
    }
    Ok(Rng::from_state(state))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore,
    state: Option<&TrainState>,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let cfg_values = config.to_values();
    tensors.push((CONFIG_TENSOR.into(), vec![cfg_values.len()], cfg_values));
    for id in store.ids() {
        tensors.push((
            store.name(id).to_string(),
            store.shape(id).to_vec(),
            store.value(id).to_vec(),
        ));
    }
    if let Some(st) = state {
        tensors.push((STATE_STEP.into(), vec![1], vec![st.step as f64]));
        tensors.push((STATE_RNG.into(), vec![8], rng_to_values(&st.rng)));
        for id in store.ids() {
            tensors.push((
                format!("__state.m.{}", store.name(id)),
                store.shape(id).to_vec(),
                st.m[id].clone(),
            ));
            tensors.push((
                format!("__state.v.{}", store.name(id)),
                store.shape(id).to_vec(),
                st.v[id].clone(),
            ));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.digest().to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        write_tensor(&mut out, name, shape, data);
    }
    std::fs::write(path, out).map_err(|e| Error::io_path("writing", path, e))
}

/// Raw parsed checkpoint: digest plus named tensors in file order.
pub struct RawCheckpoint {
    pub digest: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl RawCheckpoint {
    pub fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_path("reading", path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not an LLIC checkpoint",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let digest = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("non-UTF8 tensor name".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(8 * n)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok(RawCheckpoint { digest, tensors })
}

/// Extract and digest-verify the embedded model config.
pub fn config_of(raw: &RawCheckpoint) -> Result<ModelConfig> {
    let (_, _, values) = raw
        .find(CONFIG_TENSOR)
        .ok_or_else(|| Error::Format("checkpoint has no __config tensor".into()))?;
    let config = ModelConfig::from_values(values).map_err(Error::Format)?;
    if config.digest() != raw.digest {
        return Err(Error::Format(format!(
            "config digest mismatch: header {:#018x}, config {:#018x}",
            raw.digest,
            config.digest()
        )));
    }
    Ok(config)
}

/// Copy parameter tensors into an existing store (names and shapes must
/// match the built architecture exactly).
pub fn load_params(raw: &RawCheckpoint, store: &mut ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, shape, data) = raw
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing param {name}")))?;
        if shape != store.shape(id) {
            return Err(Error::Format(format!(
                "checkpoint param {name} has shape {shape:?}, expected {:?}",
                store.shape(id)
            )));
        }
        store.set_value(id, data.clone());
    }
    Ok(())
}

/// Rebuild a model (architecture + weights) from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore)> {
    let raw = read_checkpoint(path)?;
    let config = config_of(&raw)?;
    let (model, mut store) = Model::build(config, 0);
    load_params(&raw, &mut store)?;
    Ok((model, store))
}

/// Reconstruct the optimizer/RNG state, if present.
pub fn train_state_of(raw: &RawCheckpoint, store: &ParamStore) -> Result<Option<TrainState>> {
    let Some((_, _, step_v)) = raw.find(STATE_STEP) else {
        return Ok(None);
    };
    let (_, _, rng_v) = raw
        .find(STATE_RNG)
        .ok_or_else(|| Error::Format("checkpoint has step but no RNG state".into()))?;
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let grab = |prefix: &str| -> Result<Vec<f64>> {
            let key = format!("__state.{prefix}.{name}");
            let (_, shape, data) = raw
                .find(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {key}")))?;
            if shape != store.shape(id) {
                return Err(Error::Format(format!("bad shape for {key}")));
            }
            Ok(data.clone())
        };
        m.push(grab("m")?);
        v.push(grab("v")?);
    }
    Ok(Some(TrainState {
        step: step_v[0] as u64,
        m,
        v,
        rng: rng_from_values(rng_v)?,
    }))
}
