//! Checkpoint container.
//!
//! ```text
//! "ARVC" | version u16 | section count u16 |
//!   { name_len u16 | name | payload_len u64 | payload }*
//! ```
//!
//! Sections, in order: `config` (UTF-8 run config), `params`, `adam_m`,
//! `adam_v` (tensor lists), `state` (step u64, optimizer step u64) and
//! `rng` (seed u64, next batch index u64). A tensor list is a u32 count
//! followed by `name_len u16 | name | dtype u8 | ndim u8 | dims u32* |
//! little-endian floats`. All integers are little-endian.

use std::path::Path;

use tensorad::{Real, Tensor};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, FormatError, Result};
use crate::model::{ArVideoModel, ModelParams};
use crate::trainer::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ARVC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Seed and position of the training random streams. Every batch sample draws
/// from a substream keyed by `(seed, step, sample)`, so the position is the
/// next step index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub params: ModelParams<F>,
    pub optimizer: OptimizerState<F>,
    pub rng: RngState,
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::DimensionOverflow)?;
        if end > self.bytes.len() {
            return Err(FormatError::TruncatedPayload {
                expected: end as u64,
                found: self.bytes.len() as u64,
            }
            .into());
        }
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn encode_tensors<F: Real>(names: &[&str], tensors: &[Tensor<F>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

fn decode_tensors<F: Real>(payload: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| FormatError::Section("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != F::DTYPE {
            return Err(FormatError::UnsupportedDtype(dtype).into());
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(FormatError::DimensionOverflow)?;
        let raw = r.take(n.checked_mul(F::BYTES).ok_or(FormatError::DimensionOverflow)?)?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !r.done() {
        return Err(FormatError::TrailingBytes.into());
    }
    Ok(out)
}

fn precision_of<F: Real>() -> Precision {
    if F::DTYPE == f32::DTYPE {
        Precision::F32
    } else {
        Precision::F64
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<&str> = self.params.specs.iter().map(|s| s.name.as_str()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&6u16.to_le_bytes());
        put_section(&mut out, "config", self.config.render().as_bytes());
        put_section(&mut out, "params", &encode_tensors(&names, &self.params.tensors));
        put_section(&mut out, "adam_m", &encode_tensors(&names, &self.optimizer.m));
        put_section(&mut out, "adam_v", &encode_tensors(&names, &self.optimizer.v));
        let mut state = Vec::new();
        state.extend_from_slice(&self.step.to_le_bytes());
        state.extend_from_slice(&self.optimizer.step.to_le_bytes());
        put_section(&mut out, "state", &state);
        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.seed.to_le_bytes());
        rng.extend_from_slice(&self.rng.next_step.to_le_bytes());
        put_section(&mut out, "rng", &rng);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let get = |name: &str| -> Result<&[u8]> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| *p)
                .ok_or_else(|| FormatError::Section(format!("missing section `{name}`")).into())
        };
        let text = std::str::from_utf8(get("config")?).map_err(|_| FormatError::Section("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        if config.precision != precision_of::<F>() {
            return Err(Error::config(
                "precision",
                format!("checkpoint holds {:?} parameters, {} requested", config.precision, F::NAME),
            ));
        }
        let model = ArVideoModel::new(config.model_config())?;
        let specs = model.param_specs();
        let unpack = |name: &str| -> Result<Vec<Tensor<F>>> {
            let list = decode_tensors::<F>(get(name)?)?;
            if list.len() != specs.len() || list.iter().zip(specs).any(|((n, _), s)| *n != s.name) {
                return Err(FormatError::Section(format!("`{name}` does not match the model layout")).into());
            }
            Ok(list.into_iter().map(|(_, t)| t).collect())
        };
        let params = ModelParams::from_tensors(specs, unpack("params")?)?;
        let m = unpack("adam_m")?;
        let v = unpack("adam_v")?;
        let mut st = Reader { bytes: get("state")?, pos: 0 };
        let step = st.u64()?;
        let opt_step = st.u64()?;
        let mut rr = Reader { bytes: get("rng")?, pos: 0 };
        let rng = RngState {
            seed: rr.u64()?,
            next_step: rr.u64()?,
        };
        Ok(Self {
            config,
            params,
            optimizer: OptimizerState { m, v, step: opt_step },
            rng,
            step,
        })
    }
}

fn read_sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let count = r.u16()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| FormatError::Section("section name is not UTF-8".into()))?;
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| FormatError::DimensionOverflow)?;
        out.push((name, r.take(len)?));
    }
    if !r.done() {
        return Err(FormatError::TrailingBytes.into());
    }
    Ok(out)
}

/// Reads only the run configuration, e.g. to pick the precision to load with.
pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let bytes = std::fs::read(path)?;
    let sections = read_sections(&bytes)?;
    let (_, text) = sections
        .iter()
        .find(|(n, _)| n == "config")
        .ok_or_else(|| FormatError::Section("missing section `config`".into()))?;
    RunConfig::parse(std::str::from_utf8(text).map_err(|_| FormatError::Section("config is not UTF-8".into()))?)
}

pub fn save_checkpoint<F: Real>(path: impl AsRef<Path>, ckpt: &Checkpoint<F>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
