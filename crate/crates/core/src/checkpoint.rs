//! Little-endian weight file.
//!
//! ```text
//! "FCNW" | version: u32 = 1 | count: u32 | tensor * count
//! trailer: means: f32 * 3 | velocity count: u32 | tensor * velocity count
//! tensor: name_len: u16 | name: utf-8 | rank: u8 | dims: u32 * rank | data: f32 * prod(dims)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, FcnModel, STAGE_COUNT};
use crate::optim::SgdState;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"FCNW";
pub const VERSION: u32 = 1;
const MAX_RANK: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    /// Dims padded with trailing unit axes to rank 4.
    pub fn shape(&self) -> Result<Shape> {
        if self.dims.is_empty() || self.dims.len() > MAX_RANK as usize {
            return Err(Error::Import(format!("{}: rank {} not supported", self.name, self.dims.len())));
        }
        let mut d = [1usize; 4];
        d[..self.dims.len()].copy_from_slice(&self.dims);
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub means: [f32; 3],
    /// Optimizer velocity, one entry per parameter, named after it.
    pub velocity: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, {remaining} left", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(field)?))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_tensor(r: &mut Reader<'_>, prefix: &str, i: usize) -> Result<NamedTensor> {
    let field = |f: &str| format!("{prefix}[{i}].{f}");
    let name_len = r.u16(&field("name_len"))? as usize;
    let name_bytes = r.take(name_len, &field("name"))?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|e| Error::format(field("name"), format!("invalid utf-8: {e}")))?
        .to_string();
    let rank = r.u8(&field("rank"))?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(field("rank"), format!("rank {rank} not in 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32(&field("dims"))? as usize;
        if d == 0 {
            return Err(Error::format(field("dims"), format!("zero dimension in tensor {name}")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(field("dims"), "element count overflows"))?;
        dims.push(d);
    }
    let bytes = numel
        .checked_mul(4)
        .filter(|&b| b <= r.remaining())
        .ok_or_else(|| Error::format(field("data"), format!("truncated: tensor {name} needs {numel} floats")))?;
    let raw = r.take(bytes, &field("data"))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NamedTensor { name, dims, data })
}

fn write_tensor(out: &mut Vec<u8>, t: &NamedTensor) {
    let name = t.name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn read_tensors(r: &mut Reader<'_>, count: usize, prefix: &str) -> Result<Vec<NamedTensor>> {
    let mut seen = HashSet::new();
    // Each tensor takes at least 2 + 1 + 4 + 4 bytes; bound the pre-allocation by that.
    let mut tensors = Vec::with_capacity(count.min(r.remaining() / 11));
    for i in 0..count {
        let t = read_tensor(r, prefix, i)?;
        if !seen.insert(t.name.clone()) {
            return Err(Error::format(format!("{prefix}[{i}].name"), format!("duplicate tensor {}", t.name)));
        }
        tensors.push(t);
    }
    Ok(tensors)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let floats: usize = self.tensors.iter().chain(&self.velocity).map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(64 + 4 * floats);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            write_tensor(&mut out, t);
        }
        for m in self.means {
            out.extend_from_slice(&m.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&(self.velocity.len() as u32).to_le_bytes());
        for t in &self.velocity {
            write_tensor(&mut out, t);
        }
        out
    }

    /// Parses a weight file. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("magic", format!("expected \"FCNW\", found {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let count = r.u32("tensor_count")? as usize;
        let tensors = read_tensors(&mut r, count, "tensor")?;
        let means = [r.f32("means")?, r.f32("means")?, r.f32("means")?];
        let vcount = r.u32("velocity_count")? as usize;
        let velocity = read_tensors(&mut r, vcount, "velocity")?;
        if r.remaining() != 0 {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            tensors,
            means,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn from_model<T: Scalar>(model: &FcnModel<T>, state: Option<&SgdState<T>>) -> Self {
        let params = model.params();
        let named = |name: &str, dims: Vec<usize>, t: &Tensor<T>| NamedTensor {
            name: name.to_string(),
            dims,
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        };
        let tensors = params
            .iter()
            .map(|p| named(p.name(), p.logical_dims(), p.value()))
            .collect();
        let velocity = state
            .map(|s| {
                params
                    .iter()
                    .zip(s.velocity())
                    .map(|(p, v)| named(p.name(), p.logical_dims(), v))
                    .collect()
            })
            .unwrap_or_default();
        Checkpoint {
            tensors,
            means: model.means,
            velocity,
        }
    }

    /// Recovers stage and fc widths from the stored kernel shapes.
    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        let out_channels = |name: &str| -> Result<usize> {
            self.tensor(name)
                .map(|t| t.dims[0])
                .ok_or_else(|| Error::Import(format!("missing {name}")))
        };
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        for s in 1..=STAGE_COUNT {
            let mut widths = Vec::new();
            while let Some(t) = self.tensor(&format!("stage{s}.conv{}.weight", widths.len() + 1)) {
                widths.push(t.dims[0]);
            }
            if widths.is_empty() {
                return Err(Error::Import(format!("missing stage{s}.conv1.weight")));
            }
            stages.push(widths);
        }
        let fc = [out_channels("fc6.weight")?, out_channels("fc7.weight")?];
        let cfg = ArchitectureConfig::with_widths(stages, fc);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the file; they keep their current values.
    pub missing: Vec<String>,
}

/// Copies stored tensors into `model`. Unknown names and shape mismatches are
/// always errors; missing names are errors unless `permissive` is set.
pub fn import_weights<T: Scalar>(model: &mut FcnModel<T>, ckpt: &Checkpoint, permissive: bool) -> Result<ImportReport> {
    let unknown: Vec<&str> = ckpt
        .tensors
        .iter()
        .filter(|t| model.params().id(&t.name).is_none())
        .map(|t| t.name.as_str())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Import(format!("unknown tensor names: {}", unknown.join(", "))));
    }
    let mut staged = Vec::with_capacity(ckpt.tensors.len());
    for t in &ckpt.tensors {
        let id = model.params().id(&t.name).expect("checked above");
        let expected = model.params().get(id).shape();
        let shape = t.shape()?;
        if shape != expected {
            return Err(Error::Import(format!("{}: stored {shape}, model expects {expected}", t.name)));
        }
        let data = t.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        staged.push((id, Tensor::from_vec(shape, data)?));
    }
    let present: HashSet<&str> = ckpt.tensors.iter().map(|t| t.name.as_str()).collect();
    let missing: Vec<String> = model
        .params()
        .iter()
        .map(|p| p.name().to_string())
        .filter(|n| !present.contains(n.as_str()))
        .collect();
    if !missing.is_empty() && !permissive {
        return Err(Error::Import(format!("missing tensors: {}", missing.join(", "))));
    }
    let mut loaded = Vec::with_capacity(staged.len());
    for (id, value) in staged {
        let p = model.params_mut().get_mut(id);
        loaded.push(p.name().to_string());
        p.set_value(value)?;
    }
    Ok(ImportReport { loaded, missing })
}

/// Rebuilds a model (and optimizer state, when stored) from a checkpoint.
pub fn restore_model<T: Scalar>(ckpt: &Checkpoint) -> Result<(FcnModel<T>, Option<SgdState<T>>)> {
    let cfg = ckpt.architecture()?;
    let mut model = FcnModel::<T>::build(cfg, 0)?;
    import_weights(&mut model, ckpt, false)?;
    model.means = ckpt.means;
    let state = if ckpt.velocity.is_empty() {
        None
    } else {
        let params = model.params();
        if ckpt.velocity.len() != params.len() {
            return Err(Error::Import(format!(
                "{} velocity tensors for {} parameters",
                ckpt.velocity.len(),
                params.len()
            )));
        }
        let mut velocity = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(&ckpt.velocity) {
            let shape = v.shape()?;
            if v.name != p.name() || shape != p.shape() {
                return Err(Error::Import(format!(
                    "velocity {} {shape} does not match parameter {} {}",
                    v.name,
                    p.name(),
                    p.shape()
                )));
            }
            let data = v.data.iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
            velocity.push(Tensor::from_vec(shape, data)?);
        }
        Some(SgdState::from_velocity(velocity))
    };
    Ok((model, state))
}

pub fn save_checkpoint<T: Scalar>(model: &FcnModel<T>, state: Option<&SgdState<T>>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, state).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(FcnModel<f32>, Option<SgdState<f32>>)> {
    restore_model(&Checkpoint::load(path)?)
}
