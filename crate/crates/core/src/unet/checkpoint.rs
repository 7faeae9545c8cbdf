//! Binary checkpoint format.
//!
//! ```text
//! "CSCK" | version u32 | input_size u32 | in_channels u32 | base u32 | cap u32
//! | seed u64 | init kind u8 (0 uniform, 1 fan-in, 2 he) | init scale f64 | epoch u64 | step u64
//! | tensor count u32 | tensors... | loss count u32 | losses f64...
//! | crc32 u32 (over everything before it)
//!
//! tensor: name_len u16 | name utf8 | dtype u8 (4 = f32, 8 = f64) | ndim u8
//!         | dims u32... | data little-endian
//! ```
//!
//! All integers are little-endian. Network tensors come first, in
//! [`Weights::views`] order; optimizer state may follow under other names.

use std::fs;
use std::path::Path;

use super::{InitMode, ModelParams, NetworkConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn of<T: Scalar>(data: &[T]) -> Self {
        if T::BYTES == 4 {
            TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            TensorData::F64(data.iter().map(|v| v.as_f64()).collect())
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new<T: Scalar>(name: impl Into<String>, dims: Vec<usize>, data: &[T]) -> Self {
        Self { name: name.into(), dims, data: TensorData::of(data) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub cfg: NetworkConfig,
    pub seed: u64,
    pub init: InitMode,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    /// Mean loss per completed epoch.
    pub losses: Vec<f64>,
}

impl CheckpointFile {
    pub fn from_params<T: Scalar>(params: &ModelParams<T>) -> Self {
        let tensors = params
            .weights()
            .views()
            .into_iter()
            .map(|v| NamedTensor::new(v.name, v.dims, v.data))
            .collect();
        Self {
            cfg: *params.config(),
            seed: params.seed(),
            init: params.init_mode(),
            epoch: 0,
            step: 0,
            tensors,
            losses: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the network parameters from the leading tensors.
    pub fn to_params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let mut weights = Weights::<T>::zeros(&self.cfg);
        let expected: Vec<(String, Vec<usize>)> =
            weights.views().into_iter().map(|v| (v.name, v.dims)).collect();
        if self.tensors.len() < expected.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, network needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, dims), (slot, t)) in expected.iter().zip(weights.slices_mut().into_iter().zip(&self.tensors)) {
            if &t.name != name || &t.dims != dims {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match network tensor {name} {dims:?}",
                    t.name, t.dims
                )));
            }
            slot.copy_from_slice(&t.data.to_vec::<T>());
        }
        ModelParams::from_weights(self.cfg, self.seed, self.init, weights)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for v in [self.cfg.input_size, self.cfg.in_channels, self.cfg.base_channels, self.cfg.channel_cap] {
            put_u32(&mut out, to_u32(v, "config field")?);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        let (kind, scale) = match self.init {
            InitMode::Uniform { scale } => (0u8, scale),
            InitMode::FanIn => (1u8, 0.0),
            InitMode::He => (2u8, 0.0),
        };
        out.push(kind);
        out.extend_from_slice(&scale.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, to_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(Error::Length { expected, found: t.data.len() });
            }
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::format("tensor name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let ndim = u8::try_from(t.dims.len()).map_err(|_| Error::format("too many dims"))?;
            match &t.data {
                TensorData::F32(_) => out.push(4),
                TensorData::F64(_) => out.push(8),
            }
            out.push(ndim);
            for &d in &t.dims {
                put_u32(&mut out, to_u32(d, "dim")?);
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        put_u32(&mut out, to_u32(self.losses.len(), "loss count")?);
        for l in &self.losses {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("checkpoint too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Cursor { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let cfg = NetworkConfig {
            input_size: r.u32()? as usize,
            in_channels: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            channel_cap: r.u32()? as usize,
        };
        cfg.validate()?;
        let seed = r.u64()?;
        let kind = r.u8()?;
        let scale = r.f64()?;
        let init = match kind {
            0 => InitMode::Uniform { scale },
            1 => InitMode::FanIn,
            2 => InitMode::He,
            k => return Err(Error::format(format!("unknown init kind {k}"))),
        };
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("tensor name is not utf-8"))?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = match dtype {
                4 => TensorData::F32(r.take(len * 4)?.chunks_exact(4).map(f32::read_le).collect()),
                8 => TensorData::F64(r.take(len * 8)?.chunks_exact(8).map(f64::read_le).collect()),
                d => return Err(Error::format(format!("unknown dtype {d} for {name}"))),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        let n_loss = r.u32()? as usize;
        let losses = (0..n_loss).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { cfg, seed, init, epoch, step, tensors, losses })
    }

    /// Writes via a temporary sibling file and a rename, so a crash never
    /// leaves a truncated checkpoint behind.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("csck.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

pub fn save_params<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    CheckpointFile::from_params(params).write(path)
}

/// Loads parameters, failing with [`Error::Config`] if `expected` is given
/// and differs from the stored config.
pub fn load_params<T: Scalar>(path: impl AsRef<Path>, expected: Option<&NetworkConfig>) -> Result<ModelParams<T>> {
    let file = CheckpointFile::read(path)?;
    if let Some(cfg) = expected {
        if *cfg != file.cfg {
            return Err(Error::Config(format!("checkpoint was built for {:?}, expected {:?}", file.cfg, cfg)));
        }
    }
    file.to_params()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
