//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`: the magic `WSOL`, a format
//! version and a tensor count, then per tensor its name length, name bytes,
//! rank, dimensions and `f64` data. Model configuration, completed epochs
//! and the shuffle seed travel as `meta.*` tensors. A momentum buffer is
//! stored under its parameter name plus [`VELOCITY_SUFFIX`].

use std::fs;
use std::path::Path;

use super::TrainState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WsolNet};

pub const MAGIC: &[u8; 4] = b"WSOL";
pub const VERSION: u32 = 1;
pub const VELOCITY_SUFFIX: &str = ".momentum";

const META_MODEL: &str = "meta.model";
const META_EPOCH: &str = "meta.epoch";
const META_SEED: &str = "meta.seed";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Parameters in network order.
    pub params: Vec<(String, Tensor)>,
    /// Momentum buffers, parallel to `params`.
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub seed: u64,
}

// u64 seeds do not fit an f64 mantissa, so they are split into halves.
fn split(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join(lo: f64, hi: f64) -> u64 {
    (lo as u64) | ((hi as u64) << 32)
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            model: state.net.config().clone(),
            params: state.net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            velocity: state.velocity.clone(),
            epoch: state.epoch,
            seed: state.seed,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let net = WsolNet::from_params(self.model, self.params)?;
        for (p, v) in net.params().iter().zip(&self.velocity) {
            if p.value.shape() != v.shape() {
                return Err(Error::Dimension(format!("momentum buffer for {} has shape {:?}", p.name, v.shape())));
            }
        }
        Ok(TrainState { net, velocity: self.velocity, epoch: self.epoch, seed: self.seed })
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let m = &self.model;
        let [slo, shi] = split(m.seed);
        let model = [m.input_size, m.num_classes, m.feature_channels, m.feature_stride, m.backbone_blocks]
            .map(|v| v as f64);
        let mut meta = model.to_vec();
        meta.extend([slo, shi]);
        let mut out = vec![
            (META_MODEL.to_string(), Tensor::new([meta.len()], meta).expect("length matches")),
            (META_EPOCH.to_string(), Tensor::scalar(self.epoch as f64)),
            (META_SEED.to_string(), Tensor::new([2], split(self.seed).to_vec()).expect("length matches")),
        ];
        out.extend(self.params.iter().cloned());
        for ((name, _), v) in self.params.iter().zip(&self.velocity) {
            out.push((format!("{name}{VELOCITY_SUFFIX}"), v.clone()));
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Errors name the field that failed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format!("version {version} is not supported (expected {VERSION})"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32(&format!("tensor {i} name length"))? as usize;
            let name = String::from_utf8(r.take(len, &format!("tensor {i} name"))?.to_vec())
                .map_err(|_| format!("tensor {i} name is not UTF-8"))?;
            let rank = r.u32(&format!("{name} rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("{name} dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, &format!("{name} data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Self::from_tensors(tensors)
    }

    fn from_tensors(tensors: Vec<(String, Tensor)>) -> std::result::Result<Self, String> {
        let mut it = tensors.into_iter();
        let mut meta = |want: &str, len: usize| -> std::result::Result<Vec<f64>, String> {
            match it.next() {
                Some((name, t)) if name == want && t.len() == len => Ok(t.into_data()),
                Some((name, _)) => Err(format!("expected {want}, found {name}")),
                None => Err(format!("missing {want}")),
            }
        };
        let m = meta(META_MODEL, 7)?;
        let epoch = meta(META_EPOCH, 1)?[0] as usize;
        let s = meta(META_SEED, 2)?;
        let model = ModelConfig {
            input_size: m[0] as usize,
            num_classes: m[1] as usize,
            feature_channels: m[2] as usize,
            feature_stride: m[3] as usize,
            backbone_blocks: m[4] as usize,
            seed: join(m[5], m[6]),
        };
        let rest: Vec<_> = it.collect();
        if rest.len() % 2 != 0 {
            return Err("parameter and momentum counts differ".into());
        }
        let (params, vel) = rest.split_at(rest.len() / 2);
        let mut velocity = Vec::with_capacity(vel.len());
        for ((name, _), (vname, v)) in params.iter().zip(vel) {
            if *vname != format!("{name}{VELOCITY_SUFFIX}") {
                return Err(format!("expected momentum for {name}, found {vname}"));
            }
            velocity.push(v.clone());
        }
        Ok(Checkpoint { model, params: params.to_vec(), velocity, epoch, seed: join(s[0], s[1]) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::load(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at {field}"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}
