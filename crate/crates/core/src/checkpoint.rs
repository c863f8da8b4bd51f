//! Binary checkpoint format.
//!
//! Layout (little-endian): `"ACRN"`, version `u32`, model config as a
//! `u32`-length-prefixed TOML string, normalization stats as four `f64`
//! (mean0 mean1 std0 std1), epoch `u32`, tensor count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, dims `u32` each,
//! `f32` values. Batch-norm running statistics are stored as tensors named
//! `l{i}.bn.running_mean` / `l{i}.bn.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::model::{Acrnn, AcrnnConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACRN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus everything needed to run it on new audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Acrnn<f32>,
    pub norm: NormStats,
    pub epoch: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn config(&self) -> &AcrnnConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let toml =
            toml::to_string(&self.model.config).map_err(|e| Error::Config(format!("serializing model config: {e}")))?;
        put_u32(&mut out, toml.len() as u32);
        out.extend_from_slice(toml.as_bytes());
        for v in [self.norm.mean[0], self.norm.mean[1], self.norm.std[0], self.norm.std[1]] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, (self.model.params.len() + 2 * self.model.bn.len()) as u32);
        for p in self.model.params.iter() {
            put_tensor(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
        }
        for (i, s) in self.model.bn.iter().enumerate() {
            put_tensor(
                &mut out,
                &format!("l{}.bn.running_mean", i + 1),
                &[s.mean.len()],
                &s.mean,
            );
            put_tensor(&mut out, &format!("l{}.bn.running_var", i + 1), &[s.var.len()], &s.var);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::corrupt(path, msg);
        let mut cur = Cursor {
            buf: bytes,
            pos: 0,
            path,
        };
        if cur.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.bytes(len)?).map_err(|_| corrupt("config is not UTF-8".into()))?;
        let config: AcrnnConfig = toml::from_str(text).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        let mut nv = [0f64; 4];
        for v in &mut nv {
            *v = f64::from_le_bytes(cur.bytes(8)?.try_into().unwrap());
        }
        let norm = NormStats {
            mean: [nv[0], nv[1]],
            std: [nv[2], nv[3]],
        };
        let epoch = cur.u32()?;
        let count = cur.u32()? as usize;
        let mut model = Acrnn::<f32>::new(config).map_err(|e| corrupt(e.to_string()))?;
        let mut seen = 0usize;
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.bytes(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = cur
                .bytes(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let slot: &mut [f32] = if let Some(p) = model.params.get_mut(&name) {
                if p.tensor.shape() != shape.as_slice() {
                    return Err(corrupt(format!(
                        "{name}: shape {shape:?}, expected {:?}",
                        p.tensor.shape()
                    )));
                }
                p.tensor.data_mut()
            } else if let Some((layer, kind)) = parse_running(&name) {
                let s = model
                    .bn
                    .get_mut(layer)
                    .ok_or_else(|| corrupt(format!("unknown tensor {name}")))?;
                let v = if kind == "mean" { &mut s.mean } else { &mut s.var };
                if v.len() != n || rank != 1 {
                    return Err(corrupt(format!("{name}: {n} values for {} channels", v.len())));
                }
                v
            } else {
                return Err(corrupt(format!("unknown tensor {name}")));
            };
            slot.copy_from_slice(&data);
            seen += 1;
        }
        if seen != model.params.len() + 2 * model.bn.len() {
            return Err(corrupt(format!(
                "checkpoint has {seen} tensors, model needs {}",
                model.params.len() + 2 * model.bn.len()
            )));
        }
        if cur.pos != bytes.len() {
            return Err(corrupt("trailing bytes after tensors".into()));
        }
        if model.params.iter().any(|p| !p.tensor.all_finite()) {
            return Err(corrupt("non-finite parameter values".into()));
        }
        Ok(Checkpoint { model, norm, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn parse_running(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix('l')?;
    let (layer, kind) = rest.split_once(".bn.running_")?;
    let layer: usize = layer.parse().ok()?;
    (layer >= 1 && (kind == "mean" || kind == "var")).then_some((layer - 1, kind))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.path, "truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}
