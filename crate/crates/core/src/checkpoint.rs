//! Checkpoint file: a two-line text header (magic, config JSON) followed by
//! length-prefixed little-endian f64 tensor blocks.
//!
//! Block layout: `u32` name length, UTF-8 name, `u32` rank, `u64` per dim,
//! `u64` element count, then the elements.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamSet, Tensor};
use crate::protoloss::PrototypeRegistry;

const MAGIC: &str = "PROTON-CHECKPOINT 1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    registry_momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub registry: PrototypeRegistry,
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let s = std::str::from_utf8(&rest[..nl]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.pos += nl + 1;
        Ok(s)
    }

    fn block(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = self.u64()? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(Error::Checkpoint(format!(
                "block {name}: shape {shape:?} does not hold {n} values"
            )));
        }
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("block too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn new(model: Model, registry: PrototypeRegistry) -> Self {
        Checkpoint { model, registry }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            registry_momentum: self.registry.momentum(),
        };
        let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&header)?).into_bytes();
        for (name, t) in self.model.params.iter() {
            put_block(&mut out, &format!("param/{name}"), t.shape(), t.data());
        }
        if let Some(enc) = self.model.encoder() {
            for (b, (mean, var)) in enc.running_stats().into_iter().enumerate() {
                put_block(&mut out, &format!("bn/{b}/mean"), &[mean.len()], mean);
                put_block(&mut out, &format!("bn/{b}/var"), &[var.len()], var);
            }
        }
        for (class, v, count) in self.registry.iter() {
            put_block(&mut out, &format!("registry/{class}"), &[v.len()], v);
            put_block(&mut out, &format!("registry_count/{class}"), &[1], &[count as f64]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic line)".into()));
        }
        let header: Header = serde_json::from_str(r.line()?)?;
        let mut params = ParamSet::new();
        let mut bn: Vec<(usize, bool, Vec<f64>)> = Vec::new();
        let mut reg_vecs = Vec::new();
        let mut reg_counts = std::collections::HashMap::new();
        while r.pos < bytes.len() {
            let (name, shape, data) = r.block()?;
            if let Some(p) = name.strip_prefix("param/") {
                params.add(p, Tensor::new(shape, data)?);
            } else if let Some(rest) = name.strip_prefix("bn/") {
                let (b, kind) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::Checkpoint(format!("bad block name {name}")))?;
                let b: usize = b
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad block name {name}")))?;
                bn.push((b, kind == "mean", data));
            } else if let Some(c) = name.strip_prefix("registry_count/") {
                reg_counts.insert(c.to_string(), data.first().copied().unwrap_or(0.0) as u64);
            } else if let Some(c) = name.strip_prefix("registry/") {
                reg_vecs.push((c.to_string(), data));
            } else {
                return Err(Error::Checkpoint(format!("unknown block {name}")));
            }
        }
        let mut model = Model::from_params(header.model, params)?;
        if let Some(enc) = model.encoder_mut() {
            let blocks = enc.running_stats().len();
            for b in 0..blocks {
                let find = |mean: bool| {
                    bn.iter()
                        .find(|(i, m, _)| *i == b && *m == mean)
                        .map(|(_, _, d)| d.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("missing running stats of block {b}")))
                };
                enc.set_running_stats(b, find(true)?, find(false)?)?;
            }
        }
        let mut registry = PrototypeRegistry::new(header.registry_momentum)?;
        for (c, v) in reg_vecs {
            let count = reg_counts.get(&c).copied().unwrap_or(0);
            registry.restore(ClassId(c), v, count)?;
        }
        Ok(Checkpoint { model, registry })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks that the stored architecture matches `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let got = ck.model.config();
        let dims = |c: &ModelConfig| {
            (
                c.encoder.as_ref().map(|e| (e.input_hw, e.channels.clone())),
                c.pgnn.layer_dims.clone(),
                c.pgnn.projection,
            )
        };
        if dims(got) != dims(expected) {
            return Err(Error::WidthMismatch {
                checkpoint: format!("{:?}", dims(got)),
                config: format!("{:?}", dims(expected)),
            });
        }
        Ok(ck)
    }
}
