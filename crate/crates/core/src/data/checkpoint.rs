//! Checkpoint container v1.
//!
//! ```text
//! "MACGCKPT" | u32 version | u32 section count
//! per section: u16 name length | name | u64 payload length | payload | u32 crc32(payload)
//! ```
//! All integers little-endian. Sections: `model.spec` (TOML), `model.params`
//! (tensors), `meta` (JSON), optionally `norm` (tensors) and
//! `optim.<name>` (JSON).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Normalization;
use crate::curvature::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// weight data then optional bias, per parameter block
    pub params: Vec<(Tensor, Option<Tensor>)>,
    pub optimizer: Option<Optimizer>,
    pub norm: Option<Normalization>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        optimizer: Option<&Optimizer>,
        norm: Option<&Normalization>,
        meta: CheckpointMeta,
    ) -> Result<Self> {
        let mut params = Vec::new();
        for (i, info) in model.blocks().iter().enumerate() {
            let (w, b) = model.block_params(i)?;
            params.push((
                Tensor::new(vec![info.out, info.inp], w.to_vec())?,
                b.map(|b| Tensor::vector(b.to_vec())),
            ));
        }
        Ok(Checkpoint {
            spec: model.spec().clone(),
            params,
            optimizer: optimizer.cloned(),
            norm: norm.cloned(),
            meta,
        })
    }

    pub fn restore_model(&self) -> Result<Model> {
        let mut m = Model::new(self.spec.clone(), 0)?;
        if m.blocks().len() != self.params.len() {
            return Err(Error::Incompatible(
                "parameter count does not match model spec".into(),
            ));
        }
        for (i, (w, b)) in self.params.iter().enumerate() {
            let (dw, db) = m.block_params_mut(i)?;
            if dw.len() != w.len() {
                return Err(Error::Incompatible(format!(
                    "block {i} weight size differs from spec"
                )));
            }
            dw.copy_from_slice(w.data());
            match (db, b) {
                (Some(d), Some(s)) if d.len() == s.len() => d.copy_from_slice(s.data()),
                (None, None) => {}
                _ => {
                    return Err(Error::Incompatible(format!(
                        "block {i} bias differs from spec"
                    )))
                }
            }
        }
        Ok(m)
    }

    /// The stored optimizer state, refusing state written by another optimizer.
    pub fn optimizer_for(&self, kind: OptimizerKind) -> Result<Option<Optimizer>> {
        match &self.optimizer {
            None => Ok(None),
            Some(o) if o.kind() == kind => Ok(Some(o.clone())),
            Some(o) => Err(Error::Incompatible(format!(
                "checkpoint holds {} state, run uses {kind}",
                o.kind()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(String, Vec<u8>)> = Vec::new();
        sections.push((
            "model.spec".into(),
            toml::to_string(&self.spec)
                .map_err(|e| Error::Config(e.to_string()))?
                .into_bytes(),
        ));
        let mut p = Vec::new();
        p.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (w, b) in &self.params {
            write_tensor(&mut p, w)?;
            p.push(b.is_some() as u8);
            if let Some(b) = b {
                write_tensor(&mut p, b)?;
            }
        }
        sections.push(("model.params".into(), p));
        sections.push(("meta".into(), serde_json::to_vec(&self.meta)?));
        if let Some(n) = &self.norm {
            let mut p = Vec::new();
            write_tensor(&mut p, &Tensor::vector(n.mean.clone()))?;
            write_tensor(&mut p, &Tensor::vector(n.std.clone()))?;
            sections.push(("norm".into(), p));
        }
        if let Some(o) = &self.optimizer {
            sections.push((format!("optim.{}", o.kind()), serde_json::to_vec(o)?));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let count = cur.u32()?;
        let (mut spec, mut params, mut meta, mut norm, mut optimizer) =
            (None, None, None, None, None);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::parse(name_at as u64, "section name is not UTF-8"))?
                .to_string();
            let len = cur.u64()? as usize;
            let payload_at = cur.pos as u64;
            let payload = cur.take(len)?;
            let crc = cur.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::parse(
                    payload_at,
                    format!("section {name:?} fails its CRC32"),
                ));
            }
            let bad = |e: String| Error::parse(payload_at, format!("section {name:?}: {e}"));
            match name.as_str() {
                "model.spec" => {
                    let text = std::str::from_utf8(payload).map_err(|e| bad(e.to_string()))?;
                    spec = Some(toml::from_str::<ModelSpec>(text).map_err(|e| bad(e.to_string()))?);
                }
                "model.params" => {
                    let mut r = payload;
                    let mut b4 = [0u8; 4];
                    std::io::Read::read_exact(&mut r, &mut b4).map_err(|e| bad(e.to_string()))?;
                    let n = u32::from_le_bytes(b4);
                    let mut v = Vec::with_capacity(n as usize);
                    for _ in 0..n {
                        let w = read_tensor(&mut r)?;
                        let mut flag = [0u8; 1];
                        std::io::Read::read_exact(&mut r, &mut flag)
                            .map_err(|e| bad(e.to_string()))?;
                        let b = if flag[0] == 1 {
                            Some(read_tensor(&mut r)?)
                        } else {
                            None
                        };
                        v.push((w, b));
                    }
                    params = Some(v);
                }
                "meta" => {
                    meta = Some(serde_json::from_slice(payload).map_err(|e| bad(e.to_string()))?)
                }
                "norm" => {
                    let mut r = payload;
                    let mean = read_tensor(&mut r)?.into_data();
                    let std = read_tensor(&mut r)?.into_data();
                    norm = Some(Normalization { mean, std });
                }
                n if n.starts_with("optim.") => {
                    let o: Optimizer =
                        serde_json::from_slice(payload).map_err(|e| bad(e.to_string()))?;
                    if format!("optim.{}", o.kind()) != n {
                        return Err(Error::Incompatible(format!(
                            "section {n} holds {} state",
                            o.kind()
                        )));
                    }
                    optimizer = Some(o);
                }
                other => log::warn!("ignoring unknown checkpoint section {other:?}"),
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(
                cur.pos as u64,
                "trailing bytes after last section",
            ));
        }
        Ok(Checkpoint {
            spec: spec.ok_or_else(|| Error::parse(0, "checkpoint lacks model.spec"))?,
            params: params.ok_or_else(|| Error::parse(0, "checkpoint lacks model.params"))?,
            optimizer,
            norm,
            meta: meta.unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.pos as u64, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
