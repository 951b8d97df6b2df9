//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   4 bytes  "STNO"
//! version u32      currently 1
//! hdr_len u32      length of the JSON header
//! header  JSON     { "config": ModelConfig, "step": u64, "mode": str }
//! count   u32      number of named tensors
//! tensor  repeated:
//!   name_len u16, name (utf8)
//!   ndim u8, dims u32 × ndim
//!   data f32 LE × prod(dims)
//! ```
//! Model parameters use their visitation names; Adam moments, when present,
//! ride along as `opt.m.<name>` / `opt.v.<name>`.

use super::{ModelConfig, StnoModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"STNO";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    mode: String,
}

/// First/second Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    pub m: Vec<(String, Tensor<f32>)>,
    pub v: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub mode: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    pub fn build_model(&self) -> Result<StnoModel<f32>> {
        let mut model = StnoModel::new(self.config.clone(), 0)?;
        model.load_param_map(&self.params)?;
        Ok(model)
    }
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    out.write_all(name_bytes)?;
    out.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &StnoModel<f32>,
    step: u64,
    mode: &str,
    opt: Option<&OptState>,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        step,
        mode: mode.to_string(),
    })
    .map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    let params = model.param_map();
    let count = params.len()
        + opt.map_or(0, |o| o.m.len() + o.v.len());

    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    buf.write_all(&(header.len() as u32).to_le_bytes())?;
    buf.write_all(&header)?;
    buf.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in &params {
        write_tensor(&mut buf, name, t)?;
    }
    if let Some(o) = opt {
        for (name, t) in &o.m {
            write_tensor(&mut buf, &format!("opt.m.{name}"), t)?;
        }
        for (name, t) in &o.v {
            write_tensor(&mut buf, &format!("opt.v.{name}"), t)?;
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format { path: self.path.clone(), reason: "truncated".into() });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { data: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { path: r.path, reason: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            path: r.path,
            reason: format!("unsupported version {version}"),
        });
    }
    let hdr_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format { path: path.display().to_string(), reason: "bad name".into() })?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt_m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt_v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    let opt = if opt_m.is_empty() && opt_v.is_empty() {
        None
    } else {
        Some(OptState { m: opt_m, v: opt_v })
    };
    Ok(Checkpoint { config: header.config, step: header.step, mode: header.mode, params, opt })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stno");
        let model = StnoModel::<f32>::new(ModelConfig::tiny(), 11).unwrap();
        save_checkpoint(&path, &model, 42, "fixed", None).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.mode, "fixed");
        assert_eq!(ck.config, model.config);
        let rebuilt = ck.build_model().unwrap();
        for ((n0, t0), (n1, t1)) in model.param_map().iter().zip(rebuilt.param_map().iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stno");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stno");
        let model = StnoModel::<f32>::new(ModelConfig::tiny(), 11).unwrap();
        let opt = OptState {
            m: vec![("proj.in.w".into(), Tensor::full(&[2, 2], 0.5))],
            v: vec![("proj.in.w".into(), Tensor::full(&[2, 2], 0.25))],
        };
        save_checkpoint(&path, &model, 1, "fixed", Some(&opt)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let loaded = ck.opt.unwrap();
        assert_eq!(loaded.m[0].1.data(), &[0.5; 4]);
        assert_eq!(loaded.v[0].1.data(), &[0.25; 4]);
    }
}
