//! Model checkpoint container.
//!
//! ```text
//! magic    8 bytes   "WC2RCKPT"
//! version  u32       1
//! section  u32 length + UTF-8 tag ("stage1" or "stage2")
//! step     u64       optimiser steps taken
//! config   u32 length + UTF-8 TOML snapshot of the run configuration
//! count    u32       number of parameters
//! per parameter, in name order:
//!   name   u16 length + UTF-8
//!   ndim   u8
//!   dims   ndim × u32
//!   data   f32 little-endian
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"WC2RCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Stage1,
    Stage2,
}

impl Section {
    pub fn tag(self) -> &'static str {
        match self {
            Section::Stage1 => "stage1",
            Section::Stage2 => "stage2",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "stage1" => Some(Section::Stage1),
            "stage2" => Some(Section::Stage2),
            _ => None,
        }
    }
}

pub type Params = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub section: Section,
    pub step: u64,
    pub config: String,
    pub params: Params,
}

impl Checkpoint {
    pub fn from_store(section: Section, step: u64, config: String, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            section,
            step,
            config,
            params: store.export()?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(MAGIC);
        b.extend(VERSION.to_le_bytes());
        let tag = self.section.tag();
        b.extend((tag.len() as u32).to_le_bytes());
        b.extend(tag.as_bytes());
        b.extend(self.step.to_le_bytes());
        b.extend((self.config.len() as u32).to_le_bytes());
        b.extend(self.config.as_bytes());
        b.extend((self.params.len() as u32).to_le_bytes());
        for (name, (dims, data)) in &self.params {
            b.extend((name.len() as u16).to_le_bytes());
            b.extend(name.as_bytes());
            b.push(dims.len() as u8);
            for &d in dims {
                b.extend((d as u32).to_le_bytes());
            }
            for v in data {
                b.extend(v.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let corrupt = |reason: String| Error::Corrupt {
            id: "<checkpoint>".into(),
            reason,
        };
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(corrupt(format!("unexpected end of file at byte {pos}")));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(8)? != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let tag = String::from_utf8_lossy(take(n)?).to_string();
        let section = Section::from_tag(&tag).ok_or_else(|| corrupt(format!("unknown section `{tag}`")))?;
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config = String::from_utf8(take(n)?.to_vec()).map_err(|_| corrupt("config is not UTF-8".into()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut params = Params::new();
        for _ in 0..count {
            let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(take(n)?).to_string();
            let ndim = take(1)?[0] as usize;
            let dims: Vec<usize> = take(4 * ndim)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            let len: usize = dims.iter().product();
            let data = take(4 * len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, (dims, data));
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self {
            section,
            step,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks its section tag.
    pub fn load(path: &Path, expected: Section) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!(
                    "{} checkpoint `{}` not found; run `train --stage {}` first",
                    expected.tag(),
                    path.display(),
                    if expected == Section::Stage1 { 1 } else { 2 }
                ))
            } else {
                Error::io(path, e)
            }
        })?;
        let ck = Self::decode(&bytes)?;
        if ck.section != expected {
            return Err(Error::Config(format!(
                "`{}` holds a {} checkpoint, expected {}",
                path.display(),
                ck.section.tag(),
                expected.tag()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn roundtrip_and_section_check() {
        let store = ParamStore::new(3, DType::F32, false);
        let _ = crate::nn::Linear::new(&store.root().pp("lin"), 3, 2).unwrap();
        let ck = Checkpoint::from_store(Section::Stage1, 7, "seed = 1\n".into(), &store).unwrap();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/s1.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, Section::Stage1).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&path, Section::Stage2), Err(Error::Config(_))));
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none.ckpt"), Section::Stage1),
            Err(Error::Config(_))
        ));

        let other = ParamStore::new(9, DType::F32, false);
        let _ = crate::nn::Linear::new(&other.root().pp("lin"), 3, 2).unwrap();
        other.load(&back.params).unwrap();
        assert_eq!(other.export().unwrap(), store.export().unwrap());
        assert!(Checkpoint::decode(&ck.encode()[..30]).is_err());
    }
}
