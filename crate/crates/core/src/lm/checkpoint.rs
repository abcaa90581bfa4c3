//! `CKP1` checkpoint files.
//!
//! Layout (little-endian): magic `CKP1`; `u32` byte length of a UTF-8 block
//! of `key=value` lines; `u32` block count; then per block `u32` name
//! length, name bytes, `u32` rank, `u32` dims, and row-major f32 values.

use std::path::Path;

use super::params::{Param, ParamStore};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        let text: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        w.u32(text.len() as u32);
        w.bytes(text.as_bytes());
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.u32(p.name.len() as u32);
            w.bytes(p.name.as_bytes());
            w.u32(2);
            w.u32(p.rows as u32);
            w.u32(p.cols as u32);
            w.f32s(&p.data);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("config line without '=': {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut blocks: Vec<Param<f32>> = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(nlen)?)
                .map_err(|_| Error::format(path, "block name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::format(path, format!("block {name}: unsupported rank {rank}"))),
            };
            let data = r.f32s(rows * cols)?;
            blocks.push(Param {
                name,
                rows,
                cols,
                data,
                decay: false,
            });
        }
        r.finish()?;
        let mut params = ParamStore::new();
        params.extend_raw(blocks);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        write_file(path, &self.to_bytes(), force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
