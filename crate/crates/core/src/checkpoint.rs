//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "CMFDCKPT"
//! version        u32      FORMAT_VERSION
//! config_len     u64
//! config         config_len bytes of UTF-8 `key = value` text
//! training_step  u64
//! n_arrays       u32
//! per array, in name order:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   data     numel × element bytes
//! sha256         32 bytes over everything above
//! ```
//!
//! Loading verifies the digest first, then that every array matches the
//! shapes the stored configuration declares.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMFDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub config: ModelConfig,
    pub training_step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.to_kv();
        b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&self.training_step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(0);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("integrity check failed (digest mismatch)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let trunc = || bad("truncated");
        let cfg_len = r.u64().ok_or_else(trunc)? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len).ok_or_else(trunc)?)
            .map_err(|_| bad("config block is not UTF-8"))?;
        let config = ModelConfig::from_kv(cfg_text)?;
        let training_step = r.u64().ok_or_else(trunc)?;
        let n = r.u32().ok_or_else(trunc)?;
        let mut params = Params::new();
        for _ in 0..n {
            let len = r.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(trunc)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1).ok_or_else(trunc)?[0];
            let ndim = r.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(trunc)? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = match dtype {
                0 => r
                    .take(numel * 4)
                    .ok_or_else(trunc)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                1 => r
                    .take(numel * 8)
                    .ok_or_else(trunc)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                    .collect(),
                d => return Err(bad(&format!("unknown dtype tag {d}"))),
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        let decls = Model::new(&config)?.declarations();
        params.check_against(&decls).map_err(|m| bad(&m))?;
        Ok(Checkpoint {
            params,
            config,
            training_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Write `params` and `config` (training step 0).
pub fn save_checkpoint(params: &Params<f32>, config: &ModelConfig, path: &Path) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        config: config.clone(),
        training_step: 0,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Params<f32>, ModelConfig)> {
    let c = Checkpoint::load(path)?;
    Ok((c.params, c.config))
}
