//! `WSEG` checkpoint files.
//!
//! Layout (integers little-endian): magic `WSEG`, `u32` format version,
//! `u32` length plus UTF-8 config echo, `u32` record count, then per record
//! `u32` name length, name, `u32` rank, `rank` x `u64` dims and the raw
//! `f64` values.

use std::fs;
use std::path::Path;

use ssnet_core::net::{init_params, ParamKind, ParamStore};
use ssnet_core::{Error as CoreError, Tensor};

use crate::config::RunConfig;
use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"WSEG";
pub const VERSION: u32 = 1;

/// A trained network: its configuration, the epoch it was taken after and
/// its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore,
}

/// Running statistics and folded constants are not trained.
fn kind_of(name: &str) -> ParamKind {
    let buffer = [".bn.mean", ".bn.var", ".pool_scale", ".pool_shift"];
    if buffer.iter().any(|s| name.ends_with(s)) {
        ParamKind::Buffer
    } else {
        ParamKind::Trainable
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let echo = format!("checkpoint_epoch={}\n{}", self.epoch, self.config.to_text());
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            // Tensors are rank 4; trailing unit dims of vectors and
            // scalars are dropped on disk.
            let shape = e.value.shape();
            let rank = match (e.value.len(), shape) {
                (_, [1, 1, 1, 1]) => 0,
                (n, [m, 1, 1, 1]) if n == m => 1,
                _ => 4,
            };
            out.extend_from_slice(&(rank as u32).to_le_bytes());
            for &d in &shape[..rank] {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(format_err(path, "not a WSEG checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let echo = std::str::from_utf8(r.take(n)?).map_err(|e| format_err(path, format!("config echo: {e}")))?;
        let (first, rest) = echo.split_once('\n').unwrap_or((echo, ""));
        let epoch = first
            .strip_prefix("checkpoint_epoch=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format_err(path, "config echo lacks checkpoint_epoch"))?;
        let config = RunConfig::parse(rest).map_err(|e| format_err(path, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format_err(path, format!("record name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(format_err(path, format!("{name}: rank {rank} > 4")));
            }
            let mut shape = [1usize; 4];
            for d in shape.iter_mut().take(rank) {
                *d = usize::try_from(r.u64()?).map_err(|_| format_err(path, format!("{name}: dimension too large")))?;
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| format_err(path, "record too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
                .collect();
            let value = Tensor::from_vec(shape, data)?;
            if params.contains(&name) {
                return Err(format_err(path, format!("duplicate record {name}")));
            }
            params.insert(&name, kind_of(&name), value);
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, epoch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    /// Loads and checks that the parameters match the configured network.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let ck = Self::from_bytes(&bytes, path)?;
        ck.check_structure()?;
        Ok(ck)
    }

    /// Names and shapes must equal those of a freshly initialized network.
    pub fn check_structure(&self) -> Result<()> {
        let expect = init_params(&self.config.model.encoder, 0)?;
        let mismatch = |msg: String| Error::Core(CoreError::Structural(msg));
        for e in expect.entries() {
            let got = self
                .params
                .get(&e.name)
                .map_err(|_| mismatch(format!("checkpoint lacks {}", e.name)))?;
            if got.shape() != e.value.shape() {
                return Err(mismatch(format!(
                    "{}: checkpoint shape {:?}, config expects {:?}",
                    e.name,
                    got.shape(),
                    e.value.shape()
                )));
            }
        }
        if let Some(extra) = self.params.entries().iter().find(|e| !expect.contains(&e.name)) {
            return Err(mismatch(format!("checkpoint has unexpected {}", extra.name)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
