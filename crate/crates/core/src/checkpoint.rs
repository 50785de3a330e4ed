//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STMU"            magic
//! u32               version (1)
//! u32               config byte length L
//! L bytes           UTF-8 `key=value` lines of the model config
//! u32               parameter count
//! per parameter:
//!   u16             name length, then the UTF-8 name
//!   u8              rank, then one u32 per dimension
//!   f32 × numel     values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StmUNet};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"STMU";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<StoredParam>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(config: &ModelConfig, store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    let cfg: String = config.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u16).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.value.rank() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("ran out of data reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::ParamMismatch(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::VersionMismatch("missing STMU magic".into()));
    }
    c.take(4, "magic")?;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch(format!("file version {version}, supported {VERSION}")));
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg_text = c.utf8(cfg_len, "config block")?;
    let mut config = ModelConfig::default();
    for line in cfg_text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad config line `{line}` in checkpoint")))?;
        config.set(k.trim(), v)?;
    }

    let count = c.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = c.utf8(name_len, "parameter name")?.to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.push(StoredParam {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(Checkpoint { config, params })
}

impl Checkpoint {
    /// Copies stored values into `store`, which must hold the same names in
    /// the same order with the same shapes.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (i, p) in store.iter().enumerate() {
            let Some(s) = self.params.get(i) else {
                return Err(Error::ParamMismatch(format!("checkpoint lacks parameter `{}`", p.name)));
            };
            if s.name != p.name {
                return Err(Error::ParamMismatch(format!(
                    "expected parameter `{}`, checkpoint has `{}`",
                    p.name, s.name
                )));
            }
            if s.value.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: s.value.shape().to_vec(),
                });
            }
        }
        if self.params.len() != store.len() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, s) in store.iter_mut().zip(&self.params) {
            p.value = s.value.cast();
            p.adam_m = p.value.zeros_like();
            p.adam_v = p.value.zeros_like();
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(model: &StmUNet<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model.config(), model.params(), std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rebuilds the model from the stored config and restores its weights.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<StmUNet<T>> {
    let ck = read_checkpoint(path)?;
    let mut model = StmUNet::build(ck.config.clone())?;
    ck.apply(model.params_mut())?;
    Ok(model)
}

/// Restores weights into an already built model of a possibly different
/// config; mismatches name the first offending parameter.
pub fn load_into<T: Scalar>(model: &mut StmUNet<T>, path: &Path) -> Result<()> {
    read_checkpoint(path)?.apply(model.params_mut())
}
