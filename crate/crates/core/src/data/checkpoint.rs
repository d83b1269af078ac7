//! Little-endian container for model weights, center buffers and the
//! configuration.
//!
//! ```text
//! "CATA"  u32 version
//! u32 config_len   config as key=value lines (UTF-8)
//! u32 entry_count
//!   per entry: u32 name_len, name, u8 dtype (0 = f32), u32 ndim,
//!              u64 dims[ndim], u64 byte offset into the payload
//! u64 payload_len  payload
//! ```
//!
//! Center buffers are stored as `centers.<group>` and only once
//! initialized; a missing entry loads as an uninitialized buffer.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::params::{flatten, rebuild};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CATA";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn center_name(i: usize) -> String {
    format!("centers.{i}")
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut entries = flatten(&model.weights);
    for (i, c) in model.centers.iter().enumerate() {
        if c.is_initialized() {
            entries.push((center_name(i), c.centers().clone()));
        }
    }
    let config = model.config.to_text();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let config = ModelConfig::from_text(&r.string(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;

    let count = r.u32("entry count")? as usize;
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = r.string(n, "entry name")?;
        if r.u8("dtype")? != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.len("offset")?;
        if entries.insert(name.clone(), Entry { shape, offset }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    let payload_len = r.len("payload length")?;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }

    let mut read = |name: &str| -> Result<Option<Tensor>> {
        let Some(e) = entries.remove(name) else {
            return Ok(None);
        };
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel.and_then(|n| n.checked_mul(4));
        let end = bytes
            .and_then(|b| e.offset.checked_add(b))
            .filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("{name}: extends past the payload")));
        };
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&e.shape, data)
            .map(Some)
            .map_err(|err| Error::Checkpoint(format!("{name}: {err}")))
    };

    let mut model = Model::new(config, 0)?;
    let mut leaves = Vec::new();
    for (name, _) in flatten(&model.weights) {
        leaves.push(read(&name)?.ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?);
    }
    model.weights = rebuild(&model.weights, leaves).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for i in 0..model.centers.len() {
        if let Some(c) = read(&center_name(i))? {
            model.centers[i]
                .initialize(c)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", center_name(i))))?;
        }
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unknown entry {name}")));
    }
    Ok(model)
}

pub fn checkpoint_save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn checkpoint_load(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&buf)
}
