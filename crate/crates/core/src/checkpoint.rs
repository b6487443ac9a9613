//! Binary checkpoint format.
//!
//! ```text
//! "CVTA" | version u32 = 1 | count u32
//! per entry: name_len u16 | name (UTF-8) | rank u8 | dims u32 * rank | f32 * numel
//! ```
//! All integers and floats little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CVTA";
const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Data(format!("{name}: rank {} too large", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Data(format!("{name}: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(self.origin, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], origin: &str) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0, origin };
    if c.take(4)? != MAGIC {
        return Err(Error::parse(origin, "bad magic, expected CVTA"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::parse(origin, format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::parse(origin, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::parse(origin, format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::parse(origin, "trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Every slot of `model` in visit order.
pub fn snapshot(model: &dyn ModuleRef) -> Vec<(String, Tensor)> {
    model.named().into_iter().collect()
}

/// Object-safe view used by the save/load helpers.
pub trait ModuleRef {
    fn named(&self) -> Vec<(String, Tensor)>;
    fn assign(&self, name: &str, t: Tensor) -> Result<()>;
}

impl<M: Module> ModuleRef for M {
    fn named(&self) -> Vec<(String, Tensor)> {
        self.slots().into_iter().map(|(n, s)| (n, s.get())).collect()
    }

    fn assign(&self, name: &str, t: Tensor) -> Result<()> {
        let slots = self.slots();
        let (_, slot) = slots
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint entry `{name}` has no matching parameter")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Data(format!(
                "checkpoint entry `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.set(t);
        Ok(())
    }
}

pub fn save(model: &dyn ModuleRef, path: &Path) -> Result<()> {
    let bytes = encode(&snapshot(model))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads every entry into `model`; the checkpoint must cover every slot exactly.
pub fn load(model: &dyn ModuleRef, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let entries = decode(&buf, &path.display().to_string())?;
    let mut expected: BTreeMap<String, ()> = model.named().into_iter().map(|(n, _)| (n, ())).collect();
    for (name, t) in entries {
        model.assign(&name, t)?;
        expected.remove(&name);
    }
    if let Some((missing, _)) = expected.into_iter().next() {
        return Err(Error::Data(format!("checkpoint lacks parameter `{missing}`")));
    }
    Ok(())
}
