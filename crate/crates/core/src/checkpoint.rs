//! Flat binary file of named tensors.
//!
//! A file is a plain sequence of records, with no header:
//!
//! ```text
//! u32 name_len | name bytes (UTF-8) | u32 rank | rank x u32 dims | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Group;
use crate::model::{ArchSpec, Param, SplitModel};
use crate::tensor::Tensor;

pub type Record = (String, Tensor<f32>);

pub fn write_records<'a, W: Write>(mut w: W, records: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    for (name, tensor) in records {
        let len = u32::try_from(name.len()).map_err(|_| Error::validation("record name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::validation(format!("dimension {d} of {name} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Ingestion {
                offset: self.pos as u64,
                message: format!("truncated record while reading {what}"),
            })?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Ingestion {
                offset: start as u64 + 4,
                message: "record name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Ingestion {
                offset: start as u64,
                message: format!("record {name} has an oversized shape {shape:?}"),
            })?;
        let payload = c.take(count * 4, "payload")?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| Error::Ingestion {
            offset: start as u64,
            message: format!("record {name}: {e}"),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_records(&bytes)
}

pub fn save_model(model: &SplitModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref()).map_err(|e| Error::File {
        path: path.as_ref().to_path_buf(),
        message: e.to_string(),
    })?;
    write_records(
        BufWriter::new(file),
        model.all_params().map(|p| (p.name.as_str(), &p.tensor)),
    )
}

/// Rebuilds a model from records; names and shapes must match `arch`.
pub fn model_from_records(arch: &ArchSpec, records: Vec<Record>) -> Result<SplitModel<f32>> {
    let mut groups: [Vec<Param<f32>>; 3] = Default::default();
    for (name, tensor) in records {
        let group = Group::from_prefix(&name)
            .ok_or_else(|| Error::contract(format!("record {name} is not a model parameter")))?;
        groups[group.index()].push(Param { name, tensor });
    }
    SplitModel::from_groups(arch, groups)
}

pub fn load_model(arch: &ArchSpec, path: impl AsRef<Path>) -> Result<SplitModel<f32>> {
    let file = File::open(path.as_ref()).map_err(|e| Error::File {
        path: path.as_ref().to_path_buf(),
        message: e.to_string(),
    })?;
    model_from_records(arch, read_records(BufReader::new(file))?)
}
