//! Named parameter tensors and the binary checkpoint container.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic "SRCK" | u32 version | u64 header_len | header JSON
//! u64 tensor_count | per tensor: u64 name_len | name | u64 rows | u64 cols | rows*cols f64
//! ```
//!
//! Tensors are stored in name order, so identical parameters always produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::Mat;

const MAGIC: &[u8; 4] = b"SRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    /// Panics on unknown names; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> &Mat {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.dim() == b.dim())
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a header plus the tensors of `params`.
pub fn encode_checkpoint<H: Serialize>(header: &H, params: &ParamStore) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(64 + header.len() + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    put_u64(&mut buf, params.len() as u64);
    for (name, m) in params.iter() {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, m.nrows() as u64);
        put_u64(&mut buf, m.ncols() as u64);
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::IncompatibleCheckpoint("truncated file".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::IncompatibleCheckpoint("length overflow".into()))
    }
}

pub fn decode_checkpoint<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ParamStore)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::IncompatibleCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("unsupported version {version}")));
    }
    let header_len = r.len()?;
    let header: H =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::IncompatibleCheckpoint(format!("header: {e}")))?;
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::IncompatibleCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.len()?, r.len()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::IncompatibleCheckpoint("tensor shape overflow".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::IncompatibleCheckpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), data).expect("shape matches data length");
        params.insert(name, m);
    }
    if r.at != bytes.len() {
        return Err(Error::IncompatibleCheckpoint("trailing bytes".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint<H: Serialize>(path: impl AsRef<Path>, header: &H, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
