//! Flat binary parameter files.
//!
//! Layout: the magic `STAGW1`, one byte holding the scalar width (4 or 8),
//! then per parameter `u32` name length, UTF-8 name, `u32` rows, `u32` cols
//! and `rows·cols` little-endian values. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamEntry, ParamStore};
use crate::real::Real;

pub const MAGIC: &[u8; 6] = b"STAGW1";

pub fn encode<T: Real>(store: &ParamStore<T>, select: impl Fn(&ParamEntry<T>) -> bool) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(T::PRECISION.bytes() as u8);
    for (_, e) in store.iter().filter(|(_, e)| select(e)) {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
        for &v in e.value.as_slice() {
            v.to_le_bytes_vec(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Matrix<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a parameter file".into()));
    }
    let width = r.take(1)?[0] as usize;
    if width != T::PRECISION.bytes() {
        return Err(Error::Format(format!(
            "file stores {width}-byte scalars, expected {}",
            T::PRECISION.bytes()
        )));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let raw = r.take(rows * cols * width)?;
        let data = raw.chunks_exact(width).map(T::from_le_slice).collect();
        records.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(records)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, select: impl Fn(&ParamEntry<T>) -> bool) -> Result<()> {
    std::fs::write(path, encode(store, select)).map_err(|e| Error::io(path, e))
}

/// Reads a file and overwrites the named parameters of `store`.
pub fn load<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_values(decode(&bytes)?)
}
