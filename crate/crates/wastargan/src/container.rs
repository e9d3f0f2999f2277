//! Named-array container files.
//!
//! Feature caches and checkpoints share one on-disk format:
//!
//! ```text
//! bytes 0..8    magic b"VCARRAY1"
//! bytes 8..16   header length `H` as u64 little-endian
//! bytes 16..16+H JSON header (UTF-8)
//! remainder     raw array data, little-endian, tightly packed
//! ```
//!
//! The JSON header is `{"meta": {...}, "arrays": [...]}` where each array
//! entry is `{"name", "dtype" ("f32"|"f64"), "shape", "offset", "nbytes"}`
//! with `offset` relative to the start of the data section. Arrays round-trip
//! bit-exactly; the header is versioned by the magic string.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VCARRAY1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            ArrayData::F32(a) => a.shape().to_vec(),
            ArrayData::F64(a) => a.shape().to_vec(),
        }
    }

    fn nbytes(&self) -> u64 {
        match self {
            ArrayData::F32(a) => 4 * a.len() as u64,
            ArrayData::F64(a) => 8 * a.len() as u64,
        }
    }
}

/// In-memory view of a container file: free-form JSON metadata plus named
/// arrays in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    arrays: IndexMap<String, ArrayData>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            arrays: IndexMap::new(),
        }
    }

    pub fn insert_f32(&mut self, name: &str, array: ArrayD<f32>) {
        self.arrays.insert(name.to_string(), ArrayData::F32(array));
    }

    pub fn insert_f64(&mut self, name: &str, array: ArrayD<f64>) {
        self.arrays.insert(name.to_string(), ArrayData::F64(array));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.arrays.get(name)
    }

    pub fn get_f32(&self, name: &str) -> Option<&ArrayD<f32>> {
        match self.arrays.get(name) {
            Some(ArrayData::F32(a)) => Some(a),
            _ => None,
        }
    }

    pub fn get_f64(&self, name: &str) -> Option<&ArrayD<f64>> {
        match self.arrays.get(name) {
            Some(ArrayData::F64(a)) => Some(a),
            _ => None,
        }
    }

    /// Writes atomically: data goes to a `.tmp` sibling which is renamed into
    /// place, so an interrupted write never leaves a truncated container.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, data) in &self.arrays {
            let nbytes = data.nbytes();
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: data.dtype().to_string(),
                shape: data.shape(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = Header {
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header_json = serde_json::to_vec(&header)?;

        let tmp: PathBuf = path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = std::io::BufWriter::new(file);
            let io_err = |e| Error::io(&tmp, e);
            w.write_all(MAGIC).map_err(io_err)?;
            let mut len_buf = [0u8; 8];
            LittleEndian::write_u64(&mut len_buf, header_json.len() as u64);
            w.write_all(&len_buf).map_err(io_err)?;
            w.write_all(&header_json).map_err(io_err)?;
            for data in self.arrays.values() {
                match data {
                    ArrayData::F32(a) => {
                        let mut buf = vec![0u8; 4 * a.len()];
                        let std_a;
                        let slice = match a.as_slice() {
                            Some(s) => s,
                            None => {
                                std_a = a.as_standard_layout().into_owned();
                                std_a.as_slice().unwrap()
                            }
                        };
                        LittleEndian::write_f32_into(slice, &mut buf);
                        w.write_all(&buf).map_err(io_err)?;
                    }
                    ArrayData::F64(a) => {
                        let mut buf = vec![0u8; 8 * a.len()];
                        let std_a;
                        let slice = match a.as_slice() {
                            Some(s) => s,
                            None => {
                                std_a = a.as_standard_layout().into_owned();
                                std_a.as_slice().unwrap()
                            }
                        };
                        LittleEndian::write_f64_into(slice, &mut buf);
                        w.write_all(&buf).map_err(io_err)?;
                    }
                }
            }
            w.flush().map_err(io_err)?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Container {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            return Err(bad("missing VCARRAY1 magic"));
        }
        let header_len = LittleEndian::read_u64(&bytes[8..16]) as usize;
        let data_start = 16 + header_len;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];

        let mut arrays = IndexMap::new();
        for entry in header.arrays {
            let start = entry.offset as usize;
            let end = start + entry.nbytes as usize;
            if end > data.len() {
                return Err(bad(&format!("array {} out of bounds", entry.name)));
            }
            let raw = &data[start..end];
            let n: usize = entry.shape.iter().product();
            let array = match entry.dtype.as_str() {
                "f32" => {
                    if raw.len() != 4 * n {
                        return Err(bad(&format!("array {} size mismatch", entry.name)));
                    }
                    let mut vals = vec![0f32; n];
                    LittleEndian::read_f32_into(raw, &mut vals);
                    ArrayData::F32(
                        ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
                            .map_err(|e| bad(&e.to_string()))?,
                    )
                }
                "f64" => {
                    if raw.len() != 8 * n {
                        return Err(bad(&format!("array {} size mismatch", entry.name)));
                    }
                    let mut vals = vec![0f64; n];
                    LittleEndian::read_f64_into(raw, &mut vals);
                    ArrayData::F64(
                        ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
                            .map_err(|e| bad(&e.to_string()))?,
                    )
                }
                other => return Err(bad(&format!("unknown dtype {other:?}"))),
            };
            arrays.insert(entry.name, array);
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }
}
