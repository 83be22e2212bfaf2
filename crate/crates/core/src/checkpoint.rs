//! Binary container shared by model checkpoints, training state and the
//! preprocessed dataset cache.
//!
//! Layout:
//!
//! ```text
//! VIBLOC-CKPT\n
//! format_version=1\n
//! kind=<kind>\n
//! <key>=<value>\n        (zero or more metadata lines, in order)
//! records=<n>\n
//! \n                     (blank line ends the header)
//! n x record:
//!     u32 LE  name length, name bytes (UTF-8)
//!     u64 LE  rows
//!     u64 LE  cols
//!     rows*cols x f64 LE, row-major
//! ```
//!
//! Floats in metadata are written with Rust's shortest round-trip formatting,
//! so every value survives a save/load cycle bit for bit.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &str = "VIBLOC-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub records: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_owned(),
            meta: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_owned(), value.to_string()));
    }

    /// Stores a float using shortest round-trip formatting.
    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.meta.push((key.to_owned(), format!("{value:?}")));
    }

    pub fn push_record(&mut self, name: &str, m: Matrix) {
        self.records.push((name.to_owned(), m));
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Mismatch {
                key: key.to_owned(),
                expected: "present".into(),
                found: "missing".into(),
            })
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.iter().any(|(k, _)| k == key)
    }

    pub fn meta<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse().map_err(|_| Error::Mismatch {
            key: key.to_owned(),
            expected: std::any::type_name::<T>().into(),
            found: raw.to_owned(),
        })
    }

    pub fn record(&self, name: &str) -> Result<&Matrix> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Mismatch {
                key: name.to_owned(),
                expected: "record present".into(),
                found: "missing".into(),
            })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Mismatch {
                key: "kind".into(),
                expected: kind.into(),
                found: self.kind.clone(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\nkind={}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        header.push_str(&format!("records={}\n\n", self.records.len()));

        let payload: usize = self
            .records
            .iter()
            .map(|(n, m)| 20 + n.len() + 8 * m.len())
            .sum();
        let mut out = Vec::with_capacity(header.len() + payload);
        out.extend_from_slice(header.as_bytes());
        for (name, m) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.line()?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad magic {magic:?}"),
            });
        }
        let at = cur.pos;
        let (k, version) = split_kv(cur.line()?, at)?;
        if k != "format_version" {
            return Err(Error::Parse {
                offset: at,
                detail: "expected format_version".into(),
            });
        }
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(Error::Version {
                found: version.to_owned(),
                expected: FORMAT_VERSION,
            });
        }
        let at = cur.pos;
        let (k, kind) = split_kv(cur.line()?, at)?;
        if k != "kind" {
            return Err(Error::Parse {
                offset: at,
                detail: "expected kind".into(),
            });
        }
        let mut container = Container::new(kind);

        let count = loop {
            let at = cur.pos;
            let line = cur.line()?;
            if line.is_empty() {
                return Err(Error::Parse {
                    offset: at,
                    detail: "header ended before records line".into(),
                });
            }
            let (k, v) = split_kv(line, at)?;
            if k == "records" {
                let n: usize = v.parse().map_err(|_| Error::Parse {
                    offset: at,
                    detail: format!("bad record count {v:?}"),
                })?;
                let at = cur.pos;
                if !cur.line()?.is_empty() {
                    return Err(Error::Parse {
                        offset: at,
                        detail: "expected blank line after header".into(),
                    });
                }
                break n;
            }
            container.push_meta(k, v);
        };

        for _ in 0..count {
            let at = cur.pos;
            let name_len = u32::from_le_bytes(cur.take_array()?) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?).map_err(|_| Error::Parse {
                offset: at,
                detail: "record name is not UTF-8".into(),
            })?;
            let rows = u64::from_le_bytes(cur.take_array()?) as usize;
            let cols = u64::from_le_bytes(cur.take_array()?) as usize;
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or(
                Error::Parse {
                    offset: at,
                    detail: format!("record {name:?} has absurd shape {rows}x{cols}"),
                },
            )?;
            let data_at = cur.pos;
            let raw = cur.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Matrix::from_vec(rows, cols, data).map_err(|_| Error::Parse {
                offset: data_at,
                detail: format!("record {name:?} contains non-finite values"),
            })?;
            container.records.push((name.to_owned(), m));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse {
                offset: cur.pos,
                detail: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_kv(line: &str, offset: usize) -> Result<(&str, &str)> {
    line.split_once('=').ok_or_else(|| Error::Parse {
        offset,
        detail: format!("expected key=value, found {line:?}"),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                detail: format!(
                    "unexpected end of file (wanted {n} bytes, {} left)",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
            offset: start,
            detail: "unterminated header line".into(),
        })?;
        self.pos = start + nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Parse {
            offset: start,
            detail: "header is not UTF-8".into(),
        })
    }
}
