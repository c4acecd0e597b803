//! Versioned, checksummed container of named numeric sections.
//!
//! ```text
//! mest-container
//! version: 1
//! kind: <kind>
//! meta <key> <value>                                   (zero or more)
//! section <name> <f64|i64> <rows> <cols> <text|f64le>  (zero or more, each followed by its payload)
//! end
//! checksum: sha256 <64 hex digits>
//! ```
//!
//! Text payloads are `rows` lines of `cols` space-separated values. `f64le`
//! payloads are `rows * cols` little-endian 8-byte values followed by a newline.
//! The checksum covers every byte before the `checksum:` line.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &str = "mest-container";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub encoding: Encoding,
    pub data: SectionData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            meta: Vec::new(),
            sections: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Missing(format!("meta field `{key}`")))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_meta(key)?;
        raw.parse().map_err(|_| Error::Parse {
            location: format!("meta {key}"),
            message: format!("cannot parse `{raw}`"),
        })
    }

    pub fn push_f64(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, encoding: Encoding) {
        assert_eq!(rows * cols, data.len(), "section {name} size");
        self.sections.push(Section {
            name: name.to_string(),
            rows,
            cols,
            encoding,
            data: SectionData::F64(data),
        });
    }

    pub fn push_i64(&mut self, name: &str, rows: usize, cols: usize, data: Vec<i64>) {
        assert_eq!(rows * cols, data.len(), "section {name} size");
        self.sections.push(Section {
            name: name.to_string(),
            rows,
            cols,
            encoding: Encoding::Text,
            data: SectionData::I64(data),
        });
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| Error::Missing(format!("section `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(usize, usize, &[f64])> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::F64(v) => Ok((s.rows, s.cols, v)),
            SectionData::I64(_) => Err(Error::Parse {
                location: format!("section {name}"),
                message: "expected f64 values".into(),
            }),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(usize, usize, &[i64])> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::I64(v) => Ok((s.rows, s.cols, v)),
            SectionData::F64(_) => Err(Error::Parse {
                location: format!("section {name}"),
                message: "expected i64 values".into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let line = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(s.as_bytes());
            out.push(b'\n');
        };
        line(&mut out, MAGIC);
        line(&mut out, &format!("version: {FORMAT_VERSION}"));
        line(&mut out, &format!("kind: {}", self.kind));
        for (k, v) in &self.meta {
            line(&mut out, &format!("meta {k} {v}"));
        }
        for s in &self.sections {
            let (ty, enc) = match (&s.data, s.encoding) {
                (SectionData::F64(_), Encoding::Binary) => ("f64", "f64le"),
                (SectionData::F64(_), Encoding::Text) => ("f64", "text"),
                (SectionData::I64(_), _) => ("i64", "text"),
            };
            line(&mut out, &format!("section {} {ty} {} {} {enc}", s.name, s.rows, s.cols));
            match (&s.data, enc) {
                (SectionData::F64(v), "f64le") => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    out.push(b'\n');
                }
                (SectionData::F64(v), _) => write_text_rows(&mut out, s.rows, s.cols, v),
                (SectionData::I64(v), _) => write_text_rows(&mut out, s.rows, s.cols, v),
            }
        }
        line(&mut out, "end");
        let digest = hex::encode(Sha256::digest(&out));
        line(&mut out, &format!("checksum: sha256 {digest}"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        Reader { bytes, pos: 0, line: 0 }.read()
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            Error::Checksum(_) => Error::Checksum(path.display().to_string()),
            other => other,
        })
    }
}

fn write_text_rows<T: ToString>(out: &mut Vec<u8>, rows: usize, cols: usize, v: &[T]) {
    for r in 0..rows {
        let row: Vec<String> = v[r * cols..(r + 1) * cols].iter().map(T::to_string).collect();
        out.extend_from_slice(row.join(" ").as_bytes());
        out.push(b'\n');
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            location: format!("line {} (byte {})", self.line + 1, self.pos),
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of file"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("invalid utf-8"))?;
        self.pos += end + 1;
        self.line += 1;
        Ok(text)
    }

    fn expect_field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(": "))
            .ok_or_else(|| self.err(format!("expected `{key}: ...`, found `{l}`")))
    }

    fn read(mut self) -> Result<Container> {
        let magic = self.next_line()?;
        if magic != MAGIC {
            return Err(self.err(format!("not a {MAGIC} file")));
        }
        let version = self.expect_field("version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let mut c = Container::new(self.expect_field("kind")?);
        loop {
            let l = self.next_line()?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                c.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("section ") {
                let s = self.read_section(rest)?;
                c.sections.push(s);
            } else {
                return Err(self.err(format!("unexpected line `{l}`")));
            }
        }
        let body_end = self.pos;
        let sum = self.expect_field("checksum")?;
        let hexd = sum
            .strip_prefix("sha256 ")
            .ok_or_else(|| self.err("checksum must be sha256"))?;
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing bytes after checksum"));
        }
        if hex::encode(Sha256::digest(&self.bytes[..body_end])) != hexd {
            return Err(Error::Checksum("container".into()));
        }
        Ok(c)
    }

    fn read_section(&mut self, header: &str) -> Result<Section> {
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 5 {
            return Err(self.err(format!("malformed section header `{header}`")));
        }
        let dim = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| self.err(format!("bad dimension `{s}`")))
        };
        let (rows, cols) = (dim(f[2])?, dim(f[3])?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err("section too large"))?;
        let name = f[0].to_string();
        let (encoding, data) = match (f[1], f[4]) {
            ("f64", "f64le") => {
                let len = n.checked_mul(8).ok_or_else(|| self.err("section too large"))?;
                if self.bytes.len() - self.pos < len + 1 {
                    return Err(self.err(format!("section {name} truncated")));
                }
                let v = self.bytes[self.pos..self.pos + len]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                self.pos += len;
                if self.bytes[self.pos] != b'\n' {
                    return Err(self.err(format!("section {name} missing terminator")));
                }
                self.pos += 1;
                self.line += 1;
                (Encoding::Binary, SectionData::F64(v))
            }
            ("f64", "text") => (Encoding::Text, SectionData::F64(self.text_rows(rows, cols)?)),
            ("i64", "text") => (Encoding::Text, SectionData::I64(self.text_rows(rows, cols)?)),
            (ty, enc) => return Err(self.err(format!("unsupported section type `{ty} {enc}`"))),
        };
        Ok(Section {
            name,
            rows,
            cols,
            encoding,
            data,
        })
    }

    fn text_rows<T: std::str::FromStr>(&mut self, rows: usize, cols: usize) -> Result<Vec<T>> {
        let mut v = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let l = self.next_line()?;
            let before = v.len();
            if cols > 0 {
                for tok in l.split(' ') {
                    v.push(tok.parse().map_err(|_| self.err(format!("bad value `{tok}`")))?);
                }
            }
            if v.len() - before != cols {
                return Err(self.err(format!("expected {cols} values, found {}", v.len() - before)));
            }
        }
        Ok(v)
    }
}
