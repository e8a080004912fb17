//! Text-header + raw-`f32` container used for model and corpus files.
//!
//! ```text
//! <MAGIC> <version>
//! meta <key> <value...>        (any number, order preserved)
//! tensor <name> <rows> <cols> <byte offset>
//! end
//! <little-endian f32 data, tensors in directory order>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("expected magic {expected}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub magic: String,
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn new(magic: &str, version: u32) -> Self {
        Self {
            magic: magic.to_string(),
            version,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, FormatError> {
        self.meta(key)
            .ok_or_else(|| FormatError::Header(format!("missing meta {key}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        let mut header = format!("{} {}\n", self.magic, self.version);
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, m) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(FormatError::Tensor {
                    name: name.clone(),
                    msg: "names must be non-empty without whitespace".into(),
                });
            }
            header.push_str(&format!("tensor {name} {} {} {offset}\n", m.rows(), m.cols()));
            offset += m.data().len() * 4;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(offset);
        for (_, m) in &self.tensors {
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: BufRead>(r: &mut R, magic: &str) -> Result<Self, FormatError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut first = line.split_whitespace();
        let found = first.next().unwrap_or_default();
        if found != magic {
            return Err(FormatError::Magic {
                expected: magic.to_string(),
                found: found.to_string(),
            });
        }
        let version: u32 = first
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FormatError::Header("missing version".into()))?;
        if version != 1 {
            return Err(FormatError::Version(version));
        }

        let mut out = TensorFile::new(magic, version);
        let mut directory = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(FormatError::Header("unexpected end of header".into()));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            let (kind, rest) = l.split_once(' ').unwrap_or((l, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    let parsed = match parts.as_slice() {
                        [name, rows, cols, off] => rows
                            .parse::<usize>()
                            .ok()
                            .zip(cols.parse::<usize>().ok())
                            .zip(off.parse::<usize>().ok())
                            .map(|((r, c), o)| (name.to_string(), r, c, o)),
                        _ => None,
                    };
                    directory.push(
                        parsed.ok_or_else(|| FormatError::Header(format!("bad tensor line {l:?}")))?,
                    );
                }
                _ => return Err(FormatError::Header(format!("unknown line {l:?}"))),
            }
        }

        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut expected_offset = 0usize;
        for (name, rows, cols, off) in directory {
            if off != expected_offset {
                return Err(FormatError::Tensor {
                    name,
                    msg: format!("offset {off}, expected {expected_offset}"),
                });
            }
            let len = rows * cols * 4;
            let bytes = data.get(off..off + len).ok_or_else(|| FormatError::Tensor {
                name: name.clone(),
                msg: "data truncated".into(),
            })?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let m = Matrix::from_vec(rows, cols, values).expect("length checked");
            out.tensors.push((name, m));
            expected_offset += len;
        }
        if expected_offset != data.len() {
            return Err(FormatError::Header(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected_offset
            )));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &str) -> Result<Self, FormatError> {
        Self::read_from(&mut std::io::Cursor::new(bytes), magic)
    }
}
