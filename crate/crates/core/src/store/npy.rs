//! Minimal NPY reader/writer for little-endian float32 arrays in C order.
//!
//! Files are written as format version 1.0 with the header padded so the data
//! starts on a 64-byte boundary, which is what numpy itself emits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::Tensor;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// Reads a tensor from an NPY file; the tensor is named after the file stem.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, name).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let shape = match tensor.shape() {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // magic + version + u16 length + header + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + tensor.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], name: impl Into<String>) -> Result<Tensor> {
    let mut reader = bytes;
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::format("file too short for NPY magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("missing NPY magic string"));
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| Error::format("truncated NPY version"))?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::format("truncated NPY header length"))?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::format("truncated NPY header length"))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::format(format!("unsupported NPY version {v}.{}", version[1]))),
    };
    if reader.len() < header_len {
        return Err(Error::format("truncated NPY header"));
    }
    let (header_bytes, payload) = reader.split_at(header_len);
    let header = std::str::from_utf8(header_bytes).map_err(|_| Error::format("NPY header is not valid text"))?;
    let dict = HeaderDict::parse(header)?;

    if dict.descr != "<f4" {
        return Err(Error::UnsupportedDtype(dict.descr));
    }
    if dict.fortran_order {
        return Err(Error::format("Fortran-ordered arrays are not supported"));
    }
    let numel: usize = dict.shape.iter().product();
    if payload.len() != numel * 4 {
        return Err(Error::format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            dict.shape,
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(name, dict.shape, data)
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the python dict literal of an NPY header. Only the three
    /// standard keys are recognised; anything else is a format error.
    fn parse(src: &str) -> Result<Self> {
        let body = src
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| Error::format("NPY header is not a dict literal"))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after) = parse_quoted(rest)?;
            let after = after
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| Error::format("expected ':' in NPY header"))?
                .trim_start();
            let after = match key.as_str() {
                "descr" => {
                    let (v, a) = parse_quoted(after)?;
                    descr = Some(v);
                    a
                }
                "fortran_order" => {
                    if let Some(a) = after.strip_prefix("False") {
                        fortran_order = Some(false);
                        a
                    } else if let Some(a) = after.strip_prefix("True") {
                        fortran_order = Some(true);
                        a
                    } else {
                        return Err(Error::format("fortran_order must be True or False"));
                    }
                }
                "shape" => {
                    let (v, a) = parse_shape(after)?;
                    shape = Some(v);
                    a
                }
                other => return Err(Error::format(format!("unexpected NPY header key {other:?}"))),
            };
            let after = after.trim_start();
            rest = match after.strip_prefix(',') {
                Some(a) => a.trim_start(),
                None if after.is_empty() => after,
                None => return Err(Error::format("expected ',' in NPY header")),
            };
        }
        Ok(Self {
            descr: descr.ok_or_else(|| Error::format("NPY header lacks 'descr'"))?,
            fortran_order: fortran_order.ok_or_else(|| Error::format("NPY header lacks 'fortran_order'"))?,
            shape: shape.ok_or_else(|| Error::format("NPY header lacks 'shape'"))?,
        })
    }
}

fn parse_quoted(s: &str) -> Result<(String, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::format("expected quoted string in NPY header"))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::format("unterminated string in NPY header"))?;
    Ok((inner[..end].to_string(), &inner[end + 1..]))
}

fn parse_shape(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::format("shape must be a tuple"))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::format("unterminated shape tuple"))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::format(format!("bad shape entry {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}
