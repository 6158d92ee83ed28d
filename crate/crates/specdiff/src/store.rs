//! Named-array containers and content addressing.
//!
//! Datasets, checkpoints, and feature repositories all live in the same
//! on-disk form: a zip archive of `.npy` entries plus an optional
//! `manifest.json`. Arrays are little-endian, C-order. Writes use stored
//! (uncompressed) entries with a fixed timestamp so identical inputs produce
//! identical archive bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Supported element types for array entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Descr {
    F64,
    F32,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    U64,
    I64,
}

impl Descr {
    fn parse(s: &str) -> Result<Self> {
        // '|' marks byte-order-free single-byte types; '<' is little-endian.
        let d = match s {
            "<f8" => Descr::F64,
            "<f4" => Descr::F32,
            "|u1" | "<u1" => Descr::U8,
            "|i1" | "<i1" => Descr::I8,
            "<u2" => Descr::U16,
            "<i2" => Descr::I16,
            "<u4" => Descr::U32,
            "<i4" => Descr::I32,
            "<u8" => Descr::U64,
            "<i8" => Descr::I64,
            other if other.starts_with('>') => {
                return Err(Error::container(format!(
                    "big-endian array dtype {other:?}; little-endian arrays expected"
                )))
            }
            other => {
                return Err(Error::container(format!(
                    "unsupported array dtype {other:?}"
                )))
            }
        };
        Ok(d)
    }

    fn size(self) -> usize {
        match self {
            Descr::U8 | Descr::I8 => 1,
            Descr::U16 | Descr::I16 => 2,
            Descr::F32 | Descr::U32 | Descr::I32 => 4,
            Descr::F64 | Descr::U64 | Descr::I64 => 8,
        }
    }
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::container(format!("array header lacks {key:?} field")))?;
    let rest = header[start + pat.len()..]
        .trim_start()
        .trim_start_matches(':')
        .trim_start();
    Ok(rest)
}

fn parse_npy_header(header: &str) -> Result<(Descr, bool, Vec<usize>)> {
    let descr_raw = dict_value(header, "descr")?;
    let descr_str = descr_raw
        .strip_prefix('\'')
        .and_then(|r| r.split('\'').next())
        .ok_or_else(|| Error::container("malformed descr in array header"))?;
    let descr = Descr::parse(descr_str)?;

    let fortran = dict_value(header, "fortran_order")?.starts_with("True");

    let shape_raw = dict_value(header, "shape")?;
    let inner = shape_raw
        .strip_prefix('(')
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| Error::container("malformed shape in array header"))?;
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let n: usize = part
            .parse()
            .map_err(|_| Error::container(format!("bad shape component {part:?}")))?;
        shape.push(n);
    }
    Ok((descr, fortran, shape))
}

fn split_npy(bytes: &[u8]) -> Result<(Descr, Vec<usize>, &[u8])> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::container(
            "not an npy array (bad magic); npz/npy containers expected",
        ));
    }
    let (major, _minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::container("truncated npy header"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(Error::container(format!("unsupported npy version {v}"))),
    };
    let body_start = header_start + header_len;
    if bytes.len() < body_start {
        return Err(Error::container("truncated npy header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..body_start])
        .map_err(|_| Error::container("npy header is not valid text"))?;
    let (descr, fortran, shape) = parse_npy_header(header)?;
    if fortran && shape.len() > 1 {
        return Err(Error::container(
            "fortran-order array; C-order (row-major) arrays expected",
        ));
    }
    let n: usize = shape.iter().product();
    let body = &bytes[body_start..];
    let need = n * descr.size();
    if body.len() < need {
        return Err(Error::container(format!(
            "npy body holds {} bytes, {} required for shape {:?}",
            body.len(),
            need,
            shape
        )));
    }
    Ok((descr, shape, &body[..need]))
}

macro_rules! le_chunks {
    ($body:expr, $ty:ty) => {
        $body
            .chunks_exact(std::mem::size_of::<$ty>())
            .map(|c| <$ty>::from_le_bytes(c.try_into().unwrap()))
    };
}

/// Decode an npy byte buffer to f64, widening from any supported numeric type.
pub fn npy_decode_f64(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let (descr, shape, body) = split_npy(bytes)?;
    let data: Vec<f64> = match descr {
        Descr::F64 => le_chunks!(body, f64).collect(),
        Descr::F32 => le_chunks!(body, f32).map(f64::from).collect(),
        Descr::U8 => body.iter().map(|&v| f64::from(v)).collect(),
        Descr::I8 => body.iter().map(|&v| f64::from(v as i8)).collect(),
        Descr::U16 => le_chunks!(body, u16).map(f64::from).collect(),
        Descr::I16 => le_chunks!(body, i16).map(f64::from).collect(),
        Descr::U32 => le_chunks!(body, u32).map(f64::from).collect(),
        Descr::I32 => le_chunks!(body, i32).map(f64::from).collect(),
        Descr::U64 => le_chunks!(body, u64).map(|v| v as f64).collect(),
        Descr::I64 => le_chunks!(body, i64).map(|v| v as f64).collect(),
    };
    Ok((shape, data))
}

/// Decode an npy byte buffer to u32 labels. Any integer type is accepted as
/// long as every value fits; lossy values are rejected with their location.
pub fn npy_decode_u32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u32>)> {
    let (descr, shape, body) = split_npy(bytes)?;
    fn narrow<I: Iterator<Item = i64>>(iter: I) -> Result<Vec<u32>> {
        iter.enumerate()
            .map(|(i, v)| {
                u32::try_from(v).map_err(|_| {
                    Error::container(format!(
                        "label value {v} at flat index {i} does not fit an unsigned 32-bit integer"
                    ))
                })
            })
            .collect()
    }
    let data: Vec<u32> = match descr {
        Descr::U32 => le_chunks!(body, u32).collect(),
        Descr::U8 => body.iter().map(|&v| u32::from(v)).collect(),
        Descr::U16 => le_chunks!(body, u16).map(u32::from).collect(),
        Descr::I8 => narrow(body.iter().map(|&v| i64::from(v as i8)))?,
        Descr::I16 => narrow(le_chunks!(body, i16).map(i64::from))?,
        Descr::I32 => narrow(le_chunks!(body, i32).map(i64::from))?,
        Descr::I64 => narrow(le_chunks!(body, i64))?,
        Descr::U64 => le_chunks!(body, u64)
            .enumerate()
            .map(|(i, v)| {
                u32::try_from(v).map_err(|_| {
                    Error::container(format!(
                        "label value {v} at flat index {i} does not fit an unsigned 32-bit integer"
                    ))
                })
            })
            .collect::<Result<_>>()?,
        Descr::F32 | Descr::F64 => {
            return Err(Error::container(
                "floating-point labels; integer label array expected",
            ))
        }
    };
    Ok((shape, data))
}

fn npy_header_bytes(descr: &str, shape: &[usize]) -> Vec<u8> {
    let shape_txt = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}"
    );
    // Pad so magic + version + length field + header is 64-byte aligned.
    let unpadded = NPY_MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat(63 - (unpadded + 63) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1u8, 0u8]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out
}

pub fn npy_encode_f64(shape: &[usize], data: &[f64]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = npy_header_bytes("<f8", shape);
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn npy_encode_u32(shape: &[usize], data: &[u32]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = npy_header_bytes("<u4", shape);
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reader over a zip-of-npy container. Array entries may be addressed with or
/// without their `.npy` suffix.
pub struct NpzReader {
    archive: ZipArchive<BufReader<File>>,
    path: String,
}

impl NpzReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::container(format!("cannot open {}: {e}", path.display())))?;
        let archive = ZipArchive::new(BufReader::new(file)).map_err(|e| {
            Error::container(format!(
                "{} is not a zip-format named-array container (npz expected): {e}",
                path.display()
            ))
        })?;
        Ok(NpzReader {
            archive,
            path: path.display().to_string(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.archive
            .file_names()
            .map(|n| n.strip_suffix(".npy").unwrap_or(n).to_string())
            .collect()
    }

    pub fn has(&self, name: &str) -> bool {
        self.archive
            .file_names()
            .any(|n| n == name || n.strip_suffix(".npy") == Some(name))
    }

    fn entry_bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        let full = if self.has(name) && !name.ends_with(".npy") {
            let with_ext = format!("{name}.npy");
            if self
                .archive
                .file_names()
                .any(|n| n == with_ext)
            {
                with_ext
            } else {
                name.to_string()
            }
        } else {
            name.to_string()
        };
        let present: Vec<String> = self.archive.file_names().map(String::from).collect();
        let mut entry = self.archive.by_name(&full).map_err(|_| {
            Error::container(format!(
                "container {} has no entry {name:?} (present: {present:?})",
                self.path
            ))
        })?;
        let mut buf = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut buf)?;
        Ok(buf)
    }

    pub fn f64(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let bytes = self.entry_bytes(name)?;
        npy_decode_f64(&bytes)
            .map_err(|e| Error::container(format!("{} entry {name:?}: {e}", self.path)))
    }

    pub fn u32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let bytes = self.entry_bytes(name)?;
        npy_decode_u32(&bytes)
            .map_err(|e| Error::container(format!("{} entry {name:?}: {e}", self.path)))
    }

    pub fn raw(&mut self, name: &str) -> Result<Vec<u8>> {
        self.entry_bytes(name)
    }
}

/// Writer producing byte-deterministic archives: stored entries, fixed
/// timestamp, entry order as added by the caller.
pub struct NpzWriter {
    zip: ZipWriter<BufWriter<File>>,
}

impl NpzWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = File::create(path)
            .map_err(|e| Error::container(format!("cannot create {}: {e}", path.display())))?;
        Ok(NpzWriter {
            zip: ZipWriter::new(BufWriter::new(file)),
        })
    }

    fn options() -> SimpleFileOptions {
        SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(zip::DateTime::default())
    }

    pub fn add_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.zip
            .start_file(name, Self::options())
            .map_err(|e| Error::container(format!("zip entry {name:?}: {e}")))?;
        self.zip.write_all(bytes)?;
        Ok(())
    }

    pub fn add_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        self.add_raw(&format!("{name}.npy"), &npy_encode_f64(shape, data))
    }

    pub fn add_u32(&mut self, name: &str, shape: &[usize], data: &[u32]) -> Result<()> {
        self.add_raw(&format!("{name}.npy"), &npy_encode_u32(shape, data))
    }

    pub fn finish(self) -> Result<()> {
        self.zip
            .finish()
            .map_err(|e| Error::container(format!("zip finish: {e}")))?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file_hex(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Stream-independent seed derivation: every stochastic stage gets its own
/// seed from (master, label), so stages can run in any order or in parallel
/// without sharing generator state.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_json_text(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn to_json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::container(format!("json encode: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::container(format!("json decode {}: {e}", path.display())))
}

/// Flat run manifest: stage name to content key, kept sorted for stable bytes.
pub type StageKeys = BTreeMap<String, String>;
