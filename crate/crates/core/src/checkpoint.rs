//! CGCKPT1 binary checkpoints: named tensor blobs with a trailing CRC32.
//!
//! Layout (little-endian): magic `CGCKPT1`, header {version u32,
//! iteration u64, blobCount u32}, then per blob {nameLen u16, name utf-8,
//! dtype u8, rank u8, extents u64[rank], raw values}, then CRC32 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"CGCKPT1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;
const DTYPE_U64: u8 = 3;

/// CRC32 (IEEE 802.3, reflected) over a byte stream.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xffffffffu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xffffffff
}

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U8(Vec<usize>, Vec<u8>),
    U64(Vec<usize>, Vec<u64>),
}

impl Blob {
    fn dtype(&self) -> u8 {
        match self {
            Blob::F32(..) => DTYPE_F32,
            Blob::F64(..) => DTYPE_F64,
            Blob::U8(..) => DTYPE_U8,
            Blob::U64(..) => DTYPE_U64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Blob::F32(s, _) | Blob::F64(s, _) | Blob::U8(s, _) | Blob::U64(s, _) => s,
        }
    }

    pub fn as_f32(&self) -> Option<(&[usize], &[f32])> {
        match self {
            Blob::F32(s, d) => Some((s, d)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    /// Name-ordered blobs; order is part of the byte-identical contract.
    pub blobs: Vec<(String, Blob)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(blob.dtype());
            out.push(blob.shape().len() as u8);
            for &e in blob.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match blob {
                Blob::F32(_, d) => {
                    for v in d {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::F64(_, d) => {
                    for v in d {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::U8(_, d) => out.extend_from_slice(d),
                Blob::U64(_, d) => {
                    for v in d {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: usize, detail: String| Error::Format {
            what: "checkpoint",
            offset: offset as u64,
            detail,
        };
        let need = |pos: usize, n: usize| -> Result<()> {
            if pos + n > bytes.len() {
                Err(fail(
                    bytes.len(),
                    format!("truncated: need {n} bytes at offset {pos}"),
                ))
            } else {
                Ok(())
            }
        };
        need(0, MAGIC.len())?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        // CRC gate before structural parsing
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32(&bytes[..body_len]);
        if stored != actual {
            return Err(fail(
                body_len,
                format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"),
            ));
        }
        let mut pos = MAGIC.len();
        let read_u16 = |pos: &mut usize| -> Result<u16> {
            need(*pos, 2)?;
            let v = u16::from_le_bytes(bytes[*pos..*pos + 2].try_into().expect("2"));
            *pos += 2;
            Ok(v)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            need(*pos, 4)?;
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().expect("4"));
            *pos += 4;
            Ok(v)
        };
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            need(*pos, 8)?;
            let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().expect("8"));
            *pos += 8;
            Ok(v)
        };
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                offset: MAGIC.len() as u64,
                detail: format!("version mismatch: file has {version}, expected {VERSION}"),
            });
        }
        let iteration = read_u64(&mut pos)?;
        let blob_count = read_u32(&mut pos)? as usize;
        let mut blobs = Vec::with_capacity(blob_count);
        for _ in 0..blob_count {
            let name_len = read_u16(&mut pos)? as usize;
            need(pos, name_len)?;
            let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
                .map_err(|e| fail(pos, format!("bad blob name: {e}")))?;
            pos += name_len;
            need(pos, 2)?;
            let dtype = bytes[pos];
            let rank = bytes[pos + 1] as usize;
            pos += 2;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let blob = match dtype {
                DTYPE_F32 => {
                    need(pos, numel * 4)?;
                    let mut d = Vec::with_capacity(numel);
                    for i in 0..numel {
                        d.push(f32::from_le_bytes(
                            bytes[pos + i * 4..pos + i * 4 + 4].try_into().expect("4"),
                        ));
                    }
                    pos += numel * 4;
                    Blob::F32(shape, d)
                }
                DTYPE_F64 => {
                    need(pos, numel * 8)?;
                    let mut d = Vec::with_capacity(numel);
                    for i in 0..numel {
                        d.push(f64::from_le_bytes(
                            bytes[pos + i * 8..pos + i * 8 + 8].try_into().expect("8"),
                        ));
                    }
                    pos += numel * 8;
                    Blob::F64(shape, d)
                }
                DTYPE_U8 => {
                    need(pos, numel)?;
                    let d = bytes[pos..pos + numel].to_vec();
                    pos += numel;
                    Blob::U8(shape, d)
                }
                DTYPE_U64 => {
                    need(pos, numel * 8)?;
                    let mut d = Vec::with_capacity(numel);
                    for i in 0..numel {
                        d.push(u64::from_le_bytes(
                            bytes[pos + i * 8..pos + i * 8 + 8].try_into().expect("8"),
                        ));
                    }
                    pos += numel * 8;
                    Blob::U64(shape, d)
                }
                other => return Err(fail(pos - 2, format!("unknown dtype {other}"))),
            };
            blobs.push((name, blob));
        }
        if pos != body_len {
            return Err(fail(pos, format!("{} trailing bytes", body_len - pos)));
        }
        Ok(Checkpoint {
            version,
            iteration,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::decode(&bytes)
    }
}
