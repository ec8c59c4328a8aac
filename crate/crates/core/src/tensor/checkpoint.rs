//! Checkpoint container: `CKPT`, u16 version, u64 config hash, u32-length JSON header,
//! u32 tensor count, then per tensor a u16-length name, u8 dtype (1 = f64), u8 rank,
//! u32 dims and the little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Tensor;
use crate::io::*;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: truncated in tensor {index} (last whole tensor: {last})")]
    Truncated {
        path: PathBuf,
        index: usize,
        last: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        put_u16(w, VERSION)?;
        put_u64(w, self.config_hash)?;
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        put_u32(w, header.len() as u32)?;
        w.write_all(&header)?;
        put_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            put_u16(w, name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            put_u8(w, DTYPE_F64)?;
            put_u8(w, t.shape.len() as u8)?;
            for &d in &t.shape {
                put_u32(w, d as u32)?;
            }
            put_f64s(w, &t.data)?;
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    ckpt.encode(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = path.to_path_buf();
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let fmt = |msg: String| CheckpointError::Format {
        path: p.clone(),
        msg,
    };
    let head_err = |e: std::io::Error| {
        if is_eof(&e) {
            CheckpointError::Format {
                path: p.clone(),
                msg: "truncated header".into(),
            }
        } else {
            CheckpointError::Io {
                path: p.clone(),
                source: e,
            }
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(head_err)?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}, not a checkpoint")));
    }
    let version = get_u16(&mut r).map_err(head_err)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = get_u64(&mut r).map_err(head_err)?;
    let hlen = get_u32(&mut r).map_err(head_err)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(head_err)?;
    let header = serde_json::from_slice(&hbytes).map_err(|e| fmt(format!("header: {e}")))?;
    let count = get_u32(&mut r).map_err(head_err)? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let read_one = |r: &mut BufReader<File>| -> std::io::Result<std::result::Result<(String, Tensor), String>> {
            let nlen = get_u16(r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let Ok(name) = String::from_utf8(name) else {
                return Ok(Err("tensor name is not UTF-8".into()));
            };
            let dtype = get_u8(r)?;
            if dtype != DTYPE_F64 {
                return Ok(Err(format!("tensor '{name}': unsupported dtype {dtype}")));
            }
            let rank = get_u8(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u32(r)? as usize);
            }
            let data = get_f64s(r, shape.iter().product())?;
            Ok(Ok((name, Tensor { shape, data })))
        };
        match read_one(&mut r) {
            Ok(Ok(t)) => tensors.push(t),
            Ok(Err(msg)) => return Err(fmt(msg)),
            Err(e) if is_eof(&e) => {
                return Err(CheckpointError::Truncated {
                    path: p.clone(),
                    index,
                    last: tensors
                        .last()
                        .map(|(n, _)| format!("'{n}'"))
                        .unwrap_or_else(|| "none".into()),
                })
            }
            Err(source) => return Err(CheckpointError::Io { path: p, source }),
        }
    }
    Ok(Checkpoint {
        config_hash,
        header,
        tensors,
    })
}
