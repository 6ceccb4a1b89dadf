//! `TCKPT1` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TCKPT1"
//! u32 tensor_count
//! tensor_count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u32 dim, Π(dim) × f32 }
//! u32 config_len, config (UTF-8 key=value lines)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"TCKPT1";
const MAX_STRING: u32 = 1 << 20;

fn short(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity("checkpoint is truncated".into())
    } else {
        Error::Format(format!("checkpoint read failed: {e}"))
    }
}

fn write_err(e: std::io::Error) -> Error {
    Error::Format(format!("checkpoint write failed: {e}"))
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC).map_err(write_err)?;
    w.write_u32::<LittleEndian>(params.tensor_count() as u32)
        .map_err(write_err)?;
    for (name, t) in params.named() {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(write_err)?;
        w.write_all(name.as_bytes()).map_err(write_err)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(write_err)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(write_err)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v).map_err(write_err)?;
        }
    }
    let cfg = params.config().to_kv();
    w.write_u32::<LittleEndian>(cfg.len() as u32).map_err(write_err)?;
    w.write_all(cfg.as_bytes()).map_err(write_err)?;
    w.flush().map_err(write_err)
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(short)?;
    if len > MAX_STRING {
        return Err(Error::Format(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0; len as usize];
    r.read_exact(&mut buf).map_err(short)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0; 6];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(short)?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = r.read_u32::<LittleEndian>().map_err(short)?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Format(format!("{name}: rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(short))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(short)?;
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let config = ModelConfig::from_kv(&read_string(&mut r)?)?;
    ModelParams::from_parts(config, tensors)
}

/// Writes atomically: a temporary file in the target directory is renamed into place.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    write_checkpoint(BufWriter::new(tmp.as_file()), params)?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
