//! Parameter checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    : 4 bytes  "TOK1"
//! version  : u32      currently 1
//! cfg_len  : u64      length of an embedded config blob (0 when absent)
//! cfg      : cfg_len raw bytes (verbatim copy of the run config file)
//! count    : u64      number of entries
//! entry*   : u32 name_len, name (utf-8), u8 trainable,
//!            u32 ndim, u64 dim*, f64 data* (little-endian)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use super::{NumericsError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TOK1";
const VERSION: u32 = 1;

/// Everything a checkpoint carries: the parameter set, optional extra
/// tensors (optimizer state, counters), and an optional config echo.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub params: ParamSet,
    /// Auxiliary tensors, e.g. optimizer moments, keyed by reserved names.
    pub extras: BTreeMap<String, Tensor>,
    /// Verbatim bytes of the run config that produced this checkpoint.
    pub config_echo: Option<Vec<u8>>,
}

/// Reserved prefix separating auxiliary entries from model parameters.
const EXTRA_PREFIX: &str = "__extra.";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = ckpt.config_echo.as_deref().unwrap_or(&[]);
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;

    let count = ckpt.params.len() + ckpt.extras.len();
    w.write_all(&(count as u64).to_le_bytes())?;
    for (name, entry) in ckpt.params.iter() {
        write_entry(&mut w, name, entry.trainable, &entry.tensor)?;
    }
    for (name, tensor) in &ckpt.extras {
        write_entry(&mut w, &format!("{EXTRA_PREFIX}{name}"), false, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumericsError::CheckpointFormat(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::CheckpointFormat(format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let config_echo = if cfg_len > 0 {
        let mut buf = vec![0u8; cfg_len];
        r.read_exact(&mut buf)?;
        Some(buf)
    } else {
        None
    };

    let count = read_u64(&mut r)? as usize;
    let mut ckpt = Checkpoint { config_echo, ..Default::default() };
    for _ in 0..count {
        let (name, trainable, tensor) = read_entry(&mut r)?;
        if let Some(extra) = name.strip_prefix(EXTRA_PREFIX) {
            ckpt.extras.insert(extra.to_string(), tensor);
        } else {
            ckpt.params.insert(name, tensor, trainable);
        }
    }
    Ok(ckpt)
}

fn write_entry<W: Write>(w: &mut W, name: &str, trainable: bool, tensor: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[u8::from(trainable)])?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_entry<R: Read>(r: &mut R) -> Result<(String, bool, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(NumericsError::CheckpointFormat(format!("implausible name length {name_len}")));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|e| NumericsError::CheckpointFormat(format!("name not utf-8: {e}")))?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(NumericsError::CheckpointFormat(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let tensor = Tensor::new(shape, data)
        .map_err(|e| NumericsError::CheckpointFormat(format!("bad entry `{name}`: {e}")))?;
    Ok((name, flag[0] != 0, tensor))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
