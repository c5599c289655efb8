//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `RRCKPT01`, a little-endian `u64` header length, a
//! JSON header (dtype, model config, tensor table), then every parameter as a
//! little-endian float in layout order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamLayout, Scalar, TensorSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RRCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    num_params: usize,
    tensors: Vec<TensorSpec>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, mut w: W) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: params.config().clone(),
        num_params: params.num_params(),
        tensors: params.layout().specs().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_params() * T::BYTES);
    for &x in params.as_slice() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ModelParams<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    header.config.validate()?;
    let layout = ParamLayout::new(&header.config);
    if layout.specs() != header.tensors.as_slice() || layout.total() != header.num_params {
        return Err(Error::Checkpoint("tensor table does not match the model config".into()));
    }
    let mut raw = vec![0u8; header.num_params * T::BYTES];
    r.read_exact(&mut raw)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    ModelParams::from_parts(header.config, data)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
