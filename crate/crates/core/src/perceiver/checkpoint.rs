//! Binary parameter checkpoints.
//!
//! ```text
//! magic "MSCK" | version u32 | manifest_len u32 | manifest (JSON)
//! tensor_count u32
//! repeated: name_len u16 | name (UTF-8) | rows u32 | cols u32 | rows*cols f64
//! ```
//! All integers and floats are little-endian; values are row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, PerceiverConfig, Registry};
use crate::tensor::{Matrix, ParamStore};

const MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: PerceiverConfig,
    registry: Registry,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), ModelError> {
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config,
        registry: model.registry.clone(),
    })
    .map_err(|e| corrupt(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(manifest.len())
            .map_err(|_| corrupt("manifest too large"))?
            .to_le_bytes(),
    )?;
    w.write_all(&manifest)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, m) in model.params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| corrupt("tensor name too long"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, ModelError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest).map_err(|e| corrupt(e.to_string()))?;

    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(name, Matrix::new(rows, cols, data)?);
    }
    Ok(Model {
        config: manifest.config,
        registry: manifest.registry,
        params,
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
