//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GRAFSMDL"
//! version  u32
//! spec     u64 length, then that many bytes of JSON (ModelSpec)
//! count    u64 number of tensors
//! tensor*  u64 rank, rank × u64 extents, then f64 values
//! ```
//!
//! Tensors appear in declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelError, ModelSpec};
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRAFSMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Refuses extents beyond this many elements per tensor.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<(), ModelError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let spec = serde_json::to_vec(model.spec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_u64::<LittleEndian>(spec.len() as u64)?;
    out.write_all(&spec)?;
    out.write_u64::<LittleEndian>(model.params().len() as u64)?;
    for p in model.params() {
        out.write_u64::<LittleEndian>(p.value.shape().len() as u64)?;
        for &d in p.value.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in p.value.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Model, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}")));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let spec_len = input.read_u64::<LittleEndian>()?;
    if spec_len > MAX_ELEMENTS {
        return Err(bad(format!("spec length {spec_len} is implausible")));
    }
    let mut spec = vec![0u8; spec_len as usize];
    input.read_exact(&mut spec)?;
    let spec: ModelSpec = serde_json::from_slice(&spec).map_err(|e| bad(format!("spec: {e}")))?;
    let count = input.read_u64::<LittleEndian>()?;
    let declared = spec.param_shapes().len() as u64;
    if count != declared {
        return Err(bad(format!("spec declares {declared} tensors, header says {count}")));
    }
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rank = input.read_u64::<LittleEndian>()?;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("tensor rank {rank} out of range")));
        }
        let shape = (0..rank)
            .map(|_| input.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let n = n
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| bad(format!("shape {shape:?} too large")))?;
        let mut data = vec![0.0; n as usize];
        input.read_f64_into::<LittleEndian>(&mut data)?;
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Model::from_params(spec, tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    read_checkpoint(fs::read(path)?.as_slice())
}
