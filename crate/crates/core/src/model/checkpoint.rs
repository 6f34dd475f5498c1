//! Binary checkpoints of named parameter tensors.
//!
//! Layout (little-endian): u32 tensor count, then per tensor a u32 name
//! length, UTF-8 name, u32 rank, rank × u32 dims, and the float32 payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, ClassifierModel, Parameters};
use crate::error::{Error, Result};

pub fn write_checkpoint<W: Write>(model: &ClassifierModel, mut out: W) -> Result<()> {
    let tensors = model.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads tensors into a freshly built model of `arch`; every tensor must be
/// present with the expected shape.
pub fn read_checkpoint<R: Read>(arch: &Architecture, mut input: R) -> Result<ClassifierModel> {
    let count = read_u32(&mut input)? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.insert(name, (shape, data));
    }
    let mut model = ClassifierModel::build(arch, 0)?;
    let shapes: Vec<Vec<usize>> = model.tensors().into_iter().map(|(_, s, _)| s).collect();
    for ((name, slot), shape) in model.tensors_mut().into_iter().zip(shapes) {
        let (got, data) = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if got != shape {
            return Err(Error::Shape(format!("{name}: checkpoint {got:?}, model {shape:?}")));
        }
        slot.copy_from_slice(&data);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save(model: &ClassifierModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(arch: &Architecture, path: &Path) -> Result<ClassifierModel> {
    read_checkpoint(arch, std::io::BufReader::new(std::fs::File::open(path)?))
}
