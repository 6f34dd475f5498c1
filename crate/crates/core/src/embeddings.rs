//! Row-aligned embedding matrices and the CEM1 binary container.
//!
//! CEM1 layout (little-endian): magic `CEM1`, u32 version (1), u32 row
//! count, u32 dim, then per row a u16 id length, the UTF-8 id bytes and
//! `dim` float32 values.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const CEM1_MAGIC: [u8; 4] = *b"CEM1";
pub const CEM1_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub data: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: Array2<f64>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                data.nrows()
            )));
        }
        Ok(EmbeddingMatrix { ids, data })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            data: self.data.select(Axis(0), rows),
        }
    }

    pub fn write_cem1<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&CEM1_MAGIC)?;
        out.write_all(&CEM1_VERSION.to_le_bytes())?;
        out.write_all(&u32::try_from(self.len()).map_err(|_| too_big("row count"))?.to_le_bytes())?;
        out.write_all(&u32::try_from(self.dim()).map_err(|_| too_big("dim"))?.to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(self.data.rows()) {
            let len = u16::try_from(id.len()).map_err(|_| too_big("id"))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for &x in row {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_cem1<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if magic != CEM1_MAGIC {
            return Err(Error::Format(format!("bad CEM1 magic {magic:02x?}")));
        }
        let version = read_u32(&mut input)?;
        if version != CEM1_VERSION {
            return Err(Error::Format(format!("unsupported CEM1 version {version}")));
        }
        let rows = read_u32(&mut input)? as usize;
        let dim = read_u32(&mut input)? as usize;
        let mut ids = Vec::with_capacity(rows);
        let mut seen = HashSet::with_capacity(rows);
        let mut data = Array2::zeros((rows, dim));
        let mut buf = vec![0u8; dim * 4];
        for r in 0..rows {
            let mut len = [0u8; 2];
            input.read_exact(&mut len).map_err(truncated)?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format(format!("row {r}: id is not UTF-8")))?;
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!("duplicate row id {id:?}")));
            }
            input.read_exact(&mut buf).map_err(truncated)?;
            for (d, chunk) in data.row_mut(r).iter_mut().zip(buf.chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            }
            ids.push(id);
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last CEM1 row".into()));
        }
        Ok(EmbeddingMatrix { ids, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_cem1(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cem1(&mut file)?;
        file.flush()?;
        Ok(())
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated CEM1 file".into())
    } else {
        Error::Io(e)
    }
}

fn too_big(what: &str) -> Error {
    Error::Format(format!("{what} does not fit the CEM1 field width"))
}

/// Checks that embedding rows list exactly the corpus cascades in corpus
/// order, naming the first mismatched cascade id otherwise.
pub fn check_alignment(embeddings: &EmbeddingMatrix, dataset: &Dataset) -> Result<()> {
    for (pos, cascade) in dataset.cascades().iter().enumerate() {
        match embeddings.ids.get(pos) {
            Some(id) if *id == cascade.id => {}
            Some(id) => {
                return Err(Error::Alignment(format!(
                    "row {pos}: expected cascade {:?}, found {id:?}",
                    cascade.id
                )))
            }
            None => {
                return Err(Error::Alignment(format!(
                    "row {pos}: cascade {:?} missing ({} embedding rows)",
                    cascade.id,
                    embeddings.len()
                )))
            }
        }
    }
    if embeddings.len() > dataset.len() {
        return Err(Error::Alignment(format!(
            "row {}: extra embedding {:?} not in corpus",
            dataset.len(),
            embeddings.ids[dataset.len()]
        )));
    }
    Ok(())
}
