//! Frozen embedding matrices and their on-disk format.
//!
//! Layout (little-endian): 4 magic bytes, `u32` format version (1), `u32`
//! dim, `u32` row count, `count` null-terminated UTF-8 ids, then
//! `count x dim` 32-bit floats row-major. Document embeddings use magic
//! `RSCE`; projection checkpoints reuse the layout with magic `RSCP`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::StoreError;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"RSCE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RSCP";
pub const FORMAT_VERSION: u32 = 1;

/// Rows of 32-bit floats keyed by id, fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Invalid {
                what: "embedding dim must be positive".into(),
            });
        }
        if matrix.len() != ids.len() * dim {
            return Err(StoreError::Invalid {
                what: format!(
                    "matrix has {} values, expected {} rows x {} dim",
                    matrix.len(),
                    ids.len(),
                    dim
                ),
            });
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId { id: id.clone() });
            }
        }
        for (i, v) in matrix.iter().enumerate() {
            if !v.is_finite() {
                return Err(StoreError::Invalid {
                    what: format!("non-finite value at row {}, col {}", i / dim, i % dim),
                });
            }
        }
        Ok(Self { dim, ids, matrix, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&row| self.row(row))
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|_| StoreError::Truncated {
        path: path.display().to_string(),
        what: what.to_string(),
    })
}

fn read_u32(path: &Path, r: &mut impl Read, what: &str) -> Result<u32, StoreError> {
    let mut buf = [0u8; 4];
    read_exact_or(path, r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a matrix file with the expected magic. Returns (dim, ids, matrix).
pub fn read_matrix_file(
    path: impl AsRef<Path>,
    magic: [u8; 4],
) -> Result<(usize, Vec<String>, Vec<f32>), StoreError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = BufReader::new(file);

    let mut got_magic = [0u8; 4];
    read_exact_or(path, &mut r, &mut got_magic, "magic")?;
    if got_magic != magic {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(&magic).into_owned(),
            got: String::from_utf8_lossy(&got_magic).into_owned(),
        });
    }
    let version = read_u32(path, &mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::Invalid {
            what: format!("unsupported format version {version}"),
        });
    }
    let dim = read_u32(path, &mut r, "dim")? as usize;
    let count = read_u32(path, &mut r, "count")? as usize;
    if dim == 0 {
        return Err(StoreError::Invalid {
            what: "embedding dim must be positive".into(),
        });
    }

    let mut ids = Vec::with_capacity(count);
    let mut byte = [0u8; 1];
    for i in 0..count {
        let mut raw = Vec::new();
        loop {
            read_exact_or(path, &mut r, &mut byte, &format!("id {i}"))?;
            if byte[0] == 0 {
                break;
            }
            raw.push(byte[0]);
        }
        let id = String::from_utf8(raw).map_err(|_| StoreError::Invalid {
            what: format!("id {i} is not valid UTF-8"),
        })?;
        ids.push(id);
    }

    let mut matrix = Vec::with_capacity(count * dim);
    let mut fbuf = [0u8; 4];
    for i in 0..count * dim {
        read_exact_or(path, &mut r, &mut fbuf, &format!("float {i}"))?;
        matrix.push(f32::from_le_bytes(fbuf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })? != 0
    {
        return Err(StoreError::Invalid {
            what: "trailing bytes after matrix payload".into(),
        });
    }
    Ok((dim, ids, matrix))
}

/// Write a matrix file. Ids must not contain NUL bytes.
pub fn write_matrix_file(
    path: impl AsRef<Path>,
    magic: [u8; 4],
    dim: usize,
    ids: &[String],
    matrix: &[f32],
) -> Result<(), StoreError> {
    let path = path.as_ref();
    assert_eq!(matrix.len(), ids.len() * dim, "matrix shape mismatch");
    let io_err = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(&magic).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ids.len() as u32).to_le_bytes()).map_err(io_err)?;
    for id in ids {
        if id.as_bytes().contains(&0) {
            return Err(StoreError::Invalid {
                what: format!("id {id:?} contains a NUL byte"),
            });
        }
        w.write_all(id.as_bytes()).map_err(io_err)?;
        w.write_all(&[0]).map_err(io_err)?;
    }
    for v in matrix {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Import a document embedding store from an `RSCE` file.
pub fn import_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    let (dim, ids, matrix) = read_matrix_file(path, EMBEDDING_MAGIC)?;
    EmbeddingStore::new(dim, ids, matrix)
}

/// Export a store to an `RSCE` file. Bit-exact round-trip with import.
pub fn export_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    write_matrix_file(path, EMBEDDING_MAGIC, store.dim, &store.ids, &store.matrix)
}
