//! Flat archives of named `f64` matrices: a little-endian `.bin` payload and a
//! JSON index with free-form metadata.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `<dir>/<stem>.bin` and `<dir>/<stem>.json`.
pub fn save(dir: &Path, stem: &str, arrays: &[(String, &Array2<f64>)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, a) in arrays {
        entries.push(ArrayEntry { name: name.clone(), rows: a.nrows(), cols: a.ncols(), offset });
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += a.len();
    }
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    let index = ArchiveIndex { arrays: entries, meta };
    fs::write(&json, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json, e))
}

/// Arrays in archive order, with their names.
pub type NamedArrays = Vec<(String, Array2<f64>)>;

/// Reads an archive written by [`save`].
pub fn load(dir: &Path, stem: &str) -> Result<(ArchiveIndex, NamedArrays)> {
    let json = dir.join(format!("{stem}.json"));
    let index: ArchiveIndex = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut arrays = Vec::with_capacity(index.arrays.len());
    for e in &index.arrays {
        let end = e.offset + e.rows * e.cols;
        if end > values.len() {
            return Err(Error::CheckpointMismatch(format!("array `{}` runs past the payload", e.name)));
        }
        let a = Array2::from_shape_vec((e.rows, e.cols), values[e.offset..end].to_vec())
            .map_err(|err| Error::Shape(err.to_string()))?;
        arrays.push((e.name.clone(), a));
    }
    Ok((index, arrays))
}

/// Row-major `f32` matrix with a JSON sidecar, as used for representation dumps.
pub fn save_f32_matrix(path: &Path, m: &Array2<f64>, sidecar: &Path, meta: &impl Serialize) -> Result<()> {
    let bytes: Vec<u8> = m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    fs::write(sidecar, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(sidecar, e))
}

pub fn load_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {rows}x{cols} f32",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array2::from_shape_fn((2, 3), |(i, j)| i as f64 * 0.5 - j as f64);
        let b = Array2::from_elem((1, 4), 1.0 / 3.0);
        save(dir.path(), "m", &[("a".into(), &a), ("b".into(), &b)], serde_json::json!({"k": 4})).unwrap();
        let (index, arrays) = load(dir.path(), "m").unwrap();
        assert_eq!(index.meta["k"], 4);
        assert_eq!(arrays[0], ("a".to_string(), a));
        assert_eq!(arrays[1], ("b".to_string(), b));
    }

    #[test]
    fn f32_matrix_size_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_elem((3, 2), 0.25);
        let (p, s) = (dir.path().join("x.f32"), dir.path().join("x.json"));
        save_f32_matrix(&p, &m, &s, &serde_json::json!({"n": 3, "d": 2})).unwrap();
        assert_eq!(load_f32_matrix(&p, 3, 2).unwrap(), m);
        assert!(load_f32_matrix(&p, 2, 2).is_err());
    }
}
