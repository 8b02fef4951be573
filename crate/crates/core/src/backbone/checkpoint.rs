//! Parameter files: `index.json` listing names and trainability, and one
//! `<name>.bin` per tensor holding a `u32` rank, `u64` dims and little-endian
//! `f32` values.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    trainable: bool,
}

pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for (name, p) in store.iter() {
        write_tensor(p.tensor(), &dir.join(format!("{name}.bin")))?;
        index.push(IndexEntry {
            name: name.clone(),
            trainable: p.is_trainable(),
        });
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_params(dir: &Path, dtype: DType) -> Result<ParamStore> {
    let path = dir.join("index.json");
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&s)?;
    let mut store = ParamStore::new();
    for e in index {
        let t = read_tensor(&dir.join(format!("{}.bin", e.name)))?.to_dtype(dtype)?;
        store.insert(e.name, t, e.trainable)?;
    }
    Ok(store)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let dims = t.dims().to_vec();
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut buf = Vec::with_capacity(4 + 8 * dims.len() + 4 * data.len());
    buf.extend((dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend((*d as u64).to_le_bytes());
    }
    for v in &data {
        buf.extend(v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Data(format!("{}: truncated tensor file", path.display()));
    let rank = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let b = bytes.get(4 + 8 * i..12 + 8 * i).ok_or_else(bad)?;
        dims.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
    }
    let off = 4 + 8 * rank;
    let n: usize = dims.iter().product();
    let payload = bytes.get(off..).ok_or_else(bad)?;
    if payload.len() != 4 * n {
        return Err(Error::Shape(format!(
            "{}: dims {:?} need {} bytes, found {}",
            path.display(),
            dims,
            4 * n,
            payload.len()
        )));
    }
    let v: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_vec_f64, Init};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut init = Init::new(2, DType::F32);
        let mut s = ParamStore::new();
        s.insert("a.w", init.normal(&[3, 4], 1.0).unwrap(), false).unwrap();
        s.insert("b", init.normal(&[5], 1.0).unwrap(), true).unwrap();
        save_params(&s, dir.path()).unwrap();
        let t = load_params(dir.path(), DType::F32).unwrap();
        assert_eq!(t.names(), s.names());
        for n in s.names() {
            assert_eq!(to_vec_f64(&s.get(&n).unwrap()).unwrap(), to_vec_f64(&t.get(&n).unwrap()).unwrap());
            assert_eq!(s.param(&n).unwrap().is_trainable(), t.param(&n).unwrap().is_trainable());
        }
    }
}
