//! `MST1` tensor files and parameter directories.
//!
//! Layout: the magic bytes `MST1`, a little-endian `u32` rank `R`, `R`
//! little-endian `u32` dimensions, then `product(dims)` little-endian IEEE-754
//! `f64` values in row-major order.
//!
//! A parameter directory holds one `MST1` file per tensor plus
//! `manifest.json` naming each tensor's role, head, scale and layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKey, ParamTree};
use crate::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MST1";
pub const MANIFEST: &str = "manifest.json";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated {what} at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected MST1".into()));
    }
    let rank = u32_at(bytes, &mut pos, "rank")? as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(bytes, &mut pos, "dimension")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dimensions {shape:?} overflow")))?;
    let payload = take(bytes, &mut pos, count.saturating_mul(8), "payload")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    #[serde(flatten)]
    pub key: ParamKey,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
}

/// Writes every tensor of `params` into `dir` (created if missing).
pub fn save_params<T: Scalar, P: ParamTree<Tensor<T>>>(dir: impl AsRef<Path>, params: &P) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut failure = None;
    params.visit_params(&mut |key, t| {
        let name = key.name();
        let file = format!("{name}.mst");
        if failure.is_none() {
            if let Err(e) = write_tensor(dir.join(&file), t) {
                failure = Some(e);
            }
        }
        entries.push(ManifestEntry {
            name,
            file,
            key: key.clone(),
            shape: t.shape().to_vec(),
        });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = Manifest {
        format: "MST1".into(),
        entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Fills `params` from a directory written by [`save_params`]. `params`
/// supplies the structure; every entry must be present with a matching shape.
pub fn load_params<T: Scalar, P: ParamTree<Tensor<T>>>(dir: impl AsRef<Path>, params: &mut P) -> Result<()> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut failure = None;
    params.visit_params_mut(&mut |key, slot| {
        if failure.is_some() {
            return;
        }
        let name = key.name();
        let result = manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Manifest(format!("missing entry {name}")))
            .and_then(|e| read_tensor::<T>(dir.join(&e.file)))
            .and_then(|t| {
                if t.shape() == slot.shape() {
                    *slot = t;
                    Ok(())
                } else {
                    Err(Error::Manifest(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
            });
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    failure.map_or(Ok(()), Err)
}
