//! File formats shared by the pipeline stages.
//!
//! Parameter arrays use a little-endian binary layout:
//!
//! ```text
//! b"RBMP" | u32 version | u32 lx | u32 ly | u64 count | count * 10*lx*ly f64
//! ```
//!
//! with each state's values in (cell, slot) order.

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::rbm::RbmParams;
use crate::scalar::Real;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const PARAMS_MAGIC: &[u8; 4] = b"RBMP";
const PARAMS_VERSION: u32 = 1;

/// Writes via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_params<T: Real>(lat: &Lattice, states: &[RbmParams<T>]) -> Result<Vec<u8>> {
    let per = 10 * lat.lx() * lat.ly();
    let mut out = Vec::with_capacity(24 + 8 * per * states.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(lat.lx() as u32).to_le_bytes());
    out.extend_from_slice(&(lat.ly() as u32).to_le_bytes());
    out.extend_from_slice(&(states.len() as u64).to_le_bytes());
    for s in states {
        s.check_lattice(lat)?;
        for v in s.values() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params<T: Real>(path: &Path, bytes: &[u8]) -> Result<(Lattice, Vec<RbmParams<T>>)> {
    let bad = |why: &str| Error::format(path, why.to_string());
    if bytes.len() < 24 || &bytes[..4] != PARAMS_MAGIC {
        return Err(bad("missing parameter-file header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if u32_at(4) != PARAMS_VERSION {
        return Err(bad("unsupported parameter-file version"));
    }
    let lat = Lattice::new(u32_at(8) as usize, u32_at(12) as usize)?;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let per = 10 * lat.lx() * lat.ly();
    let body = &bytes[24..];
    if body.len() != 8 * per * count {
        return Err(bad("parameter-file length does not match header"));
    }
    let values: Vec<T> = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let states = values
        .chunks_exact(per)
        .map(|c| RbmParams::from_values(&lat, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((lat, states))
}

pub fn write_params<T: Real>(path: &Path, lat: &Lattice, states: &[RbmParams<T>]) -> Result<()> {
    write_atomic(path, &encode_params(lat, states)?)
}

pub fn read_params<T: Real>(path: &Path) -> Result<(Lattice, Vec<RbmParams<T>>)> {
    decode_params(path, &read_bytes(path)?)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}
