//! Checkpoint container.
//!
//! Layout: the 8-byte magic `TUNFPCKP`, a little-endian u32 format version,
//! a little-endian u64 header length, a JSON header (config, counters and
//! the ordered tensor table), then every tensor as little-endian f64 in
//! row-major order. Serialization is canonical, so save→load→save
//! reproduces the file byte for byte.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelState, NetConfig, Params};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TUNFPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetConfig,
    step: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let tensors = state.params.tensors();
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        seed: state.seed,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let body: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut buf = bytes;
    if take(&mut buf, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(take(&mut buf, 8, "header length")?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(&mut buf, hlen as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;

    let mut params = Params::init(&header.config, 0);
    let expected: Vec<TensorEntry> = params
        .tensors()
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            rows: t.nrows(),
            cols: t.ncols(),
        })
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (e, h) in expected.iter().zip(&header.tensors) {
        if e != h {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` ({}x{}) does not match expected `{}` ({}x{})",
                h.name, h.rows, h.cols, e.name, e.rows, e.cols
            )));
        }
    }
    for (name, t) in params.tensors_mut() {
        let raw = take(&mut buf, t.len() * 8, &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        *t = Array2::from_shape_vec(t.raw_dim(), values.collect()).expect("shape checked");
    }
    if !buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
    }
    Ok(ModelState {
        config: header.config,
        params,
        step: header.step,
        seed: header.seed,
    })
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(state))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        let cfg = NetConfig {
            d: 3,
            hidden: 2,
            n: 5,
            classes: 4,
            grl_lambda: 0.7,
            ..NetConfig::default()
        };
        let mut s = ModelState::new(cfg, 11).unwrap();
        s.step = 42;
        s.params.app_head.b[[0, 1]] = f64::MIN_POSITIVE / 3.0;
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = state();
        let a = to_bytes(&s);
        let back = from_bytes(&a).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back), a);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&state(), &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save(&load(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let mut bytes = to_bytes(&state());
        bytes[8] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));

        let good = to_bytes(&state());
        let hlen = u64::from_le_bytes(good[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&good[20..20 + hlen]).unwrap();
        let edited = header.replacen("\"classes\":4", "\"classes\":5", 1);
        let mut bad = good[..12].to_vec();
        bad.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        bad.extend_from_slice(edited.as_bytes());
        bad.extend_from_slice(&good[20 + hlen..]);
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("does not match")));

        assert!(from_bytes(&good[..good.len() - 1]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
    }
}
