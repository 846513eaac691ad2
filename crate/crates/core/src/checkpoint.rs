//! Binary checkpoint codec for [`GainNetworkParams`].
//!
//! ```text
//! "FKN1" | version: u8 | count: u32
//! count × ( name_len: u32 | name: utf-8 | rank: u32 | rank × dim: u32 )
//! payload: f64 × Σ numel, row-major, manifest order
//! ```
//! All integers and floats are little-endian. The same bytes are what a
//! client would upload in a networked deployment.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{GainNetworkParams, NetworkShape, TensorSpec, FEATURE_LEN, TRI_LEN};

pub const MAGIC: &[u8; 4] = b"FKN1";
pub const VERSION: u8 = 1;

pub fn encode(params: &GainNetworkParams) -> Vec<u8> {
    let manifest = params.manifest();
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for spec in &manifest {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Size in bytes of [`encode`]'s output.
pub fn encoded_len(params: &GainNetworkParams) -> usize {
    let header: usize = params
        .manifest()
        .iter()
        .map(|s| 4 + s.name.len() + 4 + 4 * s.shape.len())
        .sum();
    MAGIC.len() + 1 + 4 + header + 8 * params.len()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} (file has {} bytes)",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn find<'m>(manifest: &'m [TensorSpec], name: &str) -> Result<&'m TensorSpec> {
    manifest
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::ManifestMismatch(format!("tensor `{name}` missing")))
}

fn dim(spec: &TensorSpec, axis: usize) -> Result<usize> {
    spec.shape
        .get(axis)
        .copied()
        .ok_or_else(|| Error::ManifestMismatch(format!("tensor `{}` has rank {}", spec.name, spec.shape.len())))
}

/// Recovers the layer widths from a manifest; the caller still compares the
/// full manifest against the one these widths generate.
fn infer_shape(manifest: &[TensorSpec]) -> Result<NetworkShape> {
    let gru = |name: &str| -> Result<usize> { dim(find(manifest, &format!("{name}.weight_hh"))?, 1) };
    Ok(NetworkShape {
        embed: dim(find(manifest, "embed.weight")?, 0)?,
        gru: [gru("gru1")?, gru("gru2")?, gru("gru3")?],
        head: dim(find(manifest, "r_head.hidden.weight")?, 0)?,
        link: dim(find(manifest, "link12.weight")?, 0)?,
    })
}

pub fn decode(bytes: &[u8]) -> Result<GainNetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic bytes {magic:?}")));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push(TensorSpec { name, shape });
    }

    let shape = infer_shape(&manifest)?;
    let expected = shape.manifest();
    if expected != manifest {
        let detail = expected
            .iter()
            .zip(&manifest)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected `{}` {:?}, found `{}` {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), manifest.len()));
        return Err(Error::ManifestMismatch(format!(
            "{detail} (inputs {FEATURE_LEN}, heads {TRI_LEN})"
        )));
    }

    let n = shape.parameter_count();
    let payload = r.take(8 * n, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GainNetworkParams::from_values(shape, values)
}

pub fn save_params(params: &GainNetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<GainNetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
