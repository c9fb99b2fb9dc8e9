//! `.lfuf` feature sidecars: magic `LFUF`, version `u32`, then `C`, `h`, `w` as
//! `u32`, then `C·h·w` little-endian `f32` values, channel-first row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::FeatureMap;

pub const LFUF_MAGIC: &[u8; 4] = b"LFUF";
pub const LFUF_VERSION: u32 = 1;

pub fn encode_lfuf(map: &FeatureMap) -> Result<Vec<u8>> {
    if map.batch() != 1 {
        return Err(Error::invalid("a sidecar holds exactly one feature map"));
    }
    let mut out = Vec::with_capacity(20 + 4 * map.data().len());
    out.extend_from_slice(LFUF_MAGIC);
    for v in [LFUF_VERSION, map.channels() as u32, map.height() as u32, map.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_lfuf(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    if bytes.len() < 20 || &bytes[..4] != LFUF_MAGIC {
        return Err(Error::load(path, "missing LFUF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != LFUF_VERSION {
        return Err(Error::load(path, format!("unsupported sidecar version {version}")));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = c * h * w;
    let body = &bytes[20..];
    if body.len() != 4 * n {
        return Err(Error::load(
            path,
            format!("expected {} payload bytes for {c}×{h}×{w}, found {}", 4 * n, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(1, c, h, w, data).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_lfuf(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_lfuf(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_lfuf(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_lfuf(&bytes, path)
}
