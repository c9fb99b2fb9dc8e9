//! Checkpoint directories: `manifest.toml` plus one `<name>.lfup` array per
//! parameter. Arrays are `LFUP`, version `u32`, dtype `u32` (0 = f32), rank
//! `u32`, dims as `u32`, then little-endian values.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::params::{Param, ParamSet};
use crate::trainer::TrainConfig;
use crate::upsampler::ModelConfig;

pub const LFUP_MAGIC: &[u8; 4] = b"LFUP";
pub const LFUP_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: u8,
    pub step: usize,
    /// Digest of the seed and step the run stopped at.
    pub rng_digest: String,
    pub model: ModelConfig,
    pub backbone: BackboneSpec,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
}

/// FNV-1a over the seed and step, as 16 hex digits.
pub fn rng_digest(seed: u64, step: usize) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain((step as u64).to_le_bytes().iter()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn encode_lfup(p: &Param) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * p.shape().len() + 4 * p.len());
    out.extend_from_slice(LFUP_MAGIC);
    for v in [LFUP_VERSION, DTYPE_F32, p.shape().len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in p.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in p.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_lfup(bytes: &[u8], path: &Path) -> Result<Param> {
    if bytes.len() < 16 || &bytes[..4] != LFUP_MAGIC {
        return Err(Error::load(path, "missing LFUP header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != LFUP_VERSION {
        return Err(Error::load(path, format!("unsupported array version {}", word(4))));
    }
    if word(8) != DTYPE_F32 {
        return Err(Error::load(path, format!("unsupported dtype {}", word(8))));
    }
    let rank = word(12) as usize;
    let body = 16 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::load(path, "truncated shape"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(16 + 4 * i) as usize).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != body + 4 * n {
        return Err(Error::load(path, format!("expected {n} values, found {} bytes", bytes.len() - body)));
    }
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Param::new(shape, data).map_err(|e| Error::load(path, e.to_string()))
}

/// Writes `params` (as f32) and the manifest, whose parameter list is
/// rebuilt from `params`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = manifest.clone();
    m.params = params
        .iter()
        .map(|(n, p)| ParamEntry {
            name: n.to_string(),
            shape: p.shape().to_vec(),
        })
        .collect();
    for (name, p) in params.iter() {
        let path = dir.join(format!("{name}.lfup"));
        fs::write(&path, encode_lfup(p)).map_err(|e| Error::io(&path, e))?;
    }
    let text = toml::to_string(&m).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))
}

/// Loads a checkpoint, checking that the manifest and the array files agree.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, ParamSet)> {
    let manifest = read_manifest(dir)?;
    let listed: BTreeSet<String> = manifest.params.iter().map(|e| format!("{}.lfup", e.name)).collect();
    let mut present = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".lfup") {
            present.insert(name);
        }
    }
    if let Some(extra) = present.difference(&listed).next() {
        return Err(Error::load(dir.join(extra), "array file not listed in the manifest"));
    }
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let path = dir.join(format!("{}.lfup", e.name));
        let bytes = fs::read(&path).map_err(|err| Error::load(&path, format!("listed parameter unreadable: {err}")))?;
        let p = decode_lfup(&bytes, &path)?;
        if p.shape() != e.shape.as_slice() {
            return Err(Error::load(&path, format!("shape {:?} disagrees with manifest {:?}", p.shape(), e.shape)));
        }
        params.insert(e.name.clone(), p)?;
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loftup::{LoftUp, LoftUpConfig};
    use crate::trainer::TrainConfig;

    fn sample() -> (ParamSet, Manifest) {
        let cfg = LoftUpConfig {
            num_blocks: 1,
            pe_freqs: 2,
            ..LoftUpConfig::with_channels(8)
        };
        let params = LoftUp::new(cfg.clone()).unwrap().init_params(3);
        let manifest = Manifest {
            stage: 1,
            step: 12,
            rng_digest: rng_digest(0, 12),
            model: ModelConfig::Loftup(cfg),
            backbone: BackboneSpec::default(),
            train: Some(TrainConfig::stage1()),
            params: Vec::new(),
        };
        (params, manifest)
    }

    #[test]
    fn round_trip_is_bitwise_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (mut params, manifest) = sample();
        params.quantize_f32();
        save_checkpoint(dir.path(), &params, &manifest).unwrap();
        let (m, back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, params);
        assert_eq!(m.model, manifest.model);
        assert_eq!(m.train, manifest.train);
        assert_eq!(m.params.len(), params.len());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (params, manifest) = sample();
        save_checkpoint(dir.path(), &params, &manifest).unwrap();
        let victim = dir.path().join("head.bias.lfup");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Load { .. })));
        fs::remove_file(&victim).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        fs::write(&victim, &bytes).unwrap();
        load_checkpoint(dir.path()).unwrap();
        fs::write(dir.path().join("stray.lfup"), &bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn header_checks() {
        let p = Param::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut bytes = encode_lfup(&p);
        assert_eq!(&bytes[..4], b"LFUP");
        assert_eq!(bytes.len(), 16 + 8 + 8);
        assert_eq!(decode_lfup(&bytes, Path::new("x")).unwrap(), p);
        bytes[8] = 1;
        assert!(decode_lfup(&bytes, Path::new("x")).is_err());
        assert!(decode_lfup(b"LFUQ", Path::new("x")).is_err());
    }
}
