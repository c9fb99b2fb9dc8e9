//! Frozen low-resolution feature extractors.
//!
//! The toy backbone stands in for a pretrained vision transformer: every
//! `p × p` patch is flattened, projected by a fixed seeded matrix and squashed
//! with `tanh`. Real backbone features can be plugged in through the `file`
//! adapter, which serves precomputed `.lfuf` sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::features::read_lfuf;
use crate::linalg::{gemm, View, ViewMut};
use crate::types::{FeatureMap, ImageTensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub patch_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            patch_size: 8,
            channels: 32,
            seed: 0,
        }
    }
}

/// A frozen feature extractor. Implementations expose no trainable parameters.
pub trait Backbone: Send + Sync {
    fn patch_size(&self) -> usize;
    fn channels(&self) -> usize;
    fn forward(&self, img: &ImageTensor) -> Result<FeatureMap>;

    /// Low-resolution grid produced for an `h × w` input.
    fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size();
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "image {h}×{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    spec: BackboneSpec,
    /// `[C, 3·p·p]`
    proj: Vec<f64>,
    gain: f64,
}

impl ToyBackbone {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        if spec.patch_size == 0 || spec.channels == 0 {
            return Err(Error::invalid("toy backbone needs patch_size ≥ 1 and channels ≥ 1"));
        }
        let fan_in = 3 * spec.patch_size * spec.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6c66_7570_746f_7962);
        let bound = 3f64.sqrt();
        let proj = (0..spec.channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(ToyBackbone {
            gain: 4.0 / (fan_in as f64).sqrt(),
            spec,
            proj,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }
}

impl Backbone for ToyBackbone {
    fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn channels(&self) -> usize {
        self.spec.channels
    }

    fn forward(&self, img: &ImageTensor) -> Result<FeatureMap> {
        let (gh, gw) = self.grid_for(img.height(), img.width())?;
        let p = self.spec.patch_size;
        let c = self.spec.channels;
        let fan_in = 3 * p * p;
        let (h, w) = (img.height(), img.width());
        let mut maps = Vec::with_capacity(img.batch());
        for b in 0..img.batch() {
            let planes = img.planes(b);
            let mut patches = vec![0.0; gh * gw * fan_in];
            for py in 0..gh {
                for px in 0..gw {
                    let row = &mut patches[(py * gw + px) * fan_in..][..fan_in];
                    for ch in 0..3 {
                        for dy in 0..p {
                            let src = &planes[ch * h * w + (py * p + dy) * w + px * p..][..p];
                            for (dx, v) in src.iter().enumerate() {
                                row[(ch * p + dy) * p + dx] = v - 0.5;
                            }
                        }
                    }
                }
            }
            let mut tokens = vec![0.0; gh * gw * c];
            gemm(
                self.gain,
                View::rm(&patches, gh * gw, fan_in),
                View::rm(&self.proj, c, fan_in).t(),
                0.0,
                ViewMut::rm(&mut tokens, gh * gw, c),
            );
            tokens.iter_mut().for_each(|v| *v = v.tanh());
            maps.push(FeatureMap::from_tokens(&tokens, c, gh, gw)?);
        }
        FeatureMap::stack(&maps)
    }
}

pub fn toy_backbone_forward(img: &ImageTensor, spec: &BackboneSpec) -> Result<FeatureMap> {
    ToyBackbone::new(spec.clone())?.forward(img)
}

/// Serves a precomputed feature map verbatim.
#[derive(Clone, Debug)]
pub struct FileBackbone {
    features: FeatureMap,
    patch_size: usize,
}

impl FileBackbone {
    pub fn new(features: FeatureMap, patch_size: usize) -> Self {
        FileBackbone { features, patch_size }
    }

    pub fn from_sidecar(path: impl AsRef<Path>, patch_size: usize) -> Result<Self> {
        Ok(Self::new(read_lfuf(path)?, patch_size))
    }
}

impl Backbone for FileBackbone {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn channels(&self) -> usize {
        self.features.channels()
    }

    fn forward(&self, img: &ImageTensor) -> Result<FeatureMap> {
        let (gh, gw) = self.grid_for(img.height(), img.width())?;
        if (gh, gw) != (self.features.height(), self.features.width()) {
            return Err(Error::invalid(format!(
                "sidecar features are {}×{}, image implies {gh}×{gw}",
                self.features.height(),
                self.features.width()
            )));
        }
        Ok(self.features.clone())
    }
}

/// How a backbone is selected in configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "lowercase")]
pub enum AdapterConfig {
    Toy(BackboneSpec),
    File { sidecar: PathBuf, patch_size: usize },
}

/// Name → backbone lookup.
#[derive(Clone, Default)]
pub struct BackboneRegistry {
    adapters: BTreeMap<String, Arc<dyn Backbone>>,
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, backbone: Arc<dyn Backbone>) {
        self.adapters.insert(name.into(), backbone);
    }

    pub fn from_config(name: &str, cfg: &AdapterConfig) -> Result<Self> {
        let backbone: Arc<dyn Backbone> = match cfg {
            AdapterConfig::Toy(spec) => Arc::new(ToyBackbone::new(spec.clone())?),
            AdapterConfig::File { sidecar, patch_size } => {
                Arc::new(FileBackbone::from_sidecar(sidecar, *patch_size)?)
            }
        };
        let mut reg = Self::new();
        reg.register(name, backbone);
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Backbone>> {
        self.adapters
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown backbone adapter {name:?}")))
    }
}

pub fn backbone_forward(img: &ImageTensor, registry: &BackboneRegistry, adapter: &str) -> Result<FeatureMap> {
    registry.get(adapter)?.forward(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::features::write_lfuf;

    fn spec(p: usize, c: usize) -> BackboneSpec {
        BackboneSpec {
            patch_size: p,
            channels: c,
            seed: 3,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(1, h, w, data).unwrap()
    }

    #[test]
    fn output_grid_sizes() {
        let img = ImageTensor::filled(1, 224, 224, 0.3).unwrap();
        let f = toy_backbone_forward(&img, &spec(14, 4)).unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (4, 16, 16));
        let f = toy_backbone_forward(&img, &spec(16, 4)).unwrap();
        assert_eq!((f.height(), f.width()), (14, 14));
        assert!(toy_backbone_forward(&ImageTensor::filled(1, 30, 28, 0.0).unwrap(), &spec(14, 4)).is_err());
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let img = ImageTensor::filled(1, 32, 32, 0.0).unwrap();
        let f = toy_backbone_forward(&img, &spec(8, 6)).unwrap();
        for c in 0..6 {
            let v = f.get(0, c, 0, 0);
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(f.get(0, c, y, x), v);
                }
            }
        }
    }

    #[test]
    fn swapping_patches_swaps_cells_only() {
        let img = noise_image(16, 24, 5);
        let p = 8;
        // swap patch (0,0) with patch (1,2)
        let swapped = ImageTensor::from_fn(16, 24, |y, x| {
            let (py, px) = (y / p, x / p);
            let (sy, sx) = match (py, px) {
                (0, 0) => (1, 2),
                (1, 2) => (0, 0),
                other => other,
            };
            let (yy, xx) = (sy * p + y % p, sx * p + x % p);
            [img.get(0, 0, yy, xx), img.get(0, 1, yy, xx), img.get(0, 2, yy, xx)]
        })
        .unwrap();
        let bb = ToyBackbone::new(spec(8, 5)).unwrap();
        let a = bb.forward(&img).unwrap();
        let b = bb.forward(&swapped).unwrap();
        for c in 0..5 {
            for y in 0..2 {
                for x in 0..3 {
                    let (sy, sx) = match (y, x) {
                        (0, 0) => (1, 2),
                        (1, 2) => (0, 0),
                        other => other,
                    };
                    assert_eq!(b.get(0, c, y, x), a.get(0, c, sy, sx));
                }
            }
        }
        assert_ne!(a.get(0, 0, 0, 0), a.get(0, 0, 1, 2));
    }

    #[test]
    fn registry_dispatch() {
        let mut reg = BackboneRegistry::new();
        reg.register("toy", Arc::new(ToyBackbone::new(spec(14, 8)).unwrap()));
        let img = noise_image(112, 112, 1);
        let a = backbone_forward(&img, &reg, "toy").unwrap();
        let b = backbone_forward(&img, &reg, "toy").unwrap();
        assert_eq!((a.height(), a.width()), (8, 8));
        assert_eq!(a, b);
        assert!(matches!(backbone_forward(&img, &reg, "dinov2"), Err(Error::Config(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lfuf");
        let stored = a.map(|v| v as f32 as f64).unwrap();
        write_lfuf(&path, &stored).unwrap();
        let reg = BackboneRegistry::from_config(
            "file",
            &AdapterConfig::File {
                sidecar: path,
                patch_size: 14,
            },
        )
        .unwrap();
        assert_eq!(backbone_forward(&img, &reg, "file").unwrap(), stored);
    }
}
