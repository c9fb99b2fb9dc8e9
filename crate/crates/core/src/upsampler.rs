//! Common interface over all upsamplers, trainable or not.

use serde::{Deserialize, Serialize};

use crate::baselines::interp::{bicubic_upsample, bilinear_upsample};
use crate::baselines::local_implicit::{LocalImplicit, LocalImplicitConfig};
use crate::baselines::resize_conv::{ResizeConv, ResizeConvConfig};
use crate::error::Result;
use crate::loftup::{LoftUp, LoftUpConfig, LoftUpTape};
use crate::params::ParamSet;
use crate::types::{FeatureMap, ImageTensor};

/// Maps low-resolution backbone features plus the image to features at
/// `out_h × out_w`.
pub trait Upsampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn init_params(&self, seed: u64) -> ParamSet;
    fn forward(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap>;
}

/// An upsampler with reverse-mode gradients over a single image.
pub trait Trainable: Upsampler {
    type Tape: Send + Sync;
    fn forward_train(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(FeatureMap, Self::Tape)>;
    fn backward(&self, params: &ParamSet, tape: &Self::Tape, grad_out: &FeatureMap) -> Result<ParamSet>;
}

impl Upsampler for LoftUp {
    fn name(&self) -> &'static str {
        "loftup"
    }
    fn init_params(&self, seed: u64) -> ParamSet {
        LoftUp::init_params(self, seed)
    }
    fn forward(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        LoftUp::forward(self, params, img, lowres, out_h, out_w)
    }
}

impl Trainable for LoftUp {
    type Tape = LoftUpTape;
    fn forward_train(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(FeatureMap, LoftUpTape)> {
        LoftUp::forward_train(self, params, img, lowres, out_h, out_w)
    }
    fn backward(&self, params: &ParamSet, tape: &LoftUpTape, grad_out: &FeatureMap) -> Result<ParamSet> {
        LoftUp::backward(self, params, tape, grad_out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Bilinear;

#[derive(Clone, Copy, Debug, Default)]
pub struct Bicubic;

impl Upsampler for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear"
    }
    fn init_params(&self, _seed: u64) -> ParamSet {
        ParamSet::new()
    }
    fn forward(&self, _params: &ParamSet, _img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        bilinear_upsample(lowres, out_h, out_w)
    }
}

impl Upsampler for Bicubic {
    fn name(&self) -> &'static str {
        "bicubic"
    }
    fn init_params(&self, _seed: u64) -> ParamSet {
        ParamSet::new()
    }
    fn forward(&self, _params: &ParamSet, _img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        bicubic_upsample(lowres, out_h, out_w)
    }
}

/// Serializable choice of upsampler, as stored in checkpoints and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Loftup(LoftUpConfig),
    ResizeConv(ResizeConvConfig),
    LocalImplicit(LocalImplicitConfig),
    Bilinear,
    Bicubic,
}

impl ModelConfig {
    /// Builds a model config by name with the given channel count and defaults elsewhere.
    pub fn by_name(name: &str, channels: usize) -> Result<Self> {
        Ok(match name {
            "loftup" => ModelConfig::Loftup(LoftUpConfig::with_channels(channels)),
            "resize-conv" => ModelConfig::ResizeConv(ResizeConvConfig::with_channels(channels)),
            "local-implicit" => ModelConfig::LocalImplicit(LocalImplicitConfig::with_channels(channels)),
            "bilinear" => ModelConfig::Bilinear,
            "bicubic" => ModelConfig::Bicubic,
            other => {
                return Err(crate::Error::Config(format!(
                    "unknown upsampler `{other}` (expected loftup, resize-conv, local-implicit, bilinear or bicubic)"
                )))
            }
        })
    }

    pub fn build(&self) -> Result<Model> {
        Ok(match self {
            ModelConfig::Loftup(c) => Model::Loftup(LoftUp::new(c.clone())?),
            ModelConfig::ResizeConv(c) => Model::ResizeConv(ResizeConv::new(c.clone())?),
            ModelConfig::LocalImplicit(c) => Model::LocalImplicit(LocalImplicit::new(c.clone())?),
            ModelConfig::Bilinear => Model::Bilinear(Bilinear),
            ModelConfig::Bicubic => Model::Bicubic(Bicubic),
        })
    }
}

/// Any of the available upsamplers.
#[derive(Clone, Debug)]
pub enum Model {
    Loftup(LoftUp),
    ResizeConv(ResizeConv),
    LocalImplicit(LocalImplicit),
    Bilinear(Bilinear),
    Bicubic(Bicubic),
}

impl Model {
    fn inner(&self) -> &dyn Upsampler {
        match self {
            Model::Loftup(m) => m,
            Model::ResizeConv(m) => m,
            Model::LocalImplicit(m) => m,
            Model::Bilinear(m) => m,
            Model::Bicubic(m) => m,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, Model::Bilinear(_) | Model::Bicubic(_))
    }
}

impl Upsampler for Model {
    fn name(&self) -> &'static str {
        self.inner().name()
    }
    fn init_params(&self, seed: u64) -> ParamSet {
        self.inner().init_params(seed)
    }
    fn forward(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        self.inner().forward(params, img, lowres, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        for name in ["loftup", "resize-conv", "local-implicit", "bilinear", "bicubic"] {
            let cfg = ModelConfig::by_name(name, 16).unwrap();
            let text = toml::to_string(&cfg).unwrap();
            let back: ModelConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(cfg.build().unwrap().name(), name);
        }
        assert!(ModelConfig::by_name("nearest", 16).is_err());
    }

    #[test]
    fn fixed_upsamplers_have_no_params() {
        let img = ImageTensor::filled(1, 8, 8, 0.5).unwrap();
        let f = FeatureMap::from_fn(2, 2, 2, |c, y, x| (c + y + x) as f64).unwrap();
        for m in [Model::Bilinear(Bilinear), Model::Bicubic(Bicubic)] {
            assert!(m.init_params(0).is_empty());
            assert!(!m.is_trainable());
            let out = m.forward(&ParamSet::new(), &img, &f, 8, 8).unwrap();
            assert_eq!((out.channels(), out.height(), out.width()), (2, 8, 8));
        }
    }
}
