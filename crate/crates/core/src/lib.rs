//! Coordinate-based feature upsampling for frozen vision backbones.
//!
//! The crate provides the cross-attention upsampler ([`loftup`]), reference
//! upsamplers ([`baselines`]), pseudo-groundtruth construction
//! ([`pseudo_gt`]), training losses and loops ([`losses`], [`trainer`]),
//! desk-scale evaluation ([`eval`]) and file formats ([`io`]).
//!
//! Heavy loops run on rayon when the default `parallel` feature is enabled
//! and sequentially otherwise; results are identical either way.

pub mod backbone;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod loftup;
pub mod losses;
pub mod nn;
pub mod par;
pub mod params;
pub mod pseudo_gt;
pub mod trainer;
pub mod types;
pub mod upsampler;

pub use error::{Error, Result};
pub use types::{CoordGrid, Crop, CropBox, FeatureMap, ImageTensor, LabelRaster, MaskLabelMap};
