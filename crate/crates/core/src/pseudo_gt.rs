//! Pseudo-groundtruth targets for upsampler training.
//!
//! * mask-refined bicubic: bicubic-upsampled backbone features, each region
//!   of a class-agnostic mask pulled toward its mean by `alpha`;
//! * self-distilled: an EMA teacher run on a crop of an enlarged image, mask
//!   refined the same way and downsampled onto the matching student cells;
//! * 2× features: backbone features of a 2× enlarged image.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::baselines::interp::{average_pool, bicubic_upsample, bilinear_upsample, resize_image};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::types::{map_crop_to_student, Crop, CropBox, FeatureMap, ImageTensor, MaskLabelMap};
use crate::upsampler::Upsampler;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMode {
    #[default]
    Bilinear,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoGtConfig {
    pub alpha: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub crops_per_image: usize,
    pub downsample_mode: DownsampleMode,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        PseudoGtConfig {
            alpha: 0.8,
            t_min: 2.0,
            t_max: 4.0,
            crops_per_image: 2,
            downsample_mode: DownsampleMode::Bilinear,
        }
    }
}

impl PseudoGtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(1.0 <= self.t_min && self.t_min <= self.t_max) {
            return Err(Error::Config(format!(
                "need 1 ≤ t_min ≤ t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.crops_per_image == 0 {
            return Err(Error::Config("crops_per_image must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per region `m` (label ≥ 1): `out[m] = alpha · mean(f[m]) + (1 − alpha) · f[m]`.
/// Label-0 pixels pass through. Every batch entry uses the same masks.
pub fn mask_refine(f: &FeatureMap, masks: &MaskLabelMap, alpha: f64) -> Result<FeatureMap> {
    if (f.height(), f.width()) != (masks.height(), masks.width()) {
        return Err(Error::invalid(format!(
            "features are {}×{} but masks are {}×{}",
            f.height(),
            f.width(),
            masks.height(),
            masks.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let regions = masks.num_regions();
    let labels = masks.labels();
    let mut counts = vec![0usize; regions + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let plane = f.height() * f.width();
    let mut out = f.data().to_vec();
    let mut sums = vec![0.0; regions + 1];
    for chunk in out.chunks_exact_mut(plane) {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (v, &l) in chunk.iter().zip(labels) {
            sums[l as usize] += v;
        }
        for (v, &l) in chunk.iter_mut().zip(labels) {
            if l != 0 {
                let mean = sums[l as usize] / counts[l as usize] as f64;
                *v = alpha * mean + (1.0 - alpha) * *v;
            }
        }
    }
    FeatureMap::new(f.batch(), f.channels(), f.height(), f.width(), out)
}

/// Bicubic upsampling of `lowres` to the mask resolution followed by [`mask_refine`].
pub fn make_mask_bicubic_target(lowres: &FeatureMap, masks: &MaskLabelMap, out_h: usize, out_w: usize, alpha: f64) -> Result<FeatureMap> {
    if (masks.height(), masks.width()) != (out_h, out_w) {
        return Err(Error::invalid("masks must be given at the output resolution"));
    }
    mask_refine(&bicubic_upsample(lowres, out_h, out_w)?, masks, alpha)
}

/// Downsampling operator aligning teacher outputs with student cells.
pub fn downsample(f: &FeatureMap, h: usize, w: usize, mode: DownsampleMode) -> Result<FeatureMap> {
    if h > f.height() || w > f.width() || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "cannot downsample {}×{} to {h}×{w}",
            f.height(),
            f.width()
        )));
    }
    if (h, w) == (f.height(), f.width()) {
        return Ok(f.clone());
    }
    match mode {
        DownsampleMode::Bilinear => bilinear_upsample(f, h, w),
        DownsampleMode::Average => average_pool(f, h, w),
    }
}

/// Self-distillation target for one crop.
///
/// `img_hr` is the image enlarged by `t`; `teacher_box` is an `H × W` crop of it
/// and `masks_hr` the masks at the enlarged resolution. The result lives on the
/// student cells given by [`map_crop_to_student`].
#[allow(clippy::too_many_arguments)]
pub fn teacher_target<U: Upsampler + ?Sized>(
    teacher: &U,
    teacher_params: &ParamSet,
    img_hr: &ImageTensor,
    teacher_box: &CropBox,
    masks_hr: &MaskLabelMap,
    t: f64,
    cfg: &PseudoGtConfig,
    backbone: &dyn Backbone,
) -> Result<FeatureMap> {
    let student_box = map_crop_to_student(teacher_box, t)?;
    let crop = img_hr.crop(teacher_box)?;
    let lowres = backbone.forward(&crop)?;
    let full = teacher.forward(teacher_params, &crop, &lowres, teacher_box.h, teacher_box.w)?;
    let refined = mask_refine(&full, &masks_hr.crop(teacher_box)?, cfg.alpha)?;
    downsample(&refined, student_box.h, student_box.w, cfg.downsample_mode)
}

/// Backbone features of the 2×-enlarged image.
pub fn two_x_feature_target(backbone: &dyn Backbone, img: &ImageTensor) -> Result<FeatureMap> {
    let big = resize_image(img, 2 * img.height(), 2 * img.width())?;
    backbone.forward(&big)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, ToyBackbone};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn refine_hand_example() {
        let f = FeatureMap::new(1, 1, 1, 3, vec![1.0, 3.0, 10.0]).unwrap();
        let m = MaskLabelMap::new(1, 3, vec![1, 1, 2]).unwrap();
        let out = mask_refine(&f, &m, 0.5).unwrap();
        assert_eq!(out.data(), &[1.5, 2.5, 10.0]);
    }

    #[test]
    fn refine_degenerate_alphas_and_label_zero() {
        let f = FeatureMap::new(1, 2, 1, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 7.0]).unwrap();
        let m = MaskLabelMap::new(1, 4, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(mask_refine(&f, &m, 0.0).unwrap(), f);
        let full = mask_refine(&f, &m, 1.0).unwrap();
        assert_eq!(full.data(), &[1.5, 1.5, 3.0, 4.0, -0.5, -0.5, 5.0, 7.0]);
        assert!(mask_refine(&f, &MaskLabelMap::new(1, 3, vec![1, 1, 1]).unwrap(), 0.5).is_err());
        assert!(mask_refine(&f, &m, 1.5).is_err());
    }

    #[test]
    fn mask_bicubic_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lowres = FeatureMap::from_fn(3, 2, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let labels: Vec<u32> = (0..64).map(|i| if i % 8 < 3 { 1 } else { 2 }).collect();
        let masks = MaskLabelMap::new(8, 8, labels).unwrap();
        assert_eq!(
            make_mask_bicubic_target(&lowres, &masks, 8, 8, 0.0).unwrap(),
            bicubic_upsample(&lowres, 8, 8).unwrap()
        );
        let constant = FeatureMap::from_fn(3, 2, 2, |c, _, _| c as f64).unwrap();
        let out = make_mask_bicubic_target(&constant, &masks, 8, 8, 0.8).unwrap();
        for c in 0..3 {
            for v in &out.planes(0)[c * 64..(c + 1) * 64] {
                assert!((v - c as f64).abs() < 1e-12);
            }
        }
        assert!(make_mask_bicubic_target(&lowres, &masks, 16, 16, 0.5).is_err());
    }

    #[test]
    fn downsample_modes() {
        let f = FeatureMap::from_fn(1, 4, 4, |_, y, x| (y / 2 * 2 + x / 2) as f64).unwrap();
        assert_eq!(downsample(&f, 2, 2, DownsampleMode::Average).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(downsample(&f, 2, 2, DownsampleMode::Bilinear).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(downsample(&f, 4, 4, DownsampleMode::Bilinear).unwrap(), f);
        assert!(downsample(&f, 8, 4, DownsampleMode::Bilinear).is_err());
        let c = FeatureMap::from_fn(2, 6, 6, |_, _, _| 0.25).unwrap();
        assert!(downsample(&c, 4, 3, DownsampleMode::Bilinear).unwrap().data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_x_target_shapes() {
        let bb = ToyBackbone::new(BackboneSpec {
            patch_size: 14,
            channels: 4,
            seed: 0,
        })
        .unwrap();
        let img = ImageTensor::filled(1, 112, 112, 0.4).unwrap();
        let t = two_x_feature_target(&bb, &img).unwrap();
        assert_eq!((t.height(), t.width()), (16, 16));
        let v = t.get(0, 2, 0, 0);
        assert!(t.planes(0)[2 * 256..3 * 256].iter().all(|x| *x == v));
        assert_eq!(t, two_x_feature_target(&bb, &img).unwrap());
    }
}
