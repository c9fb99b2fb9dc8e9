//! Shared rasters, coordinate conventions and crop geometry.
//!
//! Spatial coordinates are normalized pixel centers in `[-1, 1]`: pixel `j` of
//! a row of width `w` sits at `2 (j + 0.5) / w - 1`. Grids of different
//! resolutions therefore sample the same continuous square.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// RGB raster batch, `batch × 3 × H × W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {batch}×3×{height}×{width}"
            )));
        }
        if data.len() != batch * 3 * height * width {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                batch * 3 * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(batch, height, width, vec![value; batch * 3 * height * width])
    }

    /// Builds a single image from a per-pixel closure returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        let plane = height * width;
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in 0..3 {
                    data[c * plane + y * width + x] = rgb[c];
                }
            }
        }
        Self::new(1, height, width, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * 3 + c) * self.height + y) * self.width + x]
    }

    /// Channel-first planes of image `b` (length `3·H·W`).
    pub fn planes(&self, b: usize) -> &[f64] {
        let n = 3 * self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    /// Single-image tensor for batch entry `b`.
    pub fn image(&self, b: usize) -> ImageTensor {
        ImageTensor {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.planes(b).to_vec(),
        }
    }

    /// Concatenates equally sized images along the batch axis.
    pub fn stack(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        let mut batch = 0;
        for img in images {
            if img.height != first.height || img.width != first.width {
                return Err(Error::invalid("stacked images differ in size"));
            }
            data.extend_from_slice(&img.data);
            batch += img.batch;
        }
        Ok(ImageTensor {
            batch,
            height: first.height,
            width: first.width,
            data,
        })
    }
}

/// Dense feature grid, `batch × C × h × w`, channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {batch}×{channels}×{height}×{width}"
            )));
        }
        if data.len() != batch * channels * height * width {
            return Err(Error::invalid(format!(
                "feature data has {} values, expected {}",
                data.len(),
                batch * channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in feature map".into()));
        }
        Ok(FeatureMap {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        assert!(batch > 0 && channels > 0 && height > 0 && width > 0);
        FeatureMap {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    /// Single-image map from a closure over `(c, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(1, channels, height, width, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }

    pub fn planes(&self, b: usize) -> &[f64] {
        let n = self.channels * self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn image(&self, b: usize) -> FeatureMap {
        FeatureMap {
            batch: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.planes(b).to_vec(),
        }
    }

    pub fn stack(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero feature maps"))?;
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        let mut batch = 0;
        for m in maps {
            if (m.channels, m.height, m.width) != (first.channels, first.height, first.width) {
                return Err(Error::invalid("stacked feature maps differ in shape"));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Ok(FeatureMap {
            batch,
            channels: first.channels,
            height: first.height,
            width: first.width,
            data,
        })
    }

    /// Pixel-major token matrix (`h·w × C`) for image `b`.
    pub fn tokens(&self, b: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        let src = self.planes(b);
        let mut out = vec![0.0; plane * self.channels];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = src[c * plane + p];
            }
        }
        out
    }

    /// Inverse of [`FeatureMap::tokens`] for a single image.
    pub fn from_tokens(tokens: &[f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        let plane = height * width;
        if tokens.len() != plane * channels {
            return Err(Error::invalid("token matrix does not match requested shape"));
        }
        let mut data = vec![0.0; tokens.len()];
        for p in 0..plane {
            for c in 0..channels {
                data[c * plane + p] = tokens[p * channels + c];
            }
        }
        Self::new(1, channels, height, width, data)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.batch, self.channels, self.height, self.width)
            == (other.batch, other.channels, other.height, other.width)
    }

    /// Elementwise combination of two same-shaped maps.
    pub fn zip_with(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::invalid("feature maps differ in shape"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Self::new(self.batch, self.channels, self.height, self.width, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.batch,
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| f(*v)).collect(),
        )
    }
}

/// Integer raster (class labels, predictions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("label raster dimensions must be positive"));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label raster has {} values, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(LabelRaster { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling under pixel-center alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        let ys: Vec<usize> = (0..height).map(|i| nearest_src(i, height, self.height)).collect();
        let xs: Vec<usize> = (0..width).map(|j| nearest_src(j, width, self.width)).collect();
        let mut labels = Vec::with_capacity(height * width);
        for &sy in &ys {
            for &sx in &xs {
                labels.push(self.get(sy, sx));
            }
        }
        Self::new(height, width, labels)
    }
}

fn nearest_src(i: usize, dst: usize, src: usize) -> usize {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    s.min(src - 1)
}

/// Class-agnostic region partition. Label 0 means "no region"; labels `1..=N`
/// index the regions, with every label in that range present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLabelMap {
    raster: LabelRaster,
    regions: usize,
}

impl MaskLabelMap {
    /// Validates that the non-zero labels are exactly `1..=max`.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let raster = LabelRaster::new(height, width, labels)?;
        let max = raster.max_label() as usize;
        let mut seen = vec![false; max + 1];
        for &l in &raster.labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|l| !seen[*l]) {
            return Err(Error::invalid(format!(
                "mask labels are not compact: label {missing} missing below max {max}"
            )));
        }
        Ok(MaskLabelMap { raster, regions: max })
    }

    /// Relabels arbitrary non-zero ids to `1..=N`, preserving their numeric order.
    pub fn from_raw(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let raster = LabelRaster::new(height, width, labels)?;
        Ok(Self::compacted(raster))
    }

    fn compacted(mut raster: LabelRaster) -> Self {
        let mut ids: BTreeMap<u32, u32> = raster.labels.iter().filter(|l| **l != 0).map(|l| (*l, 0)).collect();
        for (i, v) in ids.values_mut().enumerate() {
            *v = i as u32 + 1;
        }
        for l in raster.labels.iter_mut() {
            if *l != 0 {
                *l = ids[l];
            }
        }
        MaskLabelMap {
            regions: ids.len(),
            raster,
        }
    }

    /// Resolves possibly overlapping binary masks into a partition: where masks
    /// overlap the smallest one wins. Uncovered pixels get label 0. Ties in area
    /// go to the earlier mask.
    pub fn from_overlapping(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let n = height * width;
        if let Some(m) = masks.iter().find(|m| m.len() != n) {
            return Err(Error::invalid(format!(
                "binary mask has {} pixels, expected {n}",
                m.len()
            )));
        }
        let mut order: Vec<(usize, usize)> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| (m.iter().filter(|v| **v).count(), i))
            .collect();
        order.sort();
        let mut labels = vec![0u32; n];
        for (_, i) in order.iter().rev() {
            for (l, covered) in labels.iter_mut().zip(&masks[*i]) {
                if *covered {
                    *l = *i as u32 + 1;
                }
            }
        }
        Self::from_raw(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }
    pub fn width(&self) -> usize {
        self.raster.width
    }
    pub fn labels(&self) -> &[u32] {
        &self.raster.labels
    }
    pub fn num_regions(&self) -> usize {
        self.regions
    }
    pub fn raster(&self) -> &LabelRaster {
        &self.raster
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self::compacted(self.raster.resize_nearest(height, width)?))
    }
}

/// Normalized pixel-center coordinates, `h × w × 2` stored as `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
    pub fn get(&self, y: usize, x: usize) -> [f64; 2] {
        self.coords[y * self.width + x]
    }
}

/// Center of cell `i` out of `n` along one axis.
pub fn axis_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

pub fn make_coord_grid(h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("coordinate grid must be at least 1×1, got {h}×{w}")));
    }
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = axis_coord(i, h);
        for j in 0..w {
            coords.push([axis_coord(j, w), y]);
        }
    }
    Ok(CoordGrid {
        height: h,
        width: w,
        coords,
    })
}

/// Axis-aligned integer box: offsets `(x0, y0)` and extent `h × w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub h: usize,
    pub w: usize,
}

impl CropBox {
    pub fn new(x0: usize, y0: usize, h: usize, w: usize) -> Self {
        CropBox { x0, y0, h, w }
    }

    pub fn full(h: usize, w: usize) -> Self {
        CropBox { x0: 0, y0: 0, h, w }
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.h >= 1 && self.w >= 1 && self.y0 + self.h <= height && self.x0 + self.w <= width
    }

    /// Box equivalent to cropping by `self` and then by `inner` (relative to `self`).
    pub fn compose(&self, inner: &CropBox) -> Result<CropBox> {
        if !inner.fits_in(self.h, self.w) {
            return Err(Error::invalid(format!("{inner:?} does not fit inside {self:?}")));
        }
        Ok(CropBox {
            x0: self.x0 + inner.x0,
            y0: self.y0 + inner.y0,
            h: inner.h,
            w: inner.w,
        })
    }

    fn check_in(&self, height: usize, width: usize) -> Result<()> {
        if self.fits_in(height, width) {
            Ok(())
        } else {
            Err(Error::invalid(format!("crop {self:?} outside {height}×{width} raster")))
        }
    }
}

/// Scales both box corners by `factor` and rounds each to the nearest integer
/// (ties up). Downscaling keeps exactly the cells whose centers fall inside the
/// source box.
pub fn scale_box(b: &CropBox, factor: f64) -> Result<CropBox> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("scale factor must be positive, got {factor}")));
    }
    let r = |v: usize| (v as f64 * factor).round() as usize;
    let (x0, y0) = (r(b.x0), r(b.y0));
    let (x1, y1) = (r(b.x0 + b.w), r(b.y0 + b.h));
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::invalid(format!("{b:?} scaled by {factor} is degenerate")));
    }
    Ok(CropBox {
        x0,
        y0,
        h: y1 - y0,
        w: x1 - x0,
    })
}

/// Region of the student output that corresponds to a teacher crop taken from the
/// `t`-times enlarged image.
pub fn map_crop_to_student(b: &CropBox, t: f64) -> Result<CropBox> {
    if !(t >= 1.0) {
        return Err(Error::invalid(format!("scale t must be ≥ 1, got {t}")));
    }
    scale_box(b, 1.0 / t)
}

/// Inverse direction of [`map_crop_to_student`].
pub fn map_student_to_teacher(b: &CropBox, t: f64) -> Result<CropBox> {
    if !(t >= 1.0) {
        return Err(Error::invalid(format!("scale t must be ≥ 1, got {t}")));
    }
    scale_box(b, t)
}

/// Exact sub-array extraction.
pub trait Crop: Sized {
    fn crop(&self, b: &CropBox) -> Result<Self>;
}

fn crop_planes(src: &[f64], planes: usize, height: usize, width: usize, b: &CropBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * b.h * b.w);
    for p in 0..planes {
        let base = p * height * width;
        for y in b.y0..b.y0 + b.h {
            let row = base + y * width;
            out.extend_from_slice(&src[row + b.x0..row + b.x0 + b.w]);
        }
    }
    out
}

impl Crop for ImageTensor {
    fn crop(&self, b: &CropBox) -> Result<Self> {
        b.check_in(self.height, self.width)?;
        Ok(ImageTensor {
            batch: self.batch,
            height: b.h,
            width: b.w,
            data: crop_planes(&self.data, self.batch * 3, self.height, self.width, b),
        })
    }
}

impl Crop for FeatureMap {
    fn crop(&self, b: &CropBox) -> Result<Self> {
        b.check_in(self.height, self.width)?;
        Ok(FeatureMap {
            batch: self.batch,
            channels: self.channels,
            height: b.h,
            width: b.w,
            data: crop_planes(&self.data, self.batch * self.channels, self.height, self.width, b),
        })
    }
}

impl Crop for LabelRaster {
    fn crop(&self, b: &CropBox) -> Result<Self> {
        b.check_in(self.height, self.width)?;
        let mut labels = Vec::with_capacity(b.h * b.w);
        for y in b.y0..b.y0 + b.h {
            labels.extend_from_slice(&self.labels[y * self.width + b.x0..y * self.width + b.x0 + b.w]);
        }
        LabelRaster::new(b.h, b.w, labels)
    }
}

impl Crop for MaskLabelMap {
    /// Regions that fall completely outside the box disappear, so the result is relabeled.
    fn crop(&self, b: &CropBox) -> Result<Self> {
        Ok(Self::compacted(self.raster.crop(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coord_grid_examples() {
        let g = make_coord_grid(1, 1).unwrap();
        assert_eq!(g.coords(), &[[0.0, 0.0]]);

        let g = make_coord_grid(2, 2).unwrap();
        let xs: Vec<f64> = (0..2).map(|j| g.get(0, j)[0]).collect();
        let ys: Vec<f64> = (0..2).map(|i| g.get(i, 0)[1]).collect();
        assert_eq!(xs, vec![-0.5, 0.5]);
        assert_eq!(ys, vec![-0.5, 0.5]);

        let g = make_coord_grid(4, 1).unwrap();
        let ys: Vec<f64> = (0..4).map(|i| g.get(i, 0)[1]).collect();
        assert_eq!(ys, vec![-0.75, -0.25, 0.25, 0.75]);
        assert!(g.coords().iter().all(|c| c[0] == 0.0));
    }

    #[test]
    fn coord_grid_rejects_empty() {
        assert!(matches!(make_coord_grid(0, 3), Err(Error::InvalidArgument(_))));
        assert!(make_coord_grid(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn coord_grid_open_interval_and_monotone(h in 1usize..64, w in 1usize..64) {
            let g = make_coord_grid(h, w).unwrap();
            for c in g.coords() {
                prop_assert!(c[0] > -1.0 && c[0] < 1.0 && c[1] > -1.0 && c[1] < 1.0);
            }
            for j in 1..w {
                prop_assert!(g.get(0, j)[0] > g.get(0, j - 1)[0]);
            }
            for i in 1..h {
                prop_assert!(g.get(i, 0)[1] > g.get(i - 1, 0)[1]);
            }
        }
    }

    #[test]
    fn crop_mapping_examples() {
        let b = CropBox::new(100, 60, 224, 224);
        assert_eq!(map_crop_to_student(&b, 2.0).unwrap(), CropBox::new(50, 30, 112, 112));
        assert_eq!(map_crop_to_student(&b, 1.0).unwrap(), b);
        assert_eq!(
            map_crop_to_student(&CropBox::new(0, 0, 224, 224), 4.0).unwrap(),
            CropBox::new(0, 0, 56, 56)
        );
        assert!(map_crop_to_student(&CropBox::new(0, 0, 1, 1), 4.0).is_err());
        assert!(map_crop_to_student(&b, 0.5).is_err());
    }

    #[test]
    fn crop_mapping_round_trip_corners_within_half_a_student_cell() {
        for t in [2.0, 4.0] {
            for y0 in 0..16 {
                for x0 in 0..16 {
                    for h in 1..=16 - y0 {
                        for w in 1..=16 - x0 {
                            let b = CropBox::new(x0, y0, h, w);
                            let Ok(s) = map_crop_to_student(&b, t) else { continue };
                            let back = map_student_to_teacher(&s, t).unwrap();
                            let corners = [
                                (b.x0, back.x0),
                                (b.y0, back.y0),
                                (b.x0 + b.w, back.x0 + back.w),
                                (b.y0 + b.h, back.y0 + back.h),
                            ];
                            for (a, r) in corners {
                                assert!((a as f64 - r as f64).abs() <= t / 2.0, "{b:?} -> {back:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn crop_examples() {
        let m = FeatureMap::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64).unwrap();
        assert_eq!(m.crop(&CropBox::full(4, 4)).unwrap(), m);
        let c = m.crop(&CropBox::new(1, 1, 2, 2)).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(m.crop(&CropBox::new(3, 0, 2, 2)).is_err());
    }

    #[test]
    fn crop_composition_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = random_map(&mut rng, 2, 8, 8);
            let ah = rng.random_range(1..=8);
            let aw = rng.random_range(1..=8);
            let a = CropBox::new(rng.random_range(0..=8 - aw), rng.random_range(0..=8 - ah), ah, aw);
            let bh = rng.random_range(1..=ah);
            let bw = rng.random_range(1..=aw);
            let b = CropBox::new(rng.random_range(0..=aw - bw), rng.random_range(0..=ah - bh), bh, bw);
            let twice = m.crop(&a).unwrap().crop(&b).unwrap();
            let once = m.crop(&a.compose(&b).unwrap()).unwrap();
            assert_eq!(twice, once);
            // brute force index arithmetic
            for c in 0..2 {
                for y in 0..bh {
                    for x in 0..bw {
                        assert_eq!(twice.get(0, c, y, x), m.get(0, c, a.y0 + b.y0 + y, a.x0 + b.x0 + x));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_preserves_channels_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 5, 6, 7);
        let c = m.crop(&CropBox::new(2, 1, 4, 3)).unwrap();
        assert_eq!(c.channels(), 5);
        assert!(c.data().iter().all(|v| m.data().contains(v)));

        let img = ImageTensor::from_fn(5, 5, |y, x| [y as f64 / 5.0, x as f64 / 5.0, 0.5]).unwrap();
        let ci = img.crop(&CropBox::new(1, 2, 3, 3)).unwrap();
        assert_eq!(ci.get(0, 0, 0, 0), img.get(0, 0, 2, 1));
        assert_eq!(ci.get(0, 1, 2, 2), img.get(0, 1, 4, 3));
    }

    #[test]
    fn mask_constructors() {
        assert!(MaskLabelMap::new(1, 3, vec![0, 1, 3]).is_err());
        let m = MaskLabelMap::from_raw(1, 3, vec![0, 7, 3]).unwrap();
        assert_eq!(m.labels(), &[0, 2, 1]);
        assert_eq!(m.num_regions(), 2);

        // big mask covers all, small one covers pixel 1; overlap resolved by smallest-wins
        let big = vec![true, true, true];
        let small = vec![false, true, false];
        let m = MaskLabelMap::from_overlapping(1, 3, &[big, small]).unwrap();
        assert_eq!(m.labels(), &[1, 2, 1]);

        let c = MaskLabelMap::new(2, 2, vec![1, 2, 1, 3]).unwrap();
        let cropped = c.crop(&CropBox::new(0, 0, 2, 1)).unwrap();
        assert_eq!(cropped.labels(), &[1, 1]);
        assert_eq!(cropped.num_regions(), 1);
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(1, 1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![0.0, f64::NAN, 1.0]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 1, vec![f64::INFINITY]).is_err());
        assert!(FeatureMap::new(1, 0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let m = FeatureMap::from_fn(3, 2, 4, |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        let t = m.tokens(0);
        assert_eq!(&t[..3], &[0.0, 100.0, 200.0]);
        assert_eq!(FeatureMap::from_tokens(&t, 3, 2, 4).unwrap(), m);
    }
}
