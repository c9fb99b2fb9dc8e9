//! Image + mask datasets on disk, and the synthetic shapes generator.
//!
//! Layout under the dataset root:
//!
//! ```text
//! images/<stem>.png    8-bit RGB
//! masks/<stem>.png     16-bit label map, 0 = no region
//! classes/<stem>.png   optional 8-bit semantic labels (probe targets)
//! features/<stem>.lfuf optional backbone feature sidecars
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::png;
use crate::types::{ImageTensor, LabelRaster, MaskLabelMap};

/// Number of shape kinds painted by [`synth_dataset`]. Semantic class `k + 1`
/// is shape kind `k`; class 0 is background.
pub const SHAPE_KINDS: usize = 4;
pub const SYNTH_CLASSES: usize = SHAPE_KINDS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; SHAPE_KINDS] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Ring, ShapeKind::Cross];

    pub fn class_id(self) -> u32 {
        self as u32 + 1
    }

    /// Membership of a point at offset `(dx, dy)` from the center of a shape
    /// with half extents `(a, b)`.
    fn contains(self, dx: f64, dy: f64, a: f64, b: f64) -> bool {
        let r = (dx / a).powi(2) + (dy / b).powi(2);
        match self {
            ShapeKind::Rectangle => dx.abs() <= a && dy.abs() <= b,
            ShapeKind::Ellipse => r <= 1.0,
            ShapeKind::Ring => r <= 1.0 && r >= 0.3,
            ShapeKind::Cross => {
                let t = 0.3 * a.min(b);
                (dx.abs() <= a && dy.abs() <= t) || (dy.abs() <= b && dx.abs() <= t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: ImageTensor,
    pub masks: MaskLabelMap,
    pub classes: Option<LabelRaster>,
    pub features: Option<PathBuf>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One synthetic image: a textured background (region 1, class 0) under
/// `3..=8` shapes whose kind sets both the semantic class and the base hue.
pub fn synth_sample(h: usize, w: usize, rng: &mut impl Rng) -> Result<Sample> {
    let base = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.25), rng.random_range(0.35..0.65));
    let (fx, fy, phase) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(0.0..6.3));
    let mut rgb = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let wave = 0.06 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            let grain = rng.random_range(-0.03..0.03);
            rgb[y * w + x] = base.map(|c| c + wave + grain);
        }
    }
    let mut instances = vec![1u32; h * w];
    let mut classes = vec![0u32; h * w];
    let k = rng.random_range(3..=8);
    let s = h.min(w) as f64;
    for i in 0..k {
        let kind = ShapeKind::ALL[rng.random_range(0..SHAPE_KINDS)];
        let hue = kind as usize as f64 / SHAPE_KINDS as f64 + rng.random_range(-0.04..0.04);
        let color = hsv_to_rgb(hue, rng.random_range(0.6..0.9), rng.random_range(0.6..0.95));
        let (a, b) = (rng.random_range(0.08..0.25) * s, rng.random_range(0.08..0.25) * s);
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        for y in 0..h {
            for x in 0..w {
                if kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, a, b) {
                    let p = y * w + x;
                    instances[p] = i as u32 + 2;
                    classes[p] = kind.class_id();
                    rgb[p] = color.map(|c| c + rng.random_range(-0.02..0.02));
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c].clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        stem: String::new(),
        image: ImageTensor::new(1, h, w, data)?,
        masks: MaskLabelMap::from_raw(h, w, instances)?,
        classes: Some(LabelRaster::new(h, w, classes)?),
        features: None,
    })
}

/// `n` synthetic samples. Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("synthetic datasets need n, h, w ≥ 1"));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut s = synth_sample(h, w, &mut rng)?;
            s.stem = format!("{i:06}");
            Ok(s)
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks", "classes"] {
        create_dir(&root.join(sub))?;
    }
    for s in samples {
        png::write_rgb(&root.join("images").join(format!("{}.png", s.stem)), &s.image, 0)?;
        png::write_labels16(&root.join("masks").join(format!("{}.png", s.stem)), s.masks.raster())?;
        if let Some(c) = &s.classes {
            png::write_labels8(&root.join("classes").join(format!("{}.png", s.stem)), c)?;
        }
    }
    Ok(())
}

/// Sorted stems of `images/*.png`; a missing directory means an empty dataset.
fn list_stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_sample(root: &Path, stem: &str) -> Result<Sample> {
    let image = png::read_rgb(&root.join("images").join(format!("{stem}.png")))?;
    let mask_path = root.join("masks").join(format!("{stem}.png"));
    if !mask_path.exists() {
        return Err(Error::load(&mask_path, format!("no mask for image `{stem}`")));
    }
    let raw = png::read_labels(&mask_path)?;
    if (raw.height(), raw.width()) != (image.height(), image.width()) {
        return Err(Error::load(
            &mask_path,
            format!(
                "mask for `{stem}` is {}×{} but the image is {}×{}",
                raw.height(),
                raw.width(),
                image.height(),
                image.width()
            ),
        ));
    }
    let masks = MaskLabelMap::from_raw(raw.height(), raw.width(), raw.labels().to_vec())?;
    let class_path = root.join("classes").join(format!("{stem}.png"));
    let classes = if class_path.exists() {
        let c = png::read_labels(&class_path)?;
        if (c.height(), c.width()) != (image.height(), image.width()) {
            return Err(Error::load(&class_path, format!("class map for `{stem}` has the wrong size")));
        }
        Some(c)
    } else {
        None
    };
    let feat = root.join("features").join(format!("{stem}.lfuf"));
    Ok(Sample {
        stem: stem.to_string(),
        image,
        masks,
        classes,
        features: feat.exists().then_some(feat),
    })
}

/// Loads samples in sorted-stem order, optionally shuffled by `split_seed`,
/// then truncated to `limit`.
pub fn load_dataset(root: &Path, split_seed: Option<u64>, limit: Option<usize>) -> Result<Vec<Sample>> {
    let mut stems = list_stems(root)?;
    if let Some(seed) = split_seed {
        stems.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if let Some(l) = limit {
        stems.truncate(l);
    }
    stems.iter().map(|s| load_sample(root, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_well_formed() {
        let a = synth_dataset(6, 24, 32, 7).unwrap();
        assert_eq!(a, synth_dataset(6, 24, 32, 7).unwrap());
        assert_ne!(a, synth_dataset(6, 24, 32, 8).unwrap());
        // prefix stability
        assert_eq!(a[..3], synth_dataset(3, 24, 32, 7).unwrap()[..]);
        for s in &a {
            assert_eq!(s.masks.labels().iter().filter(|l| **l == 0).count(), 0);
            let c = s.classes.as_ref().unwrap();
            assert!(c.max_label() < SYNTH_CLASSES as u32);
            // every instance has a single class
            let mut class_of = vec![None; s.masks.num_regions() + 1];
            for (l, k) in s.masks.labels().iter().zip(c.labels()) {
                let slot = &mut class_of[*l as usize];
                assert!(slot.is_none() || *slot == Some(*k));
                *slot = Some(*k);
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
        assert_eq!(hsv_to_rgb(0.7, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn disk_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), None, None).unwrap().is_empty());
        let data = synth_dataset(3, 16, 16, 1).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path(), None, None).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.stem, b.stem);
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.classes, b.classes);
        }
        assert_eq!(load_dataset(dir.path(), None, Some(2)).unwrap().len(), 2);
        let shuffled: Vec<_> = load_dataset(dir.path(), Some(3), None).unwrap().into_iter().map(|s| s.stem).collect();
        let mut sorted = shuffled.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["000000", "000001", "000002"]);

        let bad = LabelRaster::new(8, 8, vec![1; 64]).unwrap();
        png::write_labels16(&dir.path().join("masks/000001.png"), &bad).unwrap();
        let err = load_dataset(dir.path(), None, None).unwrap_err().to_string();
        assert!(err.contains("000001"), "{err}");
        fs::remove_file(dir.path().join("masks/000001.png")).unwrap();
        let err = load_dataset(dir.path(), None, None).unwrap_err().to_string();
        assert!(err.contains("000001"), "{err}");
    }
}
