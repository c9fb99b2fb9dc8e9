//! Evaluation: linear-probe segmentation, mIoU, PCA renderings and timing.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::io::dataset::Sample;
use crate::par;
use crate::params::{param_count, ParamSet};
use crate::types::{FeatureMap, ImageTensor, LabelRaster};
use crate::upsampler::{ModelConfig, Upsampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    /// Training pixels drawn per image; `None` uses every pixel.
    pub pixels_per_image: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-4,
            epochs: 10,
            batch_pixels: 256,
            pixels_per_image: Some(256),
            seed: 0,
        }
    }
}

/// Per-pixel linear classifier over standardized channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[K, C]`
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.classes
    }

    fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Class scores for one pixel.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels();
        (0..self.classes)
            .map(|k| {
                let w = &self.weight[k * c..(k + 1) * c];
                self.bias[k] + (0..c).map(|i| w[i] * (x[i] - self.mean[i]) * self.inv_std[i]).sum::<f64>()
            })
            .collect()
    }

    /// Arg-max labels for every pixel of a single feature map.
    pub fn predict(&self, f: &FeatureMap) -> Result<LabelRaster> {
        if f.batch() != 1 || f.channels() != self.channels() {
            return Err(Error::invalid(format!(
                "probe expects one map with {} channels, got {}×{}",
                self.channels(),
                f.batch(),
                f.channels()
            )));
        }
        let c = self.channels();
        let labels = f
            .tokens(0)
            .chunks_exact(c)
            .map(|x| argmax(&self.logits(x)) as u32)
            .collect();
        LabelRaster::new(f.height(), f.width(), labels)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Labelled pixel features pooled across images for probe training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSamples {
    channels: usize,
    xs: Vec<f64>,
    ys: Vec<usize>,
}

impl PixelSamples {
    pub fn new(channels: usize) -> Self {
        PixelSamples {
            channels,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Adds up to `per_image` random pixels (all when `None`) of one map.
    pub fn add(&mut self, f: &FeatureMap, l: &LabelRaster, num_classes: usize, per_image: Option<usize>, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        if f.batch() != 1 || f.channels() != c || (f.height(), f.width()) != (l.height(), l.width()) {
            return Err(Error::invalid("features and labels must be single maps of equal size"));
        }
        if let Some(bad) = l.labels().iter().find(|v| **v as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} is out of range for {num_classes} classes")));
        }
        let tokens = f.tokens(0);
        let n = l.labels().len();
        let picks: Vec<usize> = match per_image {
            Some(k) if k < n => {
                let mut v = rand::seq::index::sample(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for p in picks {
            self.xs.extend_from_slice(&tokens[p * c..(p + 1) * c]);
            self.ys.push(l.labels()[p] as usize);
        }
        Ok(())
    }

    pub fn extend(&mut self, other: PixelSamples) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::invalid("pixel samples differ in channel count"));
        }
        self.xs.extend(other.xs);
        self.ys.extend(other.ys);
        Ok(())
    }
}

/// Trains a probe with softmax cross-entropy and Adam on mini-batches of
/// pixels pooled across images.
pub fn train_linear_probe(features: &[FeatureMap], labels: &[LabelRaster], num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("need one label map per feature map"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = PixelSamples::new(features[0].channels());
    for (f, l) in features.iter().zip(labels) {
        samples.add(f, l, num_classes, cfg.pixels_per_image, &mut rng)?;
    }
    fit_probe(&samples, num_classes, cfg)
}

pub fn fit_probe(samples: &PixelSamples, num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if num_classes < 2 {
        return Err(Error::invalid("a probe needs at least two classes"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no training pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6f62_6500_0000);
    let c = samples.channels;
    let (xs, ys) = (&samples.xs, &samples.ys);
    let n = ys.len();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for x in xs.chunks_exact(c) {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n as f64);
    }
    for x in xs.chunks_exact(c) {
        for i in 0..c {
            var[i] += (x[i] - mean[i]).powi(2) / n as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    let mut probe = LinearProbe {
        mean,
        inv_std,
        weight: vec![0.0; num_classes * c],
        bias: vec![0.0; num_classes],
        classes: num_classes,
    };

    let np = num_classes * c + num_classes;
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0;
    let mut grad = vec![0.0; np];
    let mut z = vec![0.0; c];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_pixels.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = &xs[i * c..(i + 1) * c];
                for j in 0..c {
                    z[j] = (x[j] - probe.mean[j]) * probe.inv_std[j];
                }
                let mut p: Vec<f64> = (0..num_classes)
                    .map(|k| probe.bias[k] + probe.weight[k * c..(k + 1) * c].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                crate::nn::softmax_rows(&mut p, num_classes);
                p[ys[i]] -= 1.0;
                let scale = 1.0 / batch.len() as f64;
                for k in 0..num_classes {
                    let d = p[k] * scale;
                    for j in 0..c {
                        grad[k * c + j] += d * z[j];
                    }
                    grad[num_classes * c + k] += d;
                }
            }
            t += 1;
            let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for idx in 0..np {
                m[idx] = b1 * m[idx] + (1.0 - b1) * grad[idx];
                v[idx] = b2 * v[idx] + (1.0 - b2) * grad[idx] * grad[idx];
                let step = cfg.lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + eps);
                if idx < num_classes * c {
                    probe.weight[idx] -= step;
                } else {
                    probe.bias[idx - num_classes * c] -= step;
                }
            }
        }
    }
    Ok(probe)
}

/// Accumulated confusion counts, `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::invalid("prediction and ground truth differ in size"));
        }
        if pred.labels().is_empty() {
            return Err(Error::invalid("empty label map"));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if p as usize >= self.classes || g as usize >= self.classes {
                return Err(Error::invalid(format!("label out of range for {} classes", self.classes)));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Mean IoU over the classes that occur in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        let k = self.classes;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            if gt == 0 {
                continue;
            }
            let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let inter = self.counts[c * k + c];
            sum += inter as f64 / (gt + pred - inter) as f64;
            present += 1;
        }
        if present == 0 {
            return Err(Error::invalid("no ground-truth pixels"));
        }
        Ok(sum / present as f64)
    }
}

pub fn miou(pred: &LabelRaster, gt: &LabelRaster, num_classes: usize) -> Result<f64> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    c.miou()
}

/// Projects the channels of a single map onto its top three principal
/// components and min-max normalizes each to `[0, 1]`.
pub fn pca_visualize(f: &FeatureMap) -> Result<ImageTensor> {
    let c = f.channels();
    if f.batch() != 1 || c < 3 {
        return Err(Error::invalid("PCA rendering needs a single map with at least 3 channels"));
    }
    let (h, w) = (f.height(), f.width());
    let p = h * w;
    let tokens = f.tokens(0);
    let mut mean = vec![0.0; c];
    for x in tokens.chunks_exact(c) {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / p as f64);
    }
    let centered = DMatrix::from_fn(p, c, |i, j| tokens[i * c + j] - mean[j]);
    let cov = centered.transpose() * &centered / p as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let top = eig.eigenvalues[order[0]];
    let basis: Vec<Vec<f64>> = if top > 1e-12 {
        order[..3]
            .iter()
            .map(|&k| {
                if eig.eigenvalues[k] < 1e-10 * top {
                    return vec![0.0; c];
                }
                let v = eig.eigenvectors.column(k);
                let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                let sign = if lead < 0.0 { -1.0 } else { 1.0 };
                v.iter().map(|x| x * sign).collect()
            })
            .collect()
    } else {
        (0..3).map(|k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).collect()
    };
    let mut data = vec![0.0; 3 * p];
    for (k, b) in basis.iter().enumerate() {
        let proj: Vec<f64> = (0..p)
            .map(|i| (0..c).map(|j| (tokens[i * c + j] - mean[j]) * b[j]).sum())
            .collect();
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(*v), u.max(*v)));
        let range = hi - lo;
        for (i, v) in proj.iter().enumerate() {
            data[k * p + i] = if range > 1e-12 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    ImageTensor::new(1, h, w, data)
}

/// Where probe features come from.
#[derive(Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Backbone features at their native grid; labels are sampled at cell
    /// centers for training and predictions are nearest-upsampled for scoring.
    LowRes,
    /// Features upsampled to the image resolution.
    Upsampled(&'a dyn Upsampler, &'a ParamSet),
}

impl FeatureSource<'_> {
    fn features(&self, backbone: &dyn Backbone, img: &ImageTensor) -> Result<FeatureMap> {
        let lowres = backbone.forward(img)?;
        match self {
            FeatureSource::LowRes => Ok(lowres),
            FeatureSource::Upsampled(m, p) => m.forward(p, img, &lowres, img.height(), img.width()),
        }
    }
}

fn class_map(s: &Sample) -> Result<&LabelRaster> {
    s.classes
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("sample `{}` has no class labels", s.stem)))
}

/// Trains a linear probe on `train` and returns test-set mIoU at image resolution.
pub fn probe_benchmark(
    source: FeatureSource<'_>,
    backbone: &dyn Backbone,
    train: &[Sample],
    test: &[Sample],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let parts = par::map_range(train.len(), |i| -> Result<PixelSamples> {
        let s = &train[i];
        let f = source.features(backbone, &s.image)?;
        let labels = class_map(s)?.resize_nearest(f.height(), f.width())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut out = PixelSamples::new(f.channels());
        out.add(&f, &labels, num_classes, cfg.pixels_per_image, &mut rng)?;
        Ok(out)
    });
    let mut samples: Option<PixelSamples> = None;
    for p in parts {
        let p = p?;
        match samples.as_mut() {
            None => samples = Some(p),
            Some(s) => s.extend(p)?,
        }
    }
    let samples = samples.ok_or_else(|| Error::invalid("empty training split"))?;
    let probe = fit_probe(&samples, num_classes, cfg)?;
    let preds = par::map_slice(test, |s| -> Result<(LabelRaster, LabelRaster)> {
        let f = source.features(backbone, &s.image)?;
        let gt = class_map(s)?.clone();
        let pred = probe.predict(&f)?.resize_nearest(gt.height(), gt.width())?;
        Ok((pred, gt))
    });
    let mut conf = Confusion::new(num_classes);
    for p in preds {
        let (pred, gt) = p?;
        conf.add(&pred, &gt)?;
    }
    conf.miou()
}

/// Median wall time in milliseconds of `repeats` calls after three warmups.
pub fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be ≥ 1"));
    }
    for _ in 0..3 {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub upsampler: String,
    pub params: usize,
    pub median_ms: f64,
}

/// Parameter count and median forward latency on a random image.
pub fn bench(model_cfg: &ModelConfig, backbone: &dyn Backbone, input_res: usize, out_res: usize, repeats: usize) -> Result<BenchResult> {
    let model = model_cfg.build()?;
    let params = model.init_params(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = ImageTensor::from_fn(input_res, input_res, |_, _| [rng.random(), rng.random(), rng.random()])?;
    let lowres = backbone.forward(&img)?;
    let median_ms = time_median(repeats, || model.forward(&params, &img, &lowres, out_res, out_res).map(|_| ()))?;
    Ok(BenchResult {
        upsampler: model.name().to_string(),
        params: param_count(&params),
        median_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_examples() {
        let gt = LabelRaster::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelRaster::new(1, 4, vec![0; 4]).unwrap();
        assert_eq!(miou(&pred, &gt, 2).unwrap(), 0.25);
        assert_eq!(miou(&gt, &gt, 5).unwrap(), 1.0);
        let shuffled_gt = LabelRaster::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(miou(&pred, &shuffled_gt, 2).unwrap(), 0.25);
        assert!(miou(&LabelRaster::new(1, 4, vec![2; 4]).unwrap(), &gt, 2).is_err());
    }

    #[test]
    fn probe_separates_linear_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..4 {
            let lab: Vec<u32> = (0..64).map(|_| rng.random_range(0..2)).collect();
            let f = FeatureMap::from_fn(3, 8, 8, |c, y, x| {
                let s = if lab[y * 8 + x] == 1 { 1.0 } else { -1.0 };
                if c == 0 { s + 0.3 * ((y * 8 + x) as f64).sin() } else { ((c * 31 + y * 7 + x) as f64).cos() }
            })
            .unwrap();
            feats.push(f);
            labels.push(LabelRaster::new(8, 8, lab).unwrap());
        }
        let cfg = ProbeConfig {
            lr: 1e-2,
            epochs: 20,
            ..Default::default()
        };
        let probe = train_linear_probe(&feats, &labels, 2, &cfg).unwrap();
        let mut correct = 0;
        for (f, l) in feats.iter().zip(&labels) {
            let p = probe.predict(f).unwrap();
            correct += p.labels().iter().zip(l.labels()).filter(|(a, b)| a == b).count();
        }
        assert!(correct as f64 / 256.0 >= 0.99);
        assert_eq!(probe, train_linear_probe(&feats, &labels, 2, &cfg).unwrap());
        let untrained = train_linear_probe(&feats, &labels, 2, &ProbeConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(untrained.logits(&[0.3, 0.1, 0.2]), vec![0.0, 0.0]);
        assert!(train_linear_probe(&feats, &labels, 1, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn pca_rank_one_and_range() {
        let f = FeatureMap::from_fn(4, 5, 6, |c, y, x| (c as f64 + 1.0) * ((y * 6 + x) as f64).sin()).unwrap();
        let img = pca_visualize(&f).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // only the first component carries signal
        assert!(img.planes(0)[30..].iter().all(|v| *v == 0.0));
        assert_eq!(img, pca_visualize(&f).unwrap());
        let constant = FeatureMap::from_fn(3, 2, 2, |_, _, _| 1.0).unwrap();
        assert!(pca_visualize(&constant).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(pca_visualize(&FeatureMap::from_fn(2, 2, 2, |_, _, _| 1.0).unwrap()).is_err());
    }

    #[test]
    fn median_of_constant_stub() {
        let ms = time_median(5, || {
            std::thread::sleep(std::time::Duration::from_millis(2));
            Ok(())
        })
        .unwrap();
        assert!((2.0..20.0).contains(&ms), "{ms}");
    }
}
