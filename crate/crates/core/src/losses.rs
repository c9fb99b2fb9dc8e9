//! Training discrepancies and their gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::interp::bilinear_upsample;
use crate::error::{Error, Result};
use crate::linalg::{gemm, View, ViewMut};
use crate::types::{Crop, CropBox, FeatureMap};

/// Pixel cap above which the affinity loss subsamples pixels.
pub const AFFINITY_MAX_PIXELS: usize = 4096;
const NORM_EPS: f64 = 1e-8;

fn check_same(pred: &FeatureMap, target: &FeatureMap) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::invalid(format!(
            "shape mismatch: {}×{}×{}×{} vs {}×{}×{}×{}",
            pred.batch(),
            pred.channels(),
            pred.height(),
            pred.width(),
            target.batch(),
            target.channels(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn l2_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    check_same(pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// [`l2_loss`] and its gradient `2 (pred − target) / N`.
pub fn l2_loss_grad(pred: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let loss = l2_loss(pred, target)?;
    let n = pred.data().len() as f64;
    Ok((loss, pred.zip_with(target, |a, b| 2.0 * (a - b) / n)?))
}

pub fn stage1_loss(student_out: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    l2_loss(student_out, target)
}

pub fn stage1_loss_grad(student_out: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    l2_loss_grad(student_out, target)
}

/// Row-normalized tokens, with the pre-normalization norms.
fn normalize_rows(tokens: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = tokens.to_vec();
    let mut norms = Vec::with_capacity(tokens.len() / c);
    for row in out.chunks_exact_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = n.max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= d);
        norms.push(n);
    }
    (out, norms)
}

fn gram(n: &[f64], p: usize, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; p * p];
    gemm(1.0, View::rm(n, p, c), View::rm(n, p, c).t(), 0.0, ViewMut::rm(&mut g, p, p));
    g
}

/// Pixel subset used by the affinity loss: all pixels, or a seeded uniform
/// sample of `max_pixels` of them.
fn pixel_subset(p: usize, max_pixels: usize, seed: u64) -> Option<Vec<usize>> {
    (p > max_pixels).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, p, max_pixels).into_vec();
        idx.sort_unstable();
        idx
    })
}

fn gather(tokens: &[f64], c: usize, idx: &Option<Vec<usize>>) -> Vec<f64> {
    match idx {
        None => tokens.to_vec(),
        Some(ix) => ix.iter().flat_map(|&i| tokens[i * c..(i + 1) * c].iter().copied()).collect(),
    }
}

/// Affinity-matrix loss with an explicit pixel cap; returns the loss and the
/// gradient with respect to `pred`.
pub fn affinity_loss_grad_capped(pred: &FeatureMap, target: &FeatureMap, max_pixels: usize, seed: u64) -> Result<(f64, FeatureMap)> {
    if pred.batch() != 1 || target.batch() != 1 {
        return Err(Error::invalid("affinity loss compares single feature maps"));
    }
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::invalid(format!(
            "affinity loss needs equal spatial sizes, got {}×{} and {}×{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        )));
    }
    let (cp, ct) = (pred.channels(), target.channels());
    let p_all = pred.height() * pred.width();
    let idx = pixel_subset(p_all, max_pixels.max(1), seed);
    let tp = gather(&pred.tokens(0), cp, &idx);
    let tt = gather(&target.tokens(0), ct, &idx);
    let p = tp.len() / cp;
    let (np, norms) = normalize_rows(&tp, cp);
    let (nt, _) = normalize_rows(&tt, ct);
    let gp = gram(&np, p, cp);
    let gt = gram(&nt, p, ct);
    let denom = (p * p) as f64;
    let mut diff = gp;
    diff.iter_mut().zip(&gt).for_each(|(a, b)| *a -= b);
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / denom;

    // dL/dGp = 2 diff / P²; Gp symmetric so dN = 2 · dGp · N
    let mut dn = vec![0.0; p * cp];
    gemm(4.0 / denom, View::rm(&diff, p, p), View::rm(&np, p, cp), 0.0, ViewMut::rm(&mut dn, p, cp));
    let mut dtok = vec![0.0; p * cp];
    for i in 0..p {
        let n = &np[i * cp..(i + 1) * cp];
        let d = &dn[i * cp..(i + 1) * cp];
        let out = &mut dtok[i * cp..(i + 1) * cp];
        if norms[i] > NORM_EPS {
            let dot: f64 = n.iter().zip(d).map(|(a, b)| a * b).sum();
            for c in 0..cp {
                out[c] = (d[c] - n[c] * dot) / norms[i];
            }
        } else {
            for c in 0..cp {
                out[c] = d[c] / NORM_EPS;
            }
        }
    }
    let full = match idx {
        None => dtok,
        Some(ix) => {
            let mut full = vec![0.0; p_all * cp];
            for (k, &i) in ix.iter().enumerate() {
                full[i * cp..(i + 1) * cp].copy_from_slice(&dtok[k * cp..(k + 1) * cp]);
            }
            full
        }
    };
    Ok((loss, FeatureMap::from_tokens(&full, cp, pred.height(), pred.width())?))
}

pub fn affinity_loss_grad(pred: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    affinity_loss_grad_capped(pred, target, AFFINITY_MAX_PIXELS, 0)
}

/// Mean squared difference of the cosine Gram matrices of `pred` and `target`.
/// Channel counts may differ.
pub fn affinity_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    Ok(affinity_loss_grad(pred, target)?.0)
}

/// Affinity loss between the student region `student_box` and the teacher
/// target, plus the gradient with respect to the full student output.
pub fn stage2_loss_grad(student_full: &FeatureMap, teacher_target: &FeatureMap, student_box: &CropBox) -> Result<(f64, FeatureMap)> {
    stage2_loss_grad_capped(student_full, teacher_target, student_box, AFFINITY_MAX_PIXELS, 0)
}

/// [`stage2_loss_grad`] with an explicit affinity pixel cap and sampling seed.
pub fn stage2_loss_grad_capped(
    student_full: &FeatureMap,
    teacher_target: &FeatureMap,
    student_box: &CropBox,
    max_pixels: usize,
    seed: u64,
) -> Result<(f64, FeatureMap)> {
    if student_full.batch() != 1 {
        return Err(Error::invalid("stage-2 loss takes a single feature map"));
    }
    let crop = student_full.crop(student_box)?;
    let (th, tw) = (teacher_target.height(), teacher_target.width());
    let target = if (th, tw) == (crop.height(), crop.width()) {
        teacher_target.clone()
    } else if th.abs_diff(crop.height()) <= 1 && tw.abs_diff(crop.width()) <= 1 {
        bilinear_upsample(teacher_target, crop.height(), crop.width())?
    } else {
        return Err(Error::invalid(format!(
            "teacher target {th}×{tw} does not match student crop {}×{}",
            crop.height(),
            crop.width()
        )));
    };
    let (loss, dcrop) = affinity_loss_grad_capped(&crop, &target, max_pixels, seed)?;
    let c = student_full.channels();
    let (h, w) = (student_full.height(), student_full.width());
    let mut full = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..student_box.h {
            for x in 0..student_box.w {
                full[(ch * h + student_box.y0 + y) * w + student_box.x0 + x] = dcrop.get(0, ch, y, x);
            }
        }
    }
    Ok((loss, FeatureMap::new(1, c, h, w, full)?))
}

pub fn stage2_loss(student_full: &FeatureMap, teacher_target: &FeatureMap, student_box: &CropBox) -> Result<f64> {
    Ok(stage2_loss_grad(student_full, teacher_target, student_box)?.0)
}
