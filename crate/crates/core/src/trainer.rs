//! Two-stage optimization: stage 1 regresses mask-refined bicubic targets,
//! stage 2 self-distills from an EMA teacher run on enlarged crops.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::baselines::interp::resize_image;
use crate::error::{Error, Result};
use crate::io::dataset::Sample;
use crate::losses::{l2_loss_grad, stage2_loss_grad_capped, AFFINITY_MAX_PIXELS};
use crate::par;
use crate::params::ParamSet;
use crate::pseudo_gt::{make_mask_bicubic_target, teacher_target, two_x_feature_target, PseudoGtConfig};
use crate::types::{map_crop_to_student, CropBox, FeatureMap};
use crate::upsampler::{Model, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltObjective {
    #[default]
    MaskBicubic,
    TwoXFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub ema_decay: f64,
    pub ema_interval: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub pseudo_gt: PseudoGtConfig,
    pub alt_objective: AltObjective,
    pub affinity_max_pixels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: Stage::One,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            ema_decay: 0.99,
            ema_interval: 10,
            epochs: 1,
            max_steps: None,
            seed: 0,
            clip_norm: Some(1.0),
            pseudo_gt: PseudoGtConfig::default(),
            alt_objective: AltObjective::MaskBicubic,
            affinity_max_pixels: AFFINITY_MAX_PIXELS,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: Stage::Two,
            lr: 1e-4,
            ..TrainConfig::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.ema_interval == 0 || self.batch_size == 0 {
            return Err(Error::Config("ema_interval and batch_size must be ≥ 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.pseudo_gt.validate()
    }

    /// Optimizer steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * n.div_ceil(self.batch_size))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    /// Mean enlargement factor over the batch (stage 2 only).
    pub t: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    /// The EMA teacher at the end of stage 2.
    pub teacher: Option<ParamSet>,
    pub history: Vec<StepRecord>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_same_layout(grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps) + self.weight_decay * p[i];
                p[i] -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

/// `teacher' = decay · teacher + (1 − decay) · student`, per parameter.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, decay: f64) -> Result<ParamSet> {
    teacher.check_same_layout(student)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("decay must lie in [0, 1], got {decay}")));
    }
    let mut out = teacher.clone();
    for ((_, o), (_, s)) in out.iter_mut().zip(student.iter()) {
        for (a, b) in o.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(out)
}

/// Uniform `h × w` box inside the `t`-enlarged image `⌊t·h⌋ × ⌊t·w⌋`.
pub fn sample_crop_box(h: usize, w: usize, t: f64, rng: &mut impl Rng) -> Result<CropBox> {
    let (hh, ww) = enlarged_size(h, w, t)?;
    Ok(CropBox::new(rng.random_range(0..=ww - w), rng.random_range(0..=hh - h), h, w))
}

fn enlarged_size(h: usize, w: usize, t: f64) -> Result<(usize, usize)> {
    if !(t >= 1.0 && t.is_finite()) {
        return Err(Error::invalid(format!("enlargement factor must be ≥ 1, got {t}")));
    }
    let (hh, ww) = ((t * h as f64).floor() as usize, (t * w as f64).floor() as usize);
    if hh < h || ww < w {
        return Err(Error::invalid(format!("{hh}×{ww} cannot hold a {h}×{w} crop")));
    }
    Ok((hh, ww))
}

/// Random stream for image `slot` of optimizer step `step`.
fn image_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Dataset indices of the batch used at `step`: each epoch visits a fresh
/// seeded permutation in consecutive slices.
fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7300);
    rng.set_stream(epoch as u64);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let start = (step % per_epoch) * batch;
    order[start..(start + batch).min(n)].to_vec()
}

struct ImageGrad {
    loss: f64,
    grads: ParamSet,
    t: Option<f64>,
}

fn reduce(parts: Vec<Result<ImageGrad>>, template: &ParamSet) -> Result<(f64, ParamSet, Option<f64>)> {
    let n = parts.len() as f64;
    let mut grads = template.zeros_like();
    let (mut loss, mut t_sum, mut has_t) = (0.0, 0.0, false);
    for p in parts {
        let p = p?;
        loss += p.loss;
        grads.add_scaled(&p.grads, 1.0 / n)?;
        if let Some(t) = p.t {
            t_sum += t;
            has_t = true;
        }
    }
    Ok((loss / n, grads, has_t.then_some(t_sum / n)))
}

struct Loop<'a, 'b> {
    cfg: &'a TrainConfig,
    history: Vec<StepRecord>,
    log: Option<&'b mut dyn FnMut(&StepRecord)>,
}

impl Loop<'_, '_> {
    fn finish_step(&mut self, step: usize, loss: f64, t: Option<f64>, start: Instant) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {step} of stage {}",
                u8::from(self.cfg.stage)
            )));
        }
        let rec = StepRecord {
            step,
            stage: self.cfg.stage.into(),
            loss,
            lr: self.cfg.lr,
            t,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(log) = self.log.as_mut() {
            log(&rec);
        }
        self.history.push(rec);
        Ok(())
    }
}

fn check_data(data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one image"));
    }
    Ok(())
}

fn apply_update(params: &mut ParamSet, grads: &mut ParamSet, opt: &mut AdamW, cfg: &TrainConfig) -> Result<()> {
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(grads, c);
    }
    opt.step(params, grads)
}

/// Stage 1: each image's upsampled features regress the mask-refined bicubic
/// target (or the 2×-image features under the alternative objective).
pub fn train_stage1<M: Trainable>(
    model: &M,
    backbone: &dyn Backbone,
    data: &[Sample],
    cfg: &TrainConfig,
    init: ParamSet,
    log: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutput> {
    check_data(data, cfg)?;
    let mut params = init;
    let mut opt = AdamW::new(&params, cfg);
    let mut lp = Loop {
        cfg,
        history: Vec::new(),
        log,
    };
    for step in 0..cfg.total_steps(data.len()) {
        let start = Instant::now();
        let batch = batch_indices(data.len(), cfg.batch_size, step, cfg.seed);
        let parts = par::map_slice(&batch, |&i| stage1_image(model, backbone, &data[i], &params, cfg));
        let (loss, mut grads, _) = reduce(parts, &params)?;
        lp.finish_step(step, loss, None, start)?;
        apply_update(&mut params, &mut grads, &mut opt, cfg)?;
    }
    Ok(TrainOutput {
        params,
        teacher: None,
        history: lp.history,
    })
}

fn stage1_image<M: Trainable>(model: &M, backbone: &dyn Backbone, s: &Sample, params: &ParamSet, cfg: &TrainConfig) -> Result<ImageGrad> {
    let (h, w) = (s.image.height(), s.image.width());
    let lowres = backbone.forward(&s.image)?;
    let (target, oh, ow) = match cfg.alt_objective {
        AltObjective::MaskBicubic => (make_mask_bicubic_target(&lowres, &s.masks, h, w, cfg.pseudo_gt.alpha)?, h, w),
        AltObjective::TwoXFeatures => {
            let t = two_x_feature_target(backbone, &s.image)?;
            let (th, tw) = (t.height(), t.width());
            (t, th, tw)
        }
    };
    let (out, tape) = model.forward_train(params, &s.image, &lowres, oh, ow)?;
    let (loss, dout) = l2_loss_grad(&out, &target)?;
    Ok(ImageGrad {
        loss,
        grads: model.backward(params, &tape, &dout)?,
        t: None,
    })
}

/// Stage 2: student and teacher both start from `stage1`; the teacher follows
/// the student by EMA every `ema_interval` optimizer steps.
pub fn train_stage2<M: Trainable>(
    model: &M,
    backbone: &dyn Backbone,
    data: &[Sample],
    cfg: &TrainConfig,
    stage1: ParamSet,
    log: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutput> {
    check_data(data, cfg)?;
    let mut params = stage1.clone();
    let mut teacher = stage1;
    let mut opt = AdamW::new(&params, cfg);
    let mut lp = Loop {
        cfg,
        history: Vec::new(),
        log,
    };
    for step in 0..cfg.total_steps(data.len()) {
        let start = Instant::now();
        let batch = batch_indices(data.len(), cfg.batch_size, step, cfg.seed);
        let slots: Vec<(usize, usize)> = batch.into_iter().enumerate().collect();
        let parts = par::map_slice(&slots, |&(slot, i)| {
            let mut rng = image_rng(cfg.seed, step, slot);
            stage2_image(model, backbone, &data[i], &params, &teacher, cfg, &mut rng)
        });
        let (loss, mut grads, t) = reduce(parts, &params)?;
        lp.finish_step(step, loss, t, start)?;
        apply_update(&mut params, &mut grads, &mut opt, cfg)?;
        if (step + 1) % cfg.ema_interval == 0 {
            teacher = ema_update(&teacher, &params, cfg.ema_decay)?;
        }
    }
    Ok(TrainOutput {
        params,
        teacher: Some(teacher),
        history: lp.history,
    })
}

/// Teacher crops, their targets on the student grid and the matching student
/// boxes for one image.
pub struct Stage2Targets {
    pub t: f64,
    pub teacher_boxes: Vec<CropBox>,
    pub student_boxes: Vec<CropBox>,
    pub targets: Vec<FeatureMap>,
}

pub fn stage2_targets<M: Trainable>(
    model: &M,
    backbone: &dyn Backbone,
    s: &Sample,
    teacher: &ParamSet,
    cfg: &PseudoGtConfig,
    rng: &mut impl Rng,
) -> Result<Stage2Targets> {
    let (h, w) = (s.image.height(), s.image.width());
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let (hh, ww) = enlarged_size(h, w, t)?;
    let img_hr = resize_image(&s.image, hh, ww)?;
    let masks_hr = s.masks.resize_nearest(hh, ww)?;
    let mut out = Stage2Targets {
        t,
        teacher_boxes: Vec::new(),
        student_boxes: Vec::new(),
        targets: Vec::new(),
    };
    for _ in 0..cfg.crops_per_image {
        let b = sample_crop_box(h, w, t, rng)?;
        out.targets.push(teacher_target(model, teacher, &img_hr, &b, &masks_hr, t, cfg, backbone)?);
        out.student_boxes.push(map_crop_to_student(&b, t)?);
        out.teacher_boxes.push(b);
    }
    Ok(out)
}

fn stage2_image<M: Trainable>(
    model: &M,
    backbone: &dyn Backbone,
    s: &Sample,
    params: &ParamSet,
    teacher: &ParamSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageGrad> {
    let (h, w) = (s.image.height(), s.image.width());
    let tg = stage2_targets(model, backbone, s, teacher, &cfg.pseudo_gt, rng)?;
    let lowres = backbone.forward(&s.image)?;
    let (out, tape) = model.forward_train(params, &s.image, &lowres, h, w)?;
    let n = tg.targets.len() as f64;
    let mut loss = 0.0;
    let mut dout = vec![0.0; out.data().len()];
    for (k, (target, sb)) in tg.targets.iter().zip(&tg.student_boxes).enumerate() {
        let (l, g) = stage2_loss_grad_capped(&out, target, sb, cfg.affinity_max_pixels, cfg.seed ^ k as u64)?;
        loss += l / n;
        dout.iter_mut().zip(g.data()).for_each(|(d, v)| *d += v / n);
    }
    let dout = FeatureMap::new(1, out.channels(), h, w, dout)?;
    Ok(ImageGrad {
        loss,
        grads: model.backward(params, &tape, &dout)?,
        t: Some(tg.t),
    })
}

/// Runs the stage named in `cfg` for any trainable model. `init` is the
/// starting point: fresh parameters for stage 1, the stage-1 result for stage 2.
pub fn train_model(
    model: &Model,
    backbone: &dyn Backbone,
    data: &[Sample],
    cfg: &TrainConfig,
    init: ParamSet,
    log: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutput> {
    fn run<M: Trainable>(
        m: &M,
        backbone: &dyn Backbone,
        data: &[Sample],
        cfg: &TrainConfig,
        init: ParamSet,
        log: Option<&mut dyn FnMut(&StepRecord)>,
    ) -> Result<TrainOutput> {
        match cfg.stage {
            Stage::One => train_stage1(m, backbone, data, cfg, init, log),
            Stage::Two => train_stage2(m, backbone, data, cfg, init, log),
        }
    }
    match model {
        Model::Loftup(m) => run(m, backbone, data, cfg, init, log),
        Model::ResizeConv(m) => run(m, backbone, data, cfg, init, log),
        Model::LocalImplicit(m) => run(m, backbone, data, cfg, init, log),
        Model::Bilinear(_) | Model::Bicubic(_) => Err(Error::Config(format!(
            "`{}` has no parameters to train",
            crate::upsampler::Upsampler::name(model)
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Param::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn ema_examples() {
        let t = scalar(2.0);
        let s = scalar(4.0);
        assert_eq!(ema_update(&t, &s, 0.5).unwrap(), scalar(3.0));
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        let mut other = ParamSet::new();
        other.insert("y", Param::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(ema_update(&t, &other, 0.5).is_err());
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn crop_box_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_crop_box(7, 9, 1.0, &mut rng).unwrap(), CropBox::new(0, 0, 7, 9));
        for _ in 0..10_000 {
            let t = rng.random_range(2.0..=4.0);
            let b = sample_crop_box(13, 17, t, &mut rng).unwrap();
            let (hh, ww) = enlarged_size(13, 17, t).unwrap();
            assert!(b.fits_in(hh, ww) && (b.h, b.w) == (13, 17));
        }
        assert!(sample_crop_box(4, 4, 0.5, &mut rng).is_err());
        let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(4), ChaCha8Rng::seed_from_u64(4));
        assert_eq!(sample_crop_box(10, 10, 2.5, &mut a).unwrap(), sample_crop_box(10, 10, 2.5, &mut b).unwrap());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let (n, bs) = (10, 4);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|k| batch_indices(n, bs, epoch * 3 + k, 5)).collect();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(n, bs, 2, 5).len(), 2);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut cfg = TrainConfig::stage1();
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &scalar(0.3)).unwrap();
        assert!((p.get("x").unwrap().data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        // decoupled decay with zero gradient
        let mut cfg = TrainConfig::stage1();
        cfg.lr = 0.1;
        let mut p = scalar(2.0);
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert!((p.get("x").unwrap().data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = scalar(3.0);
        g.insert("y", Param::new(vec![1], vec![4.0]).unwrap()).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let mut small = scalar(0.5);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, scalar(0.5));
    }

    #[test]
    fn stage_serializes_as_integer() {
        let cfg = TrainConfig::stage2();
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("stage = 2"), "{text}");
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<TrainConfig>("stage = 3").is_err());
    }
}
