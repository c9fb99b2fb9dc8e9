//! Resize-convolution upsampler: repeated 2× bilinear resizing, each followed by a
//! 3×3 convolution, then a final bilinear resize to the requested size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::interp::{apply_separable, apply_separable_transpose, AxisTaps};
use crate::error::{Error, Result};
use crate::linalg::{linear, linear_backward};
use crate::nn::{col2im, conv_weight_channel_major, conv_weight_tap_major, im2col};
use crate::params::{variance_scaled, Param, ParamSet};
use crate::types::{FeatureMap, ImageTensor};
use crate::upsampler::{Trainable, Upsampler};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeConvConfig {
    pub channels: usize,
    pub stages: usize,
}

impl Default for ResizeConvConfig {
    fn default() -> Self {
        ResizeConvConfig { channels: 384, stages: 2 }
    }
}

impl ResizeConvConfig {
    pub fn with_channels(channels: usize) -> Self {
        ResizeConvConfig {
            channels,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResizeConv {
    cfg: ResizeConvConfig,
}

#[derive(Debug)]
struct StageTape {
    h: usize,
    w: usize,
    /// im2col matrix of the resized input, pixel-major.
    cols: Vec<f64>,
    /// Convolution output before the activation.
    z: Vec<f64>,
}

#[derive(Debug)]
pub struct ResizeConvTape {
    stages: Vec<StageTape>,
    out_h: usize,
    out_w: usize,
}

/// Channel-first planes → pixel-major tokens.
fn to_tokens(planes: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut t = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            t[p * c + ch] = planes[ch * hw + p];
        }
    }
    t
}

fn to_planes(tokens: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = tokens[p * c + ch];
        }
    }
    out
}

fn weight_name(s: usize) -> String {
    format!("stages.{s}.conv.weight")
}

fn bias_name(s: usize) -> String {
    format!("stages.{s}.conv.bias")
}

impl ResizeConv {
    pub fn new(cfg: ResizeConvConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.stages == 0 {
            return Err(Error::Config("resize-conv needs channels ≥ 1 and stages ≥ 1".into()));
        }
        Ok(ResizeConv { cfg })
    }

    pub fn config(&self) -> &ResizeConvConfig {
        &self.cfg
    }

    fn run(&self, params: &ParamSet, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(Vec<f64>, ResizeConvTape)> {
        let c = self.cfg.channels;
        if lowres.channels() != c {
            return Err(Error::invalid(format!("expected {c} channels, got {}", lowres.channels())));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        let (mut h, mut w) = (lowres.height(), lowres.width());
        let mut x = lowres.planes(0).to_vec();
        let mut stages = Vec::with_capacity(self.cfg.stages);
        for s in 0..self.cfg.stages {
            let wt = params.data(&weight_name(s), &[c, c, KERNEL, KERNEL])?;
            let b = params.data(&bias_name(s), &[c])?;
            let up = apply_separable(&x, c, h, w, &AxisTaps::linear(h, 2 * h), &AxisTaps::linear(w, 2 * w));
            h *= 2;
            w *= 2;
            let cols = im2col(&to_tokens(&up, c, h * w), h, w, c, KERNEL, 0, h * w);
            let z = linear(&cols, h * w, &conv_weight_tap_major(wt, c, c, KERNEL), b, c * KERNEL * KERNEL, c);
            let last = s + 1 == self.cfg.stages;
            let a: Vec<f64> = if last { z.clone() } else { z.iter().map(|v| v.max(0.0)).collect() };
            x = to_planes(&a, c, h * w);
            stages.push(StageTape { h, w, cols, z });
        }
        let out = apply_separable(&x, c, h, w, &AxisTaps::linear(h, out_h), &AxisTaps::linear(w, out_w));
        Ok((out, ResizeConvTape { stages, out_h, out_w }))
    }
}

impl Upsampler for ResizeConv {
    fn name(&self) -> &'static str {
        "resize-conv"
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.cfg.channels;
        let mut p = ParamSet::new();
        for s in 0..self.cfg.stages {
            let fan_in = c * KERNEL * KERNEL;
            p.insert(weight_name(s), variance_scaled(&mut rng, vec![c, c, KERNEL, KERNEL], fan_in))
                .expect("unique parameter names");
            p.insert(bias_name(s), Param::zeros(vec![c])).expect("unique parameter names");
        }
        p
    }

    fn forward(&self, params: &ParamSet, _img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        let maps = (0..lowres.batch())
            .map(|b| {
                let (out, _) = self.run(params, &lowres.image(b), out_h, out_w)?;
                FeatureMap::new(1, self.cfg.channels, out_h, out_w, out)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMap::stack(&maps)
    }
}

impl Trainable for ResizeConv {
    type Tape = ResizeConvTape;

    fn forward_train(&self, params: &ParamSet, _img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(FeatureMap, ResizeConvTape)> {
        if lowres.batch() != 1 {
            return Err(Error::invalid("training forward takes a single image"));
        }
        let (out, tape) = self.run(params, lowres, out_h, out_w)?;
        Ok((FeatureMap::new(1, self.cfg.channels, out_h, out_w, out)?, tape))
    }

    fn backward(&self, params: &ParamSet, tape: &ResizeConvTape, grad_out: &FeatureMap) -> Result<ParamSet> {
        let c = self.cfg.channels;
        if (grad_out.batch(), grad_out.channels(), grad_out.height(), grad_out.width()) != (1, c, tape.out_h, tape.out_w) {
            return Err(Error::invalid("output gradient does not match the recorded forward"));
        }
        let mut grads = params.zeros_like();
        let last = tape.stages.last().expect("at least one stage");
        let mut d = apply_separable_transpose(
            grad_out.data(),
            c,
            last.h,
            last.w,
            &AxisTaps::linear(last.h, tape.out_h),
            &AxisTaps::linear(last.w, tape.out_w),
        );
        for (s, st) in tape.stages.iter().enumerate().rev() {
            let hw = st.h * st.w;
            let mut dz = to_tokens(&d, c, hw);
            if s + 1 != tape.stages.len() {
                dz.iter_mut().zip(&st.z).for_each(|(g, z)| {
                    if *z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let wt = conv_weight_tap_major(params.data(&weight_name(s), &[c, c, KERNEL, KERNEL])?, c, c, KERNEL);
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; c];
            let width = c * KERNEL * KERNEL;
            let dcols = linear_backward(&st.cols, &dz, hw, &wt, width, c, &mut dw, &mut db, s > 0);
            grads.data_mut(&weight_name(s))?.copy_from_slice(&conv_weight_channel_major(&dw, c, c, KERNEL));
            grads.data_mut(&bias_name(s))?.copy_from_slice(&db);
            if let Some(dcols) = dcols {
                let dx = to_planes(&col2im(&dcols, st.h, st.w, c, KERNEL), c, hw);
                let (ph, pw) = (st.h / 2, st.w / 2);
                d = apply_separable_transpose(&dx, c, ph, pw, &AxisTaps::linear(ph, st.h), &AxisTaps::linear(pw, st.w));
            }
        }
        Ok(grads)
    }
}
